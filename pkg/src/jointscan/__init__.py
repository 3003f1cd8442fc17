"""Joint models for longitudinal and competing-risks data fitted by EM, with
linear-scan kernels for every risk-set and event-time accumulation."""
from .em import EmConfig, FitResult, em_fit
from .inference import covariance, profiled_scores, standard_errors
from .lmm import empirical_bayes_all, fit_lmm
from .model import BaselineHazard, Dataset, ModelError, OmegaLayout, ParameterSet, Subject
from .quadrature import QuadMode
from .scan import (SCAN_KERNELS, OpCounter, ScanError, prefix_event_accumulate,
                   riskset_ratio_accumulate, step_lookup_scan, suffix_riskset_sums)
from .simulate import SimConfig, simulate_dataset

__all__ = [
    "BaselineHazard", "Dataset", "EmConfig", "FitResult", "ModelError", "OmegaLayout",
    "OpCounter", "ParameterSet", "QuadMode", "SCAN_KERNELS", "ScanError", "SimConfig", "Subject",
    "covariance", "em_fit", "empirical_bayes_all", "fit_lmm", "prefix_event_accumulate",
    "profiled_scores", "riskset_ratio_accumulate", "simulate_dataset", "standard_errors",
    "step_lookup_scan", "suffix_riskset_sums",
]
