"""Standard errors from the empirical Fisher information of profiled scores.

The per-subject profiled log-likelihood replaces each baseline hazard by its
Breslow plug-in

    dLambda_kj(Omega) = d_kj / sum_{r in R(t_kj)} exp(W_r gamma_k) E_r{exp(nu_k b)},

with the posterior distributions E_r held at the fitted values.  Differentiating
the plug-in produces, for every subject, sums over event times below T_i of
risk-set ratios; those come from :func:`riskset_ratio_accumulate` (two suffix
scans and one prefix scan per cause) instead of nested loops.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .em import FitResult, breslow, e_step, riskset_weights
from .model import Dataset, ModelError, OmegaLayout
from .scan import SCAN_KERNELS, Kernels, OpCounter

MAX_CONDITION = 1e12


class NotConvergedError(ModelError):
    pass


@dataclass
class ScoreMatrix:
    scores: np.ndarray          # (n, d)
    layout: OmegaLayout
    names: list

    @property
    def total(self) -> np.ndarray:
        return self.scores.sum(axis=0)

    def stationarity_ok(self) -> bool:
        """Diagnostic: total score near zero at the estimate."""
        n = len(self.scores)
        return bool(np.max(np.abs(self.total)) <= 1e-3 * np.sqrt(n))


def plugin_baselines(ds: Dataset, fit: FitResult, kernels: Kernels = SCAN_KERNELS,
                     counter: OpCounter | None = None) -> list:
    """Breslow baselines at the fitted Omega using the frozen posterior moments."""
    out = []
    for k in range(ds.n_causes):
        a = riskset_weights(ds, fit.moments, fit.params.gamma[k], k)
        if counter is not None and ds.events[k].size:
            kernels.riskset_sums(a[ds.desc_order], ds.T_desc, ds.events[k].times, counter=counter)
        out.append(breslow(ds, a, k, kernels))
    return out


def profiled_scores(dataset: Dataset, fit: FitResult, kernels: Kernels = SCAN_KERNELS,
                    counter: OpCounter | None = None, require_converged: bool = True) -> ScoreMatrix:
    """Per-subject gradients of the profiled log-likelihood at the fitted Omega."""
    ds = dataset
    if require_converged and not fit.converged:
        raise NotConvergedError("standard errors need a converged fit")
    layout = OmegaLayout.for_dataset(ds)
    names = layout.names(ds.fixed_names, ds.random_names, ds.surv_names)
    frozen = fit.moments
    base = plugin_baselines(ds, fit, kernels, counter)
    params = fit.params.copy(baselines=base)
    live = e_step(ds, params, fit.quad, kernels).moments

    n, p, q, p2, K = ds.n, ds.p, ds.q, ds.p2, ds.n_causes
    sl = layout.slices
    S = np.zeros((n, layout.dim))
    s2 = params.sigma2

    # longitudinal and random-effect blocks
    r = ds.y - ds.X @ params.beta
    zb = np.einsum("ja,ja->j", ds.Z, live.Eb[ds.obs_subject])
    resid = r - zb
    S[:, sl["beta"]] = np.stack([np.bincount(ds.obs_subject, weights=ds.X[:, a] * resid, minlength=n)
                                 for a in range(p)], axis=1) / s2
    rr = np.bincount(ds.obs_subject, weights=r * r, minlength=n)
    Zr = np.stack([np.bincount(ds.obs_subject, weights=ds.Z[:, a] * r, minlength=n)
                   for a in range(q)], axis=1)
    ess = rr - 2 * np.einsum("ia,ia->i", live.Eb, Zr) + np.einsum("iab,iab->i", ds.ZtZ, live.Ebb)
    S[:, sl["sigma2"]] = (-0.5 * ds.n_obs / s2 + 0.5 * ess / s2 ** 2)[:, None]
    Sinv = np.linalg.inv(params.Sigma)
    G = 0.5 * (Sinv @ live.Ebb @ Sinv - Sinv[None])
    S[:, sl["Sigma"]] = np.stack([G[:, a, b] * (1.0 if a == b else 2.0) for a, b in layout.tril], axis=1)

    # survival blocks
    order = ds.desc_order
    g0, n0 = sl["gamma"].start, sl["nu"].start
    for k in range(K):
        ev = ds.events[k]
        gk = slice(g0 + k * p2, g0 + (k + 1) * p2)
        nk = slice(n0 + k * q, n0 + (k + 1) * q)
        is_k = (ds.D == k + 1)[:, None]
        if ev.size == 0:
            continue
        e = np.exp(ds.W @ params.gamma[k])
        a = e * frozen.Eexp[k]
        numer = np.concatenate([a[:, None] * ds.W, e[:, None] * frozen.Ebexp[k]], axis=1)
        a_d, numer_d = a[order], numer[order]
        # B(T_i) = sum_{j: t_j <= T_i} d_j S1_j / S0_j^2, for both blocks at once
        B = np.empty((n, p2 + q))
        B[order] = kernels.ratio_accumulate(a_d, numer_d, ds.T_desc, ev.times, ev.counts,
                                            counter=counter)
        # own-event ratio S1/S0 at T_i and the plug-in cumulative hazard at T_i
        S0 = kernels.riskset_sums(a_d, ds.T_desc, ev.times, counter=counter)
        S1 = kernels.riskset_sums(numer_d, ds.T_desc, ev.times, counter=counter)
        knot_vals = np.concatenate([S1 / S0[:, None], base[k].cumulative[:, None]], axis=1)
        looked = np.empty((n, p2 + q + 1))
        looked[order] = kernels.step_lookup(ev.times, knot_vals, ds.T_desc, counter=counter)
        ratio, cum = looked[:, :-1], looked[:, -1]

        eE = e * live.Eexp[k]
        S[:, gk] = (is_k * (ds.W - ratio[:, :p2])
                    - eE[:, None] * (cum[:, None] * ds.W - B[:, :p2]))
        S[:, nk] = (is_k * (live.Eb - ratio[:, p2:])
                    - cum[:, None] * e[:, None] * live.Ebexp[k] + eE[:, None] * B[:, p2:])
    if counter is not None:
        counter.additions += n * layout.dim
    return ScoreMatrix(S, layout, names)


def covariance(scores) -> np.ndarray:
    """Inverse of the empirical Fisher information sum_i s_i s_i^T."""
    s = scores.scores if isinstance(scores, ScoreMatrix) else np.asarray(scores, dtype=float)
    s = s.reshape(len(s), -1)
    info = s.T @ s
    info = 0.5 * (info + info.T)
    eig = np.linalg.eigvalsh(info)
    if eig[0] <= 0 or eig[-1] / eig[0] > MAX_CONDITION:
        raise ModelError(f"empirical information ill-conditioned; eigenvalues {eig}")
    cov = np.linalg.inv(info)
    return 0.5 * (cov + cov.T)


def se_from_covariance(cov: np.ndarray) -> np.ndarray:
    diag = np.diag(cov)
    if np.any(diag < 0):
        raise ModelError("covariance has a negative diagonal entry")
    return np.sqrt(diag)


@dataclass
class StandardErrors:
    names: list
    estimates: np.ndarray
    se: np.ndarray
    cov: np.ndarray
    total_score: np.ndarray
    seconds: float

    def as_dict(self) -> dict:
        return {n: float(s) for n, s in zip(self.names, self.se)}


def standard_errors(fit: FitResult, dataset: Dataset, kernels: Kernels = SCAN_KERNELS) -> StandardErrors:
    t0 = time.perf_counter()
    sm = profiled_scores(dataset, fit, kernels)
    cov = covariance(sm)
    se = se_from_covariance(cov)
    seconds = time.perf_counter() - t0
    fit.timing["se"] = seconds
    return StandardErrors(sm.names, sm.layout.pack(fit.params), se, cov, sm.total, seconds)
