"""Synthetic joint-model data with two competing causes and constant baselines.

Longitudinal response: Y_ij = b0 + b1 t + b2 X2 + b_0i + b_1i t + eps at visits
t = 0, 1, 2, ...; causes have hazards lambda_0k exp(g_k1 X1 + g_k2 X2 + nu_k' b).
Each subject draws from its own child stream keyed by (seed, i), so a subject's
data does not depend on n.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Dataset


def _arr(*v):
    return field(default_factory=lambda: np.array(v, dtype=float))


@dataclass
class SimConfig:
    n: int = 500
    beta: np.ndarray = _arr(5.0, 1.0, 2.0)
    sigma2: float = 0.5
    Sigma: np.ndarray = field(default_factory=lambda: np.array([[0.5, 0.0], [0.0, 0.25]]))
    gamma: np.ndarray = field(default_factory=lambda: np.array([[0.5, 0.5], [-0.5, 0.5]]))
    nu: np.ndarray = field(default_factory=lambda: np.array([[1.0, 1.0], [-1.0, 0.5]]))
    baseline_hazards: np.ndarray = _arr(0.05, 0.1)
    censor_mean: float = 20.0
    max_visits: int = 30
    x1_mean: float = 2.0
    x1_sd: float = 1.0
    x2_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("beta", "Sigma", "gamma", "nu", "baseline_hazards"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.Sigma = np.atleast_2d(self.Sigma)
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if np.any(self.baseline_hazards <= 0):
            raise ValueError("baseline hazards must be positive")
        if not self.censor_mean > 0:
            raise ValueError("censor_mean must be positive")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be nonnegative")
        if self.max_visits < 1:
            raise ValueError("max_visits must be >= 1")

    @property
    def n_causes(self) -> int:
        return len(self.baseline_hazards)


def _cov_root(S: np.ndarray) -> np.ndarray:
    # symmetric root tolerates a singular (e.g. all-zero) covariance
    vals, vecs = np.linalg.eigh(S)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def subject_draws(seed: int, i: int, max_visits: int):
    """Uniform and normal blocks for subject ``i`` from its own child stream."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
    return rng.random(4), rng.standard_normal(3 + max_visits)


def simulate_arrays(config: SimConfig) -> dict:
    """Simulated subject- and observation-level arrays (see :func:`simulate_dataset`)."""
    c = config
    n, V = c.n, c.max_visits
    U = np.empty((n, 4))
    G = np.empty((n, 3 + V))
    for i in range(n):
        U[i], G[i] = subject_draws(c.seed, i, V)

    x1 = c.x1_mean + c.x1_sd * G[:, 0]
    x2 = (U[:, 0] < c.x2_prob).astype(float)
    b = G[:, 1:3] @ _cov_root(c.Sigma).T
    Wcov = np.column_stack([x1, x2])
    rates = c.baseline_hazards * np.exp(Wcov @ c.gamma.T + b @ c.nu.T)   # (n, K)
    total = rates.sum(axis=1)
    t_event = -np.log1p(-U[:, 1]) / total
    # with constant hazards, the cause is independent of the all-cause time
    cum_prob = np.cumsum(rates / total[:, None], axis=1)
    u_cause = U[:, 2]
    cause = 1 + np.sum(u_cause[:, None] >= cum_prob[:, :-1], axis=1) if c.n_causes > 1 \
        else np.ones(n, dtype=np.int64)
    t_cens = -c.censor_mean * np.log1p(-U[:, 3])
    T = np.minimum(t_event, t_cens)
    D = np.where(t_event <= t_cens, cause, 0).astype(np.int64)

    visits = np.arange(V, dtype=float)
    keep = visits[None, :] <= T[:, None]
    sub, vis = np.nonzero(keep)
    t = visits[vis]
    eps = np.sqrt(c.sigma2) * G[sub, 3 + vis]
    y = (c.beta[0] + c.beta[1] * t + c.beta[2] * x2[sub]
         + b[sub, 0] + b[sub, 1] * t + eps)
    return dict(sub=sub, t=t, y=y, x1=x1, x2=x2, T=T, D=D, b=b)


def simulate_dataset(config: SimConfig) -> Dataset:
    a = simulate_arrays(config)
    sub, t = a["sub"], a["t"]
    X = np.column_stack([np.ones_like(t), t, a["x2"][sub]])
    Z = np.column_stack([np.ones_like(t), t])
    W = np.column_stack([a["x1"], a["x2"]])
    ids = [f"{i + 1}" for i in range(config.n)]
    return Dataset(ids, sub, t, a["y"], X, Z, W, a["T"], a["D"], config.n_causes,
                   fixed_names=["(intercept)", "time", "x2"],
                   random_names=["(intercept)", "time"], surv_names=["x1", "x2"])
