"""EM fitting of the joint model.

E-step: posterior moments of b_i by Gauss-Hermite quadrature, with the
baseline hazard at every T_i obtained from one step-lookup scan per cause.
M-step, in order: Breslow baseline jumps (risk-set scan), one damped Newton
step for each cause's (gamma_k, nu_k), closed-form beta and sigma2, then Sigma.
"""
from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .lmm import EBayesState, LmmFit, empirical_bayes_all, fit_lmm
from .model import (BaselineHazard, Dataset, ModelError, OmegaLayout, ParameterSet,
                    grouped_sum, spd_factor)
from .quadrature import (Moments, QuadMode, Quadrature, log_joint_at_nodes,
                         moments_from_weights, normalized_weights, posterior_modes)
from .scan import SCAN_KERNELS, Kernels

log = logging.getLogger(__name__)

CHUNK = 2048


def thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("FASTJM_THREADS", "")))
    except ValueError:
        return os.cpu_count() or 1


@dataclass
class EmConfig:
    quad_mode: str = QuadMode.PSEUDO_ADAPTIVE.value
    n_q: int | None = None
    tol: float = 1e-6
    max_iter: int = 20000
    convergence_metric: str = "relative_param_change"
    lmm_tol: float = 1e-6
    lmm_max_iter: int = 500
    threads: int | None = None
    record_trajectory: bool = False
    node_refresh: int = 20
    refresh_tol: float = 0.1

    def __post_init__(self):
        QuadMode(self.quad_mode)
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.convergence_metric not in ("relative_param_change", "loglik_change"):
            raise ValueError(f"unknown convergence_metric {self.convergence_metric!r}")
        if self.node_refresh < 0 or not self.refresh_tol > 0:
            raise ValueError("node_refresh must be >= 0 and refresh_tol positive")


@dataclass
class EStepResult:
    moments: Moments
    loglik: float
    weights: np.ndarray      # (n, G) normalized posterior weights
    nodes: np.ndarray        # (n, G, q) or shared (G, q)
    cum_hazard: np.ndarray   # (K, n)
    log_jump: np.ndarray     # (K, n)


@dataclass
class FitResult:
    params: ParameterSet
    loglik_trace: list
    iterations: int
    converged: bool
    moments: Moments
    estep: EStepResult
    quad: Quadrature
    lmm: LmmFit
    eb: EBayesState | None
    param_trace: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    stage_starts: list = field(default_factory=lambda: [0])


def hazard_at_T(ds: Dataset, params: ParameterSet, kernels: Kernels = SCAN_KERNELS):
    """Cumulative baseline and log jump at every T_i, shape (K, n) each.

    One lookup scan per cause over the cached descending order.  The log jump is
    only meaningful for subjects with D_i = k and is checked to sit on a knot.
    """
    K = params.n_causes
    cum = np.zeros((K, ds.n))
    log_jump = np.zeros((K, ds.n))
    order = ds.desc_order
    for k, bh in enumerate(params.baselines):
        vals = np.stack([bh.cumulative, bh.jumps, bh.knots], axis=1)
        looked = kernels.step_lookup(bh.knots, vals, ds.T_desc)
        cum[k, order] = looked[:, 0]
        ev = ds.D[order] == k + 1
        if np.any(ev):
            hit = looked[ev, 2] == ds.T_desc[ev]
            if not np.all(hit) or np.any(looked[ev, 1] <= 0):
                i = order[np.flatnonzero(ev)[np.flatnonzero(~hit | (looked[ev, 1] <= 0))[0]]]
                raise ModelError(f"event time missing from baseline support: subject {ds.ids[i]}, "
                                 f"cause {k + 1}, T={ds.T[i]}")
            with np.errstate(divide="ignore"):
                log_jump[k, order[ev]] = np.log(looked[ev, 1])
    return cum, log_jump


def e_step(ds: Dataset, params: ParameterSet, quad: Quadrature,
           kernels: Kernels = SCAN_KERNELS, threads: int | None = None) -> EStepResult:
    cum, log_jump = hazard_at_T(ds, params, kernels)
    nodes, logjac = quad.nodes(params.Sigma)
    logjac = np.broadcast_to(np.asarray(logjac, dtype=float), (ds.n,))
    adj = quad.grid.log_weight_adj

    def run(lo):
        hi = min(lo + CHUNK, ds.n)
        ll = log_joint_at_nodes(ds, params, nodes, adj, cum, log_jump, slice(lo, hi))
        wbar, logsum = normalized_weights(ll)
        b = nodes[lo:hi] if nodes.ndim == 3 else np.broadcast_to(nodes, (hi - lo,) + nodes.shape)
        return wbar, moments_from_weights(wbar, b, params.nu, logsum, logjac[lo:hi])

    starts = range(0, ds.n, CHUNK)
    threads = threads or thread_cap()
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(lo) for lo in starts]
    weights = np.concatenate([p[0] for p in parts])
    ms = [p[1] for p in parts]
    moments = Moments(
        np.concatenate([m.marginal_loglik for m in ms]),
        np.concatenate([m.Eb for m in ms]),
        np.concatenate([m.Ebb for m in ms]),
        np.concatenate([m.Eexp for m in ms], axis=1),
        np.concatenate([m.Ebexp for m in ms], axis=1),
        np.concatenate([m.Ebbexp for m in ms], axis=1),
    )
    # fixed-order reduction keeps the log-likelihood bitwise reproducible
    return EStepResult(moments, float(np.sum(moments.marginal_loglik)), weights, nodes, cum, log_jump)


def m_step_regression(ds: Dataset, moments: Moments):
    """Closed-form beta and sigma2 maximizing the expected Gaussian part."""
    zb = np.einsum("ja,ja->j", ds.Z, moments.Eb[ds.obs_subject])
    try:
        beta = np.linalg.solve(ds.XtX_pooled, ds.X.T @ (ds.y - zb))
    except np.linalg.LinAlgError:
        raise ModelError("singular normal equations for beta") from None
    r = ds.y - ds.X @ beta
    rr = np.bincount(ds.obs_subject, weights=r * r, minlength=ds.n)
    Zr = grouped_sum(ds.Z * r[:, None], ds.obs_subject, ds.n)
    ss = rr - 2 * np.einsum("ia,ia->i", moments.Eb, Zr) + np.einsum("iab,iab->i", ds.ZtZ, moments.Ebb)
    sigma2 = float(ss.sum()) / ds.n_total_obs
    if not sigma2 > 0:
        raise ModelError(f"sigma2 update not positive: {sigma2}")
    return beta, sigma2


def m_step_sigma(moments: Moments) -> np.ndarray:
    Sigma = moments.Ebb.mean(axis=0)
    Sigma = 0.5 * (Sigma + Sigma.T)
    spd_factor(Sigma, "Sigma update")
    return Sigma


def riskset_weights(ds: Dataset, moments: Moments, gamma_k, k: int) -> np.ndarray:
    """a_r = exp(W_r gamma_k) E{exp(nu_k b_r)} in original subject order."""
    return np.exp(ds.W @ gamma_k) * moments.Eexp[k]


def breslow(ds: Dataset, a: np.ndarray, k: int, kernels: Kernels = SCAN_KERNELS) -> BaselineHazard:
    """Breslow jumps d_kj / sum_{r in R(t_kj)} a_r for cause k (0-based)."""
    ev = ds.events[k]
    if ev.size == 0:
        return BaselineHazard(np.empty(0), np.empty(0))
    S = kernels.riskset_sums(a[ds.desc_order], ds.T_desc, ev.times)
    if not np.all(S > 0):
        j = int(np.flatnonzero(~(S > 0))[0])
        raise ModelError(f"empty weighted risk set at cause {k + 1} time {ev.times[j]}")
    return BaselineHazard(ev.times, ev.counts / S)


def m_step_baseline(ds: Dataset, moments: Moments, params: ParameterSet,
                    kernels: Kernels = SCAN_KERNELS) -> list:
    return [breslow(ds, riskset_weights(ds, moments, params.gamma[k], k), k, kernels)
            for k in range(params.n_causes)]


def survival_score_info(ds: Dataset, moments: Moments, gamma_k, k: int,
                        baseline: BaselineHazard, kernels: Kernels = SCAN_KERNELS):
    """Gradient and negative Hessian of Q in (gamma_k, nu_k) at the current point.

    The cumulative-hazard terms sum_i Lambda(T_i) c_i are rewritten as
    sum_j dLambda_j sum_{r in R(t_j)} c_r and obtained from one risk-set scan
    over a stacked payload.
    """
    p2, q = ds.p2, ds.q
    d = p2 + q
    ev = ds.D == k + 1
    event = np.concatenate([ds.W[ev].sum(axis=0), moments.Eb[ev].sum(axis=0)])
    if baseline.knots.size == 0:
        return event, np.zeros((d, d))
    e = np.exp(ds.W @ gamma_k)
    eE = e * moments.Eexp[k]
    W = ds.W
    Eb1 = e[:, None] * moments.Ebexp[k]
    payload = np.concatenate([
        eE[:, None] * W,
        Eb1,
        (eE[:, None, None] * W[:, :, None] * W[:, None, :]).reshape(ds.n, -1),
        (W[:, :, None] * Eb1[:, None, :]).reshape(ds.n, -1),
        (e[:, None, None] * moments.Ebbexp[k]).reshape(ds.n, -1),
    ], axis=1)
    S = kernels.riskset_sums(payload[ds.desc_order], ds.T_desc, baseline.knots)
    tot = baseline.jumps @ S
    score = event - tot[:d]
    o = d
    Igg = tot[o:o + p2 * p2].reshape(p2, p2); o += p2 * p2
    Ign = tot[o:o + p2 * q].reshape(p2, q); o += p2 * q
    Inn = tot[o:o + q * q].reshape(q, q)
    info = np.block([[Igg, Ign], [Ign.T, Inn]])
    return score, 0.5 * (info + info.T)


def survival_q(ds: Dataset, es: EStepResult, gamma_k, nu_k, k: int, cum_k: np.ndarray) -> float:
    """Terms of Q that involve (gamma_k, nu_k), for a given cumulative baseline at T."""
    ev = ds.D == k + 1
    lin = ds.W @ gamma_k
    nodes = es.nodes
    expo = np.exp(nodes @ nu_k)
    Eexp = np.sum(es.weights * expo, axis=1) if nodes.ndim == 3 else es.weights @ expo
    return float(np.sum(lin[ev]) + np.sum(es.moments.Eb[ev] @ nu_k)
                 - np.sum(cum_k * np.exp(lin) * Eexp))


def m_step_survival(ds: Dataset, es: EStepResult, params: ParameterSet, baselines: list,
                    kernels: Kernels = SCAN_KERNELS, max_halvings: int = 10):
    """One damped Newton step per cause on the stacked (gamma_k, nu_k)."""
    gamma = params.gamma.copy()
    nu = params.nu.copy()
    p2 = ds.p2
    cum = None
    for k in range(params.n_causes):
        if ds.events[k].size == 0:
            continue
        score, info = survival_score_info(ds, es.moments, gamma[k], k, baselines[k], kernels)
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise ModelError(f"singular information for cause {k + 1}; "
                             f"condition {np.linalg.cond(info):.3g}") from None
        if not np.all(np.isfinite(step)):
            raise ModelError(f"non-finite Newton step for cause {k + 1}")
        if cum is None:
            cum = hazard_at_T(ds, params.copy(baselines=baselines), kernels)[0]
        q0 = survival_q(ds, es, gamma[k], nu[k], k, cum[k])
        theta = np.concatenate([gamma[k], nu[k]])
        accepted = False
        for _ in range(max_halvings + 1):
            cand = theta + step
            if survival_q(ds, es, cand[:p2], cand[p2:], k, cum[k]) >= q0:
                accepted = True
                break
            step = 0.5 * step
        if accepted:
            gamma[k], nu[k] = cand[:p2], cand[p2:]
        else:
            log.debug("cause %d: Newton step rejected after %d halvings", k + 1, max_halvings)
    return gamma, nu


def m_step(ds: Dataset, es: EStepResult, params: ParameterSet,
           kernels: Kernels = SCAN_KERNELS) -> ParameterSet:
    baselines = m_step_baseline(ds, es.moments, params, kernels)
    gamma, nu = m_step_survival(ds, es, params, baselines, kernels)
    beta, sigma2 = m_step_regression(ds, es.moments)
    Sigma = m_step_sigma(es.moments)
    return ParameterSet(beta, sigma2, Sigma, gamma, nu, baselines)


def q_function(ds: Dataset, params: ParameterSet, es: EStepResult,
               kernels: Kernels = SCAN_KERNELS) -> float:
    """Expected complete-data log-likelihood under the E-step posterior weights."""
    cum, log_jump = hazard_at_T(ds, params, kernels)
    zero_adj = np.zeros(es.weights.shape[1])
    ll = log_joint_at_nodes(ds, params, es.nodes, zero_adj, cum, log_jump)
    return float(np.sum(es.weights * ll))


def null_baselines(ds: Dataset, kernels: Kernels = SCAN_KERNELS) -> list:
    """Nelson-Aalen cause-specific increments d_kj / |R(t_kj)|."""
    ones = np.ones(ds.n)
    return [breslow(ds, ones, k, kernels) for k in range(ds.n_causes)]


def initial_params(ds: Dataset, lmm: LmmFit, kernels: Kernels = SCAN_KERNELS) -> ParameterSet:
    K = ds.n_causes
    return ParameterSet(lmm.beta_hat.copy(), lmm.sigma2_hat, lmm.Sigma_hat.copy(),
                        np.zeros((K, ds.p2)), np.zeros((K, ds.q)), null_baselines(ds, kernels))


def build_quadrature(ds: Dataset, config: EmConfig, lmm: LmmFit):
    mode = QuadMode(config.quad_mode)
    eb = empirical_bayes_all(ds, lmm) if mode is QuadMode.PSEUDO_ADAPTIVE else None
    return Quadrature(mode, config.n_q, ds.q, eb), eb


def _relative_change(new: np.ndarray, old: np.ndarray) -> float:
    return float(np.max(np.abs(new - old) / (np.abs(old) + 1e-3)))


def refreshed_quadrature(ds: Dataset, params: ParameterSet, quad: Quadrature,
                         moments: Moments, kernels: Kernels = SCAN_KERNELS):
    """Nodes re-placed at each subject's posterior mode under ``params``.

    Returns the new quadrature and the largest center displacement measured
    in posterior standard deviations.
    """
    cum, _ = hazard_at_T(ds, params, kernels)
    centers, scales = posterior_modes(ds, params, cum, moments.Eb)
    return quad.recentered(centers, scales), quad.center_shift(centers, scales)


def em_fit(dataset: Dataset, config: EmConfig | None = None,
           kernels: Kernels = SCAN_KERNELS, lmm: LmmFit | None = None) -> FitResult:
    """Fit the joint model; returns estimates, log-likelihood trace and moments at the estimate.

    Pseudo-adaptive nodes start at the linear-mixed-model empirical Bayes
    centers and stay fixed while EM runs.  When a run converges, the nodes are
    moved to the current joint posterior modes and EM continues; this repeats
    (at most ``node_refresh`` times) until the modes move less than
    ``refresh_tol`` posterior standard deviations.  Each fixed-node run is a
    stage; ``stage_starts`` indexes the trace where each one begins.
    """
    ds = dataset
    config = config or EmConfig()
    layout = OmegaLayout.for_dataset(ds)
    timing = {"init": 0.0, "e_step": 0.0, "m_step": 0.0}

    t0 = time.perf_counter()
    if lmm is None:
        lmm = fit_lmm(ds, config.lmm_tol, config.lmm_max_iter)
    quad, eb = build_quadrature(ds, config, lmm)
    params = initial_params(ds, lmm, kernels)
    timing["init"] = time.perf_counter() - t0

    adaptive = quad.mode is QuadMode.PSEUDO_ADAPTIVE
    trace = []
    stage_starts = [0]
    refreshes = 0
    param_trace = [layout.pack(params)] if config.record_trajectory else []
    converged = False
    it = 0
    while it < config.max_iter:
        it += 1
        t0 = time.perf_counter()
        es = e_step(ds, params, quad, kernels, config.threads)
        t1 = time.perf_counter()
        trace.append(es.loglik)
        new = m_step(ds, es, params, kernels)
        timing["e_step"] += t1 - t0
        timing["m_step"] += time.perf_counter() - t1
        if config.convergence_metric == "relative_param_change":
            metric = _relative_change(layout.pack(new), layout.pack(params))
        else:
            in_stage = len(trace) - stage_starts[-1]
            metric = abs(trace[-1] - trace[-2]) if in_stage > 1 else math.inf
        params = new
        if config.record_trajectory:
            param_trace.append(layout.pack(params))
        if metric >= config.tol:
            continue
        if not adaptive or refreshes >= config.node_refresh:
            converged = True
            break
        t0 = time.perf_counter()
        es = e_step(ds, params, quad, kernels, config.threads)
        cand, shift = refreshed_quadrature(ds, params, quad, es.moments, kernels)
        timing["e_step"] += time.perf_counter() - t0
        log.debug("stage %d converged at iteration %d; node shift %.3g", len(stage_starts), it, shift)
        if shift < config.refresh_tol:
            converged = True
            break
        quad = cand
        refreshes += 1
        stage_starts.append(len(trace))
    if not converged:
        log.warning("EM reached max_iter=%d without convergence", config.max_iter)

    t0 = time.perf_counter()
    es = e_step(ds, params, quad, kernels, config.threads)
    timing["e_step"] += time.perf_counter() - t0
    trace.append(es.loglik)
    return FitResult(params, trace, it, converged, es.moments, es, quad, lmm, eb,
                     param_trace, timing, stage_starts)
