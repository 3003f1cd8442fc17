"""Independent reference implementations used by the tests.

Everything here is written the slow, obvious way: explicit filtering of risk
sets, per-subject loops, direct n_i x n_i matrix algebra.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import logsumexp


def rel_err(a, b, floor=1e-300):
    """Largest elementwise |a - b| / |b|."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise AssertionError(f"shape mismatch {a.shape} vs {b.shape}")
    if not a.size:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


def naive_riskset_sum(a, T, t):
    return np.asarray(a)[np.asarray(T) >= t].sum(axis=0)


def naive_step_value(knots, values, t):
    """Value of the right-continuous step function at t, zero below the smallest knot."""
    best = None
    for j, kt in enumerate(knots):
        if kt <= t and (best is None or kt > knots[best]):
            best = j
    return np.zeros_like(np.asarray(values[0])) if best is None else values[best]


def per_subject_log_integrand(ds, i, params, nodes, cum_i, log_jump_i):
    """log f(y_i | b) + log f(T_i, D_i | b) + log N(b; 0, Sigma) at each node row."""
    lo, hi = ds.obs_ptr[i], ds.obs_ptr[i + 1]
    X, Z, y = ds.X[lo:hi], ds.Z[lo:hi], ds.y[lo:hi]
    resid = y[None, :] - (X @ params.beta)[None, :] - nodes @ Z.T     # (G, n_i)
    s2 = params.sigma2
    out = -0.5 * (hi - lo) * math.log(2 * math.pi * s2) - np.sum(resid ** 2, axis=1) / (2 * s2)
    Sinv = np.linalg.inv(params.Sigma)
    _, logdet = np.linalg.slogdet(params.Sigma)
    q = nodes.shape[1]
    out += -0.5 * q * math.log(2 * math.pi) - 0.5 * logdet - 0.5 * np.einsum("ga,ab,gb->g", nodes, Sinv, nodes)
    for k in range(params.n_causes):
        eta = ds.W[i] @ params.gamma[k] + nodes @ params.nu[k]
        out -= cum_i[k] * np.exp(eta)
        if ds.D[i] == k + 1:
            out += log_jump_i[k] + eta
    return out


def profiled_loglik_per_subject(ds, fit, omega):
    """Per-subject profiled log-likelihood at ``omega`` with nodes and posterior
    weights frozen at the fit's final E-step; the baseline is the Breslow
    estimate recomputed at ``omega`` by filtering every risk set."""
    from jointscan.model import OmegaLayout

    layout = OmegaLayout.for_dataset(ds)
    params = layout.unpack(omega, fit.params.baselines)
    es = fit.estep
    nodes = es.nodes if es.nodes.ndim == 3 else np.broadcast_to(es.nodes, (ds.n,) + es.nodes.shape)
    _, logjac = fit.quad.nodes(fit.params.Sigma)
    logjac = np.broadcast_to(np.asarray(logjac, float), (ds.n,))
    adj = fit.quad.grid.log_weight_adj
    K = ds.n_causes
    cum = np.zeros((ds.n, K))
    log_jump = np.zeros((ds.n, K))
    for k in range(K):
        Eexp = np.array([np.sum(es.weights[r] * np.exp(nodes[r] @ params.nu[k])) for r in range(ds.n)])
        a = np.exp(ds.W @ params.gamma[k]) * Eexp
        times = sorted({float(t) for t, d in zip(ds.T, ds.D) if d == k + 1})
        jumps = {}
        for t in times:
            d = sum(1 for tt, dd in zip(ds.T, ds.D) if dd == k + 1 and tt == t)
            jumps[t] = d / naive_riskset_sum(a, ds.T, t)
        for i in range(ds.n):
            cum[i, k] = sum(v for t, v in jumps.items() if t <= ds.T[i])
            if ds.D[i] == k + 1:
                log_jump[i, k] = math.log(jumps[float(ds.T[i])])
    out = np.empty(ds.n)
    for i in range(ds.n):
        ll = per_subject_log_integrand(ds, i, params, nodes[i], cum[i], log_jump[i])
        out[i] = logsumexp(ll + adj) + logjac[i]
    return out


def fd_scores(ds, fit, omega, h=1e-5):
    """Central differences of the per-subject profiled log-likelihood."""
    S = np.zeros((ds.n, len(omega)))
    for a in range(len(omega)):
        step = h * max(1.0, abs(omega[a]))
        up, dn = omega.copy(), omega.copy()
        up[a] += step
        dn[a] -= step
        S[:, a] = (profiled_loglik_per_subject(ds, fit, up)
                   - profiled_loglik_per_subject(ds, fit, dn)) / (2 * step)
    return S


def naive_eb(ds, fit):
    """Empirical Bayes centers and covariances from explicit V_i inverses,
    with A = sum_i X_i' V_i^{-1} X_i recomputed for every subject."""
    beta, s2, Sigma = fit.beta_hat, fit.sigma2_hat, np.atleast_2d(fit.Sigma_hat)
    blocks = []
    for i in range(ds.n):
        lo, hi = ds.obs_ptr[i], ds.obs_ptr[i + 1]
        X, Z, y = ds.X[lo:hi], ds.Z[lo:hi], ds.y[lo:hi]
        V = Z @ Sigma @ Z.T + s2 * np.eye(hi - lo)
        blocks.append((X, Z, y, np.linalg.inv(V) if hi > lo else np.zeros((0, 0))))
    centers, covs = [], []
    for i in range(ds.n):
        A = sum(X.T @ Vi @ X for X, _, _, Vi in blocks)
        X, Z, y, Vi = blocks[i]
        if len(y) == 0:
            centers.append(np.zeros(ds.q))
            covs.append(Sigma.copy())
            continue
        # Sigma - Sigma Z'V^{-1} Z Sigma computed as an explicit inverse, then the
        # fixed-effect correction Sigma Z'V^{-1} X A^{-1} X'V^{-1} Z Sigma
        C = np.linalg.inv(np.linalg.inv(Sigma) + Z.T @ Z / s2)
        G = Sigma @ Z.T @ Vi @ X
        centers.append(Sigma @ Z.T @ Vi @ (y - X @ beta))
        covs.append(C + G @ np.linalg.inv(A) @ G.T)
    return np.array(centers), np.array(covs)


def random_scan_instance(rng, kind="mixed", n_max=1000, width=None):
    """Descending observed times with ties, event knots and payloads.

    ``kind`` is "mixed", "all_censored" or "all_event".  Times are drawn from a
    coarse grid half of the time so that ties between subjects (and between
    subjects and knots) are common.
    """
    n = int(rng.integers(1, n_max + 1))
    if rng.random() < 0.5:
        T = rng.integers(0, max(2, n // 4), size=n).astype(float) * 0.5
    else:
        T = rng.exponential(3.0, size=n)
    if kind == "all_censored":
        D = np.zeros(n, dtype=int)
    elif kind == "all_event":
        D = np.ones(n, dtype=int)
    else:
        D = (rng.random(n) < 0.6).astype(int)
    order = np.lexsort((np.arange(n), -T))
    T, D = T[order], D[order]
    knots, counts = np.unique(T[D == 1], return_counts=True)
    knots, counts = knots[::-1].copy(), counts[::-1].copy()
    shape = (n,) if width is None else (n,) + tuple(width)
    a = rng.exponential(1.0, size=shape)
    return T, D, knots, counts, a


def naive_lookup(knots, values, queries):
    values = np.asarray(values, dtype=float)
    if len(knots) == 0:
        return np.zeros((len(queries),) + values.shape[1:])
    return np.array([naive_step_value(list(knots), values, t) for t in queries]).reshape(
        (len(queries),) + np.asarray(values).shape[1:])


def naive_suffix(a, T, knots):
    a = np.asarray(a, dtype=float)
    return np.array([naive_riskset_sum(a, T, t) for t in knots]).reshape((len(knots),) + a.shape[1:])


def naive_prefix(b, T, knots):
    b = np.asarray(b, dtype=float)
    out = np.zeros((len(T),) + b.shape[1:])
    for i, t in enumerate(T):
        for j, kt in enumerate(knots):
            if kt <= t:
                out[i] += b[j]
    return out


def fd_derivative(f, x, h=1e-4):
    """Five-point central difference of a scalar function at scalar x."""
    return (f(x - 2 * h) - 8 * f(x - h) + 8 * f(x + h) - f(x + 2 * h)) / (12 * h)


def fd_gradient(f, x, h=1e-4):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for a in range(len(x)):
        def fa(t, a=a):
            y = x.copy()
            y[a] = t
            return f(y)
        g[a] = fd_derivative(fa, x[a], h)
    return g
