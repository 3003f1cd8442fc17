"""Stand-alone linear mixed model fit and empirical Bayes random effects.

The fit is an EM on the exact Gaussian posterior of b_i.  Each subject only
needs its q x q cross products, so one iteration is O(n q^3) with

    V_i^{-1} = I/s2 - Z_i C_i Z_i^T / s2^2,    C_i = (Sigma^{-1} + Z_i^T Z_i / s2)^{-1}.

``empirical_bayes_all`` accumulates A = sum_i X_i^T V_i^{-1} X_i once and then
assembles every subject's covariance from the cached A.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .model import LOG_2PI, Dataset, ModelError, grouped_sum

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LmmFit:
    beta_hat: np.ndarray
    sigma2_hat: float
    Sigma_hat: np.ndarray
    loglik: float
    iterations: int
    loglik_trace: tuple = ()
    converged: bool = True


@dataclass(frozen=True)
class EBayesState:
    """Per-subject centers ``b_tilde`` (n, q) and covariances ``H_inv`` (n, q, q)
    with lower factors ``H_inv_sqrt``; ``fixed_info`` is the cached p x p sum A."""

    b_tilde: np.ndarray
    H_inv: np.ndarray
    H_inv_sqrt: np.ndarray
    fixed_info: np.ndarray


def check_full_rank(X: np.ndarray, names=None) -> None:
    """Raise naming the columns that are linear combinations of earlier ones."""
    names = names or [f"x{j}" for j in range(X.shape[1])]
    if X.shape[0] == 0:
        raise ModelError("no longitudinal observations")
    collinear = []
    keep = []
    scale = np.linalg.norm(X, axis=0)
    for j in range(X.shape[1]):
        cols = keep + [j]
        sub = X[:, cols] / np.where(scale[cols] > 0, scale[cols], 1.0)
        if np.linalg.matrix_rank(sub, tol=1e-10 * max(1, X.shape[0]) ** 0.5) < len(cols):
            collinear.append(names[j])
        else:
            keep.append(j)
    if collinear:
        raise ModelError(f"fixed-effect design is rank deficient; collinear columns: {collinear}")


def _posterior_blocks(ds: Dataset, beta, sigma2, Sigma, idx):
    """C_i, Z'r_i, r'r_i for subjects ``idx`` (all must have observations)."""
    r = ds.y - ds.X @ beta
    Zr = grouped_sum(ds.Z * r[:, None], ds.obs_subject, ds.n)[idx]
    rr = np.bincount(ds.obs_subject, weights=r * r, minlength=ds.n)[idx]
    Sinv = np.linalg.inv(Sigma)
    C = np.linalg.inv(Sinv[None] + ds.ZtZ[idx] / sigma2)
    return C, Zr, rr


def _marginal_loglik(ds, sigma2, Sigma, C, Zr, rr, nobs) -> float:
    # log|V| = n_i log s2 + log|Sigma| - log|C|; r'V^{-1}r by Woodbury
    _, logdetS = np.linalg.slogdet(Sigma)
    _, logdetC = np.linalg.slogdet(C)
    quad = rr / sigma2 - np.einsum("ia,iab,ib->i", Zr, C, Zr) / sigma2 ** 2
    logdetV = nobs * math.log(sigma2) + logdetS - logdetC
    return float(-0.5 * np.sum(nobs * LOG_2PI + logdetV + quad))


def lmm_loglik(ds: Dataset, beta, sigma2, Sigma) -> float:
    """Marginal log-likelihood of the linear mixed model (survival ignored)."""
    idx = np.flatnonzero(ds.n_obs > 0)
    C, Zr, rr = _posterior_blocks(ds, np.asarray(beta, float), float(sigma2),
                                  np.atleast_2d(Sigma), idx)
    return _marginal_loglik(ds, float(sigma2), np.atleast_2d(Sigma), C, Zr, rr, ds.n_obs[idx])


def fit_lmm(dataset: Dataset, tol: float = 1e-6, max_iter: int = 500) -> LmmFit:
    """ML fit of the linear mixed model by EM; stops on max relative change < tol."""
    ds = dataset
    check_full_rank(ds.X, ds.fixed_names)
    idx = np.flatnonzero(ds.n_obs > 0)
    nobs = ds.n_obs[idx]
    N = int(nobs.sum())
    m = len(idx)
    XtX_inv = np.linalg.inv(ds.XtX_pooled)

    beta = XtX_inv @ (ds.X.T @ ds.y)
    resid = ds.y - ds.X @ beta
    s2 = float(resid @ resid) / max(N - ds.p, 1)
    sigma2 = 0.5 * s2
    Sigma = np.eye(ds.q) * 0.5 * s2 / np.maximum(1.0, np.mean(ds.Z ** 2, axis=0))

    trace = []
    converged = False
    it = 0
    ZtZ = ds.ZtZ[idx]
    for it in range(1, max_iter + 1):
        C, Zr, rr = _posterior_blocks(ds, beta, sigma2, Sigma, idx)
        trace.append(_marginal_loglik(ds, sigma2, Sigma, C, Zr, rr, nobs))
        mu = np.einsum("iab,ib->ia", C, Zr) / sigma2
        Ebb = C + np.einsum("ia,ib->iab", mu, mu)

        mu_full = np.zeros((ds.n, ds.q))
        mu_full[idx] = mu
        zb = np.einsum("ja,ja->j", ds.Z, mu_full[ds.obs_subject])
        beta_new = XtX_inv @ (ds.X.T @ (ds.y - zb))
        r = ds.y - ds.X @ beta_new
        Zr_new = grouped_sum(ds.Z * r[:, None], ds.obs_subject, ds.n)[idx]
        rr_new = np.bincount(ds.obs_subject, weights=r * r, minlength=ds.n)[idx]
        ss = rr_new - 2 * np.einsum("ia,ia->i", mu, Zr_new) + np.einsum("iab,iab->i", ZtZ, Ebb)
        sigma2_new = float(ss.sum()) / N
        Sigma_new = Ebb.sum(axis=0) / m
        Sigma_new = 0.5 * (Sigma_new + Sigma_new.T)

        old = np.concatenate([beta, [sigma2], Sigma.ravel()])
        new = np.concatenate([beta_new, [sigma2_new], Sigma_new.ravel()])
        beta, sigma2, Sigma = beta_new, sigma2_new, Sigma_new
        change = np.max(np.abs(new - old) / (np.abs(old) + 1e-3))
        if change < tol:
            converged = True
            break
    if not converged:
        log.warning("LMM EM stopped at max_iter=%d without reaching tol=%g", max_iter, tol)
    ll = lmm_loglik(ds, beta, sigma2, Sigma)
    return LmmFit(beta, sigma2, Sigma, ll, it, tuple(trace + [ll]), converged)


def empirical_bayes_all(dataset: Dataset, fit: LmmFit) -> EBayesState:
    """Empirical Bayes centers and covariances for every subject.

    Two passes: accumulate A = sum_i X_i^T V_i^{-1} X_i, then assemble
    ``b_tilde_i = Sigma Z_i^T V_i^{-1} r_i`` and

        H_inv_i = Sigma - Sigma Z_i^T P_i Z_i Sigma,
        P_i = V_i^{-1} - V_i^{-1} X_i A^{-1} X_i^T V_i^{-1},

    for each subject from the cached A; the code evaluates both in the
    equivalent Woodbury form with C_i = (Sigma^{-1} + Z_i'Z_i / s2)^{-1}.  Subjects without observations get the
    prior: ``b_tilde = 0`` and ``H_inv = Sigma``.
    """
    ds = dataset
    beta, s2, Sigma = fit.beta_hat, float(fit.sigma2_hat), np.atleast_2d(fit.Sigma_hat)
    q = ds.q
    idx = np.flatnonzero(ds.n_obs > 0)
    C, Zr, rr = _posterior_blocks(ds, beta, s2, Sigma, idx)
    ZtZ = ds.ZtZ[idx]
    XtZ = ds.XtZ[idx]
    XtX_i = _grouped_xtx(ds)[idx]

    # Woodbury blocks: U'V^{-1}W = U'W/s2 - (U'Z) C (Z'W) / s2^2
    XVX = XtX_i / s2 - XtZ @ C @ np.swapaxes(XtZ, 1, 2) / s2 ** 2

    # pass 1: the cached sum, reduced in subject order
    A = XVX.sum(axis=0)
    A = 0.5 * (A + A.T)
    A_inv = np.linalg.inv(A)

    # pass 2: per-subject assembly.  With G_i = Sigma Z_i' V_i^{-1} X_i = C_i Z_i'X_i / s2,
    # H_inv_i = C_i + G_i A^{-1} G_i', a sum of PSD terms (no cancellation)
    b_tilde = np.zeros((ds.n, q))
    b_tilde[idx] = np.einsum("iab,ib->ia", C, Zr) / s2
    G = C @ np.swapaxes(XtZ, 1, 2) / s2
    H = C + G @ A_inv @ np.swapaxes(G, 1, 2)
    H = 0.5 * (H + np.swapaxes(H, 1, 2))
    H_inv = np.broadcast_to(Sigma, (ds.n, q, q)).copy()
    H_inv[idx] = H
    try:
        R = np.linalg.cholesky(H_inv)
    except np.linalg.LinAlgError:
        bad = _first_non_spd(H_inv)
        raise ModelError(f"empirical Bayes covariance not positive definite for subject {ds.ids[bad]}") from None
    return EBayesState(b_tilde, H_inv, R, A)


def _grouped_xtx(ds: Dataset) -> np.ndarray:
    out = np.zeros((ds.n, ds.p, ds.p))
    for a in range(ds.p):
        for b in range(a, ds.p):
            out[:, a, b] = np.bincount(ds.obs_subject, weights=ds.X[:, a] * ds.X[:, b], minlength=ds.n)
            out[:, b, a] = out[:, a, b]
    return out


def _first_non_spd(H: np.ndarray) -> int:
    for i, h in enumerate(H):
        try:
            np.linalg.cholesky(h)
        except np.linalg.LinAlgError:
            return i
    return 0
