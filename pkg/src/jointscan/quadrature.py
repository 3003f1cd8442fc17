"""Gauss-Hermite quadrature for the posterior expectations of the random effects.

A grid row ``c_t`` with product weight ``pi_t`` is mapped to an evaluation
point ``b_t = center + sqrt(2) L c_t``.  Posterior weights are

    exp(l_t) / sum_s exp(l_s),
    l_t = log f(Y, C | b_t) + log N(b_t; 0, Sigma) + log pi_t + |c_t|^2,

formed by log-sum-exp.  The Jacobian ``det(sqrt(2) L)`` cancels in every
ratio and is added back only to the per-subject marginal log-likelihood.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.polynomial.hermite import hermgauss

from .model import LOG_2PI, Dataset, ModelError, ParameterSet, Subject, spd_factor

MAX_GRID_ROWS = 10 ** 6


class QuadMode(str, Enum):
    STANDARD = "standard"
    PSEUDO_ADAPTIVE = "pseudo_adaptive"


DEFAULT_ORDER = {QuadMode.STANDARD: 20, QuadMode.PSEUDO_ADAPTIVE: 6}


@dataclass(frozen=True)
class GhRule1d:
    order: int
    nodes: np.ndarray
    weights: np.ndarray


def gh_rule(order: int) -> GhRule1d:
    """Gauss-Hermite rule for the weight ``exp(-x^2)``, nodes ascending."""
    if not isinstance(order, (int, np.integer)) or not 1 <= order <= 64:
        raise ValueError(f"Gauss-Hermite order must be in 1..64, got {order}")
    x, w = hermgauss(int(order))
    # nodes come in +/- pairs with equal weight; enforce it exactly
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    return GhRule1d(int(order), x, w)


@dataclass(frozen=True)
class QuadratureGrid:
    """Tensor-product grid: ``points`` (n_q^q, q) and ``log_weight_adj`` =
    sum of log weights + |c_t|^2."""

    dim: int
    order: int
    points: np.ndarray
    log_weight_adj: np.ndarray

    @property
    def size(self) -> int:
        return len(self.points)


def tensor_grid(rule: GhRule1d, dim: int) -> QuadratureGrid:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if rule.order ** dim > MAX_GRID_ROWS:
        raise ValueError(
            f"grid of {rule.order}^{dim} rows exceeds {MAX_GRID_ROWS}; "
            "use pseudo-adaptive quadrature with fewer points")
    idx = np.array(list(itertools.product(range(rule.order), repeat=dim)), dtype=np.int64)
    points = rule.nodes[idx]
    logw = np.log(rule.weights)[idx].sum(axis=1)
    return QuadratureGrid(dim, rule.order, points, logw + np.sum(points ** 2, axis=1))


@dataclass(frozen=True)
class SubjectMoments:
    marginal_loglik: float
    Eb: np.ndarray
    Ebb: np.ndarray
    Eexp: np.ndarray
    Ebexp: np.ndarray
    Ebbexp: np.ndarray


@dataclass
class Moments:
    """Posterior moments for all subjects; cause axis first for the exp terms."""

    marginal_loglik: np.ndarray  # (n,)
    Eb: np.ndarray               # (n, q)
    Ebb: np.ndarray              # (n, q, q)
    Eexp: np.ndarray             # (K, n)
    Ebexp: np.ndarray            # (K, n, q)
    Ebbexp: np.ndarray           # (K, n, q, q)

    def __getitem__(self, i: int) -> SubjectMoments:
        return SubjectMoments(float(self.marginal_loglik[i]), self.Eb[i], self.Ebb[i],
                              self.Eexp[:, i], self.Ebexp[:, i], self.Ebbexp[:, i])

    def __len__(self) -> int:
        return len(self.marginal_loglik)


def subject_nodes(mode, grid: QuadratureGrid, Sigma_current=None, eb=None):
    """Evaluation points and log-Jacobians.

    Standard mode returns rows ``sqrt(2) L c_t`` with ``L L^T = Sigma_current``,
    shape (G, q), and a scalar log-Jacobian.  Pseudo-adaptive mode takes
    ``eb = (b_tilde, H_inv_sqrt)`` with shapes (n, q) and (n, q, q) (or a single
    subject's (q,) and (q, q)) and returns rows ``b_tilde + sqrt(2) H^{-1/2} c_t``.
    """
    mode = QuadMode(mode)
    q = grid.dim
    half_log2 = 0.5 * q * math.log(2.0)
    if mode is QuadMode.STANDARD:
        if Sigma_current is None:
            raise ValueError("standard mode needs Sigma_current")
        L = spd_factor(np.atleast_2d(Sigma_current))
        nodes = math.sqrt(2.0) * grid.points @ L.T
        return nodes, half_log2 + float(np.sum(np.log(np.diag(L))))
    if eb is None:
        raise ValueError("pseudo-adaptive mode needs empirical Bayes centers and scales")
    center, R = (np.asarray(a, dtype=float) for a in eb)
    nodes = center[..., None, :] + math.sqrt(2.0) * np.einsum("...ab,gb->...ga", R, grid.points)
    logdet = np.sum(np.log(np.abs(np.diagonal(R, axis1=-2, axis2=-1))), axis=-1)
    return nodes, half_log2 + logdet


class Quadrature:
    """Quadrature set-up for an E-step: grid, mode, and (for the pseudo-adaptive
    rule) per-subject nodes that stay fixed across EM iterations."""

    def __init__(self, mode, order: int | None, dim: int, eb=None):
        self.mode = QuadMode(mode)
        self.order = DEFAULT_ORDER[self.mode] if order is None else int(order)
        self.grid = tensor_grid(gh_rule(self.order), dim)
        self._fixed = None
        self.centers = self.scales = None
        if self.mode is QuadMode.PSEUDO_ADAPTIVE:
            if eb is None:
                raise ValueError("pseudo-adaptive quadrature needs an EBayesState")
            self._place(eb.b_tilde, eb.H_inv_sqrt)

    def _place(self, centers, scales) -> None:
        self.centers, self.scales = np.asarray(centers, float), np.asarray(scales, float)
        self._fixed = subject_nodes(self.mode, self.grid, eb=(self.centers, self.scales))

    def recentered(self, centers, scales) -> "Quadrature":
        """Same grid with nodes at new per-subject centers and lower scale factors."""
        if self.mode is not QuadMode.PSEUDO_ADAPTIVE:
            raise ValueError("only pseudo-adaptive nodes can be recentered")
        out = object.__new__(Quadrature)
        out.mode, out.order, out.grid = self.mode, self.order, self.grid
        out._place(centers, scales)
        return out

    def center_shift(self, centers, scales) -> float:
        """Largest displacement between the current and the given centers, in
        units of the given scales (a Mahalanobis distance per subject)."""
        if self.centers is None:
            return math.inf
        d = np.asarray(centers) - self.centers
        z = np.linalg.solve(np.asarray(scales), d[..., None])[..., 0]
        return float(np.sqrt(np.max(np.sum(z * z, axis=-1))))

    def nodes(self, Sigma):
        """(nodes, logjac); nodes are (n, G, q) or shared (G, q)."""
        if self._fixed is not None:
            return self._fixed
        return subject_nodes(self.mode, self.grid, Sigma_current=Sigma)


def log_joint_at_nodes(ds: Dataset, params: ParameterSet, nodes: np.ndarray,
                       log_weight_adj: np.ndarray, cum_hazard: np.ndarray,
                       log_jump: np.ndarray, sl: slice | None = None) -> np.ndarray:
    """Log integrand ``l_t`` for subjects in ``sl`` at every grid row.

    ``cum_hazard`` and ``log_jump`` are (K, n): the cumulative baseline at T_i
    and the log jump at T_i (used only where D_i = k).  ``nodes`` is (n, G, q)
    or shared (G, q).
    """
    sl = slice(0, ds.n) if sl is None else sl
    lo, hi = sl.start, sl.stop
    m = hi - lo
    q = ds.q
    b = nodes[lo:hi] if nodes.ndim == 3 else np.broadcast_to(nodes, (m,) + nodes.shape)

    # longitudinal part via per-subject sufficient statistics:
    # sum_j (r_j - z_j b)^2 = r'r - 2 b'Z'r + b'Z'Z b with r = y - X beta
    olo, ohi = ds.obs_ptr[lo], ds.obs_ptr[hi]
    r = ds.y[olo:ohi] - ds.X[olo:ohi] @ params.beta
    grp = ds.obs_subject[olo:ohi] - lo
    rr = np.bincount(grp, weights=r * r, minlength=m)
    Zr = np.stack([np.bincount(grp, weights=ds.Z[olo:ohi, a] * r, minlength=m)
                   for a in range(q)], axis=1)
    ZtZ = ds.ZtZ[lo:hi]
    sq = (rr[:, None] - 2.0 * np.matmul(b, Zr[:, :, None])[..., 0]
          + np.sum(np.matmul(b, ZtZ) * b, axis=2))
    nobs = ds.n_obs[lo:hi]
    ll = -0.5 * nobs[:, None] * math.log(2 * math.pi * params.sigma2) - sq / (2 * params.sigma2)

    # random-effect prior
    L = spd_factor(params.Sigma)
    Linv = np.linalg.inv(L)
    u = b @ Linv.T
    ll += -0.5 * q * LOG_2PI - float(np.sum(np.log(np.diag(L)))) - 0.5 * np.sum(u * u, axis=2)

    # competing-risk part
    W = ds.W[lo:hi]
    D = ds.D[lo:hi]
    for k in range(params.n_causes):
        eta = (W @ params.gamma[k])[:, None] + b @ params.nu[k]
        ll -= cum_hazard[k, lo:hi, None] * np.exp(eta)
        ev = D == k + 1
        if np.any(ev):
            ll[ev] += log_jump[k, lo:hi][ev, None] + eta[ev]
    return ll + log_weight_adj


def posterior_modes(ds: Dataset, params: ParameterSet, cum_hazard: np.ndarray, start: np.ndarray,
                    max_iter: int = 100, tol: float = 1e-10):
    """Mode of each subject's log integrand in b and the lower factor of the
    inverse negative Hessian there.

    The log integrand is strictly concave in b (Gaussian terms plus
    -Lambda exp(nu'b)), so damped Newton converges from any start; all
    subjects are updated together.
    """
    n, q = ds.n, ds.q
    r = ds.y - ds.X @ params.beta
    Zr = np.stack([np.bincount(ds.obs_subject, weights=ds.Z[:, a] * r, minlength=n)
                   for a in range(q)], axis=1)
    Sinv = np.linalg.inv(params.Sigma)
    s2 = params.sigma2
    K = params.n_causes
    scale = np.stack([cum_hazard[k] * np.exp(ds.W @ params.gamma[k]) for k in range(K)])   # (K, n)
    ev = np.stack([(ds.D == k + 1).astype(float) for k in range(K)])

    def objective(b):
        quad = np.einsum("ia,iab,ib->i", b, ds.ZtZ / s2 + Sinv[None], b)
        lin = np.einsum("ia,ia->i", b, Zr) / s2
        eta = b @ params.nu.T                                            # (n, K)
        return -0.5 * quad + lin + np.sum(ev.T * eta - scale.T * np.exp(eta), axis=1)

    b = np.array(start, dtype=float)
    f = objective(b)
    for _ in range(max_iter):
        e = scale.T * np.exp(b @ params.nu.T)                           # (n, K)
        grad = (Zr - np.einsum("iab,ib->ia", ds.ZtZ, b)) / s2 - b @ Sinv + (ev.T - e) @ params.nu
        H = ds.ZtZ / s2 + Sinv[None] + np.einsum("ik,ka,kb->iab", e, params.nu, params.nu)
        step = np.linalg.solve(H, grad[..., None])[..., 0]
        t = np.ones(n)
        for _ in range(30):
            cand = b + t[:, None] * step
            fc = objective(cand)
            bad = ~(fc >= f - 1e-12 * np.abs(f))
            if not bad.any():
                break
            t[bad] *= 0.5
        b, f = np.where(bad[:, None], b, cand), np.where(bad, f, fc)
        if np.max(np.abs(t[:, None] * step)) < tol:
            break
    e = scale.T * np.exp(b @ params.nu.T)
    H = ds.ZtZ / s2 + Sinv[None] + np.einsum("ik,ka,kb->iab", e, params.nu, params.nu)
    R = np.linalg.cholesky(np.linalg.inv(H))
    return b, R


def normalized_weights(ll: np.ndarray):
    """Posterior weights and log normalizer from a (m, G) log-integrand."""
    M = ll.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(M)):
        bad = int(np.flatnonzero(~np.isfinite(M[:, 0]))[0])
        raise ModelError(f"posterior mass lost at subject offset {bad}; widen quadrature")
    e = np.exp(ll - M)
    s = e.sum(axis=1, keepdims=True)
    return e / s, (M + np.log(s))[:, 0]


def moments_from_weights(wbar: np.ndarray, b: np.ndarray, nu: np.ndarray,
                         logsum: np.ndarray, logjac) -> Moments:
    """Weighted moments of the evaluation points ``b`` (m, G, q)."""
    bT = np.swapaxes(b, 1, 2)
    Eb = np.matmul(wbar[:, None, :], b)[:, 0]
    Ebb = np.matmul(bT * wbar[:, None, :], b)
    Ebb = 0.5 * (Ebb + np.swapaxes(Ebb, 1, 2))
    K = nu.shape[0]
    Eexp, Ebexp, Ebbexp = [], [], []
    for k in range(K):
        we = wbar * np.exp(b @ nu[k])
        Eexp.append(we.sum(axis=1))
        Ebexp.append(np.matmul(we[:, None, :], b)[:, 0])
        m2 = np.matmul(bT * we[:, None, :], b)
        Ebbexp.append(0.5 * (m2 + np.swapaxes(m2, 1, 2)))
    return Moments(logsum + logjac, Eb, Ebb, np.array(Eexp), np.array(Ebexp), np.array(Ebbexp))


def posterior_moments(subject: Subject, params: ParameterSet, nodes: np.ndarray,
                      grid: QuadratureGrid, cum_hazard_at_T, logjac: float = 0.0) -> SubjectMoments:
    """Posterior moments of one subject's random effects at the given nodes (G, q)."""
    ds = Dataset.from_subjects([subject], params.n_causes)
    cum = np.asarray(cum_hazard_at_T, dtype=float).reshape(params.n_causes, 1)
    log_jump = np.zeros_like(cum)
    if subject.cause > 0:
        k = subject.cause - 1
        log_jump[k, 0] = math.log(params.baselines[k].jump_at(subject.obs_time))
    nodes = np.asarray(nodes, dtype=float).reshape(grid.size, ds.q)
    ll = log_joint_at_nodes(ds, params, nodes, grid.log_weight_adj, cum, log_jump)
    wbar, logsum = normalized_weights(ll)
    return moments_from_weights(wbar, nodes[None], params.nu, logsum, logjac)[0]
