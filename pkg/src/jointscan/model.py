"""Data and parameter types for the joint longitudinal / competing-risk model,
plus the log-density pieces of the complete-data likelihood.

Subjects are stored column-wise inside :class:`Dataset` (flat observation
arrays plus per-subject arrays) so that the E-step and the risk-set scans can
work on whole arrays.  :class:`Subject` is the per-subject view.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class ModelError(ValueError):
    """Raised for invalid data, parameters, or dimension mismatches."""


def _check_len(name: str, arr: np.ndarray, expected: int) -> None:
    if arr.shape[-1] != expected:
        raise ModelError(f"{name}: expected length {expected}, got {arr.shape[-1]}")


def _as_rows(a, rows: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a if a.ndim == 2 else a.reshape(rows, -1)


class LongitudinalObs(NamedTuple):
    time: float
    response: float
    fixed_design: Sequence[float]
    random_design: Sequence[float]


@dataclass(frozen=True)
class Subject:
    """One subject: longitudinal rows (ascending in time) and competing-risk outcome.

    ``cause`` is 0 for a censored subject and ``k`` in ``1..K`` for a type-k event.
    """

    id: str
    times: np.ndarray
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    w: np.ndarray
    obs_time: float
    cause: int

    @classmethod
    def from_observations(cls, id, obs: Sequence[LongitudinalObs], surv_covariates,
                          obs_time: float, cause: int, p: int | None = None,
                          q: int | None = None) -> "Subject":
        obs = sorted(obs, key=lambda o: o.time)
        if obs:
            X = np.array([o.fixed_design for o in obs], dtype=float)
            Z = np.array([o.random_design for o in obs], dtype=float)
        else:
            if p is None or q is None:
                raise ModelError("p and q are required for a subject without observations")
            X = np.empty((0, p))
            Z = np.empty((0, q))
        return cls(
            id=str(id),
            times=np.array([o.time for o in obs], dtype=float),
            y=np.array([o.response for o in obs], dtype=float),
            X=X,
            Z=Z,
            w=np.atleast_1d(np.asarray(surv_covariates, dtype=float)),
            obs_time=float(obs_time),
            cause=int(cause),
        )

    @property
    def n_obs(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class EventRegistry:
    """Distinct type-k event times, strictly descending, with multiplicities."""

    times: np.ndarray
    counts: np.ndarray

    @property
    def size(self) -> int:
        return len(self.times)


class Dataset:
    """Immutable collection of subjects with cached sorted views.

    Built once; ``desc_order`` (observed times descending, ties by id) and
    the per-cause :class:`EventRegistry` are computed at construction so that
    every scan in the fitting loop reuses them.
    """

    def __init__(self, ids, obs_subject, obs_times, y, X, Z, W, T, D, n_causes,
                 fixed_names=None, random_names=None, surv_names=None):
        self.ids = [str(i) for i in ids]
        n = len(self.ids)
        if len(set(self.ids)) != n:
            raise ModelError("subject ids must be unique")
        self.obs_subject = np.asarray(obs_subject, dtype=np.int64)
        self.obs_times = np.asarray(obs_times, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.X = _as_rows(X, len(self.y))
        self.Z = _as_rows(Z, len(self.y))
        self.W = _as_rows(W, n)
        self.T = np.asarray(T, dtype=float)
        self.D = np.asarray(D, dtype=np.int64)
        self.n_causes = int(n_causes)
        self.n, self.p, self.q, self.p2 = n, self.X.shape[1], self.Z.shape[1], self.W.shape[1]
        self.fixed_names = list(fixed_names or [f"x{j}" for j in range(self.p)])
        self.random_names = list(random_names or [f"z{j}" for j in range(self.q)])
        self.surv_names = list(surv_names or [f"w{j}" for j in range(self.p2)])
        self._validate()

        order = np.lexsort((self.obs_times, self.obs_subject))
        if np.any(order != np.arange(len(order))):
            for name in ("obs_subject", "obs_times", "y", "X", "Z"):
                setattr(self, name, getattr(self, name)[order])
        self.n_obs = np.bincount(self.obs_subject, minlength=n)
        self.obs_ptr = np.concatenate([[0], np.cumsum(self.n_obs)])

        id_rank = np.empty(n, dtype=np.int64)
        id_rank[np.argsort(np.array(self.ids), kind="stable")] = np.arange(n)
        self.desc_order = np.lexsort((id_rank, -self.T))
        self.T_desc = self.T[self.desc_order]
        self.events = []
        for k in range(1, self.n_causes + 1):
            tk = self.T[self.D == k]
            times, counts = np.unique(tk, return_counts=True)
            self.events.append(EventRegistry(times[::-1].copy(), counts[::-1].copy()))

        # per-subject cross products that do not depend on parameters
        self.ZtZ = _grouped_outer(self.Z, self.Z, self.obs_subject, n)
        self.XtZ = _grouped_outer(self.X, self.Z, self.obs_subject, n)
        self.XtX_pooled = self.X.T @ self.X

    def _validate(self) -> None:
        N = len(self.y)
        for name in ("obs_times", "X", "Z", "obs_subject"):
            if len(getattr(self, name)) != N:
                raise ModelError(f"{name}: expected {N} rows, got {len(getattr(self, name))}")
        for name in ("T", "D"):
            if len(getattr(self, name)) != self.n:
                raise ModelError(f"{name}: expected length {self.n}, got {len(getattr(self, name))}")
        if self.n_causes < 1:
            raise ModelError("n_causes must be >= 1")
        for name in ("y", "X", "Z", "W", "T", "obs_times"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ModelError(f"{name}: non-finite entries")
        if np.any(self.T < 0) or np.any(self.obs_times < 0):
            raise ModelError("times must be nonnegative")
        if np.any((self.D < 0) | (self.D > self.n_causes)):
            bad = int(np.flatnonzero((self.D < 0) | (self.D > self.n_causes))[0])
            raise ModelError(f"subject {self.ids[bad]}: cause {self.D[bad]} outside 0..{self.n_causes}")
        if N and (self.obs_subject.min() < 0 or self.obs_subject.max() >= self.n):
            raise ModelError("obs_subject index out of range")
        late = np.flatnonzero(self.obs_times > self.T[self.obs_subject]) if N else []
        if len(late):
            i = int(self.obs_subject[late[0]])
            raise ModelError(
                f"subject {self.ids[i]}: longitudinal time {self.obs_times[late[0]]} "
                f"after observed time {self.T[i]}")

    @classmethod
    def from_subjects(cls, subjects: Sequence[Subject], n_causes: int, **names) -> "Dataset":
        if not subjects:
            raise ModelError("empty subject list")
        p = subjects[0].X.shape[1]
        q = subjects[0].Z.shape[1]
        for s in subjects:
            if s.X.shape[1] != p:
                raise ModelError(f"subject {s.id} fixed_design: expected length {p}, got {s.X.shape[1]}")
            if s.Z.shape[1] != q:
                raise ModelError(f"subject {s.id} random_design: expected length {q}, got {s.Z.shape[1]}")
        return cls(
            ids=[s.id for s in subjects],
            obs_subject=np.concatenate([np.full(s.n_obs, i) for i, s in enumerate(subjects)]).astype(np.int64),
            obs_times=np.concatenate([s.times for s in subjects]),
            y=np.concatenate([s.y for s in subjects]),
            X=np.vstack([s.X for s in subjects]),
            Z=np.vstack([s.Z for s in subjects]),
            W=np.vstack([s.w for s in subjects]),
            T=[s.obs_time for s in subjects],
            D=[s.cause for s in subjects],
            n_causes=n_causes,
            **names,
        )

    def subject(self, i: int) -> Subject:
        lo, hi = self.obs_ptr[i], self.obs_ptr[i + 1]
        return Subject(self.ids[i], self.obs_times[lo:hi], self.y[lo:hi], self.X[lo:hi],
                       self.Z[lo:hi], self.W[i], float(self.T[i]), int(self.D[i]))

    @property
    def subjects(self) -> list[Subject]:
        return [self.subject(i) for i in range(self.n)]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset.from_subjects([self.subject(int(i)) for i in index], self.n_causes,
                                     **self.names())

    def names(self) -> dict:
        return dict(fixed_names=self.fixed_names, random_names=self.random_names,
                    surv_names=self.surv_names)

    @property
    def n_total_obs(self) -> int:
        return len(self.y)

    def __len__(self) -> int:
        return self.n

    def __repr__(self) -> str:
        return (f"Dataset(n={self.n}, N={len(self.y)}, p={self.p}, q={self.q}, "
                f"p2={self.p2}, K={self.n_causes})")


def _grouped_outer(A: np.ndarray, B: np.ndarray, group: np.ndarray, n: int) -> np.ndarray:
    """Per-group sums of outer products ``sum_j a_j b_j^T``, shape (n, a, b)."""
    out = np.zeros((n, A.shape[1], B.shape[1]))
    for a in range(A.shape[1]):
        for b in range(B.shape[1]):
            out[:, a, b] = np.bincount(group, weights=A[:, a] * B[:, b], minlength=n)
    return out


def grouped_sum(values: np.ndarray, group: np.ndarray, n: int) -> np.ndarray:
    """Per-group sums of rows of ``values`` (1-D or 2-D)."""
    if values.ndim == 1:
        return np.bincount(group, weights=values, minlength=n)
    return np.stack([np.bincount(group, weights=values[:, a], minlength=n)
                     for a in range(values.shape[1])], axis=1)


@dataclass(frozen=True)
class BaselineHazard:
    """Right-continuous step cumulative hazard with jumps at descending knots."""

    knots: np.ndarray
    jumps: np.ndarray
    cumulative: np.ndarray = field(init=False)

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        jumps = np.asarray(self.jumps, dtype=float)
        if knots.shape != jumps.shape:
            raise ModelError("knots and jumps must align")
        if np.any(np.diff(knots) >= 0):
            raise ModelError("baseline knots must be strictly descending")
        if np.any(~np.isfinite(jumps)) or np.any(jumps < 0):
            raise ModelError("baseline jumps must be finite and nonnegative")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "jumps", jumps)
        # knots descend, so the cumulative at knot j sums jumps at j and after
        object.__setattr__(self, "cumulative", np.cumsum(jumps[::-1])[::-1].copy())

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        asc = self.knots[::-1]
        idx = np.searchsorted(asc, t, side="right")
        cum_asc = np.concatenate([[0.0], self.cumulative[::-1]])
        return cum_asc[idx]

    def jump_at(self, t: float) -> float:
        hit = np.flatnonzero(self.knots == t)
        if not len(hit):
            raise ModelError(f"event time missing from baseline support: {t}")
        return float(self.jumps[hit[0]])


@dataclass
class ParameterSet:
    """All model parameters: longitudinal (beta, sigma2, Sigma) and per-cause
    survival parameters (gamma[k], nu[k], baselines[k]); k is 0-based here."""

    beta: np.ndarray
    sigma2: float
    Sigma: np.ndarray
    gamma: np.ndarray
    nu: np.ndarray
    baselines: list[BaselineHazard]

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        self.gamma = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        self.nu = np.atleast_2d(np.asarray(self.nu, dtype=float))
        self.sigma2 = float(self.sigma2)
        if not self.sigma2 > 0:
            raise ModelError(f"sigma2 must be positive, got {self.sigma2}")
        if not np.allclose(self.Sigma, self.Sigma.T, rtol=0, atol=1e-12 * max(1.0, np.abs(self.Sigma).max())):
            raise ModelError("Sigma must be symmetric")
        if len(self.baselines) != self.gamma.shape[0] or self.nu.shape[0] != self.gamma.shape[0]:
            raise ModelError("gamma, nu and baselines must have one entry per cause")

    @property
    def n_causes(self) -> int:
        return self.gamma.shape[0]

    def copy(self, **changes) -> "ParameterSet":
        fields = dict(beta=self.beta.copy(), sigma2=self.sigma2, Sigma=self.Sigma.copy(),
                      gamma=self.gamma.copy(), nu=self.nu.copy(), baselines=list(self.baselines))
        fields.update(changes)
        return ParameterSet(**fields)


def spd_factor(S: np.ndarray, what: str = "Sigma") -> np.ndarray:
    """Lower Cholesky factor; a failure is a hard error showing the matrix."""
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise ModelError(f"{what} is not positive definite:\n{np.array2string(np.asarray(S))}") from None


def log_mvnormal0(b: np.ndarray, L: np.ndarray) -> np.ndarray:
    """log N_q(b; 0, L L^T) for b of shape (..., q)."""
    q = L.shape[0]
    sol = np.linalg.solve(L, np.moveaxis(np.asarray(b, dtype=float), -1, 0).reshape(q, -1))
    quad = np.sum(sol * sol, axis=0).reshape(np.shape(b)[:-1])
    return -0.5 * q * LOG_2PI - np.sum(np.log(np.diag(L))) - 0.5 * quad


def log_longitudinal_density(subject: Subject, b, params: ParameterSet) -> float:
    b = np.asarray(b, dtype=float)
    _check_len("b", b, params.Sigma.shape[0])
    if subject.n_obs == 0:
        return 0.0
    _check_len("fixed_design", subject.X, len(params.beta))
    _check_len("random_design", subject.Z, len(b))
    resid = subject.y - subject.X @ params.beta - subject.Z @ b
    return float(-0.5 * subject.n_obs * math.log(2 * math.pi * params.sigma2)
                 - resid @ resid / (2 * params.sigma2))


def log_survival_density(subject: Subject, b, params: ParameterSet, cum_hazard_at_T) -> float:
    b = np.asarray(b, dtype=float)
    cum = np.asarray(cum_hazard_at_T, dtype=float)
    _check_len("cum_hazard_at_T", cum, params.n_causes)
    _check_len("surv_covariates", subject.w, params.gamma.shape[1])
    _check_len("b", b, params.nu.shape[1])
    eta = params.gamma @ subject.w + params.nu @ b
    out = -float(np.sum(cum * np.exp(eta)))
    if subject.cause > 0:
        k = subject.cause - 1
        out += math.log(params.baselines[k].jump_at(subject.obs_time)) + eta[k]
    return out


def log_complete_data(dataset: Dataset, b_all, params: ParameterSet) -> float:
    """Complete-data log-likelihood summed over subjects (one b per subject)."""
    b_all = np.asarray(b_all, dtype=float).reshape(dataset.n, -1)
    L = spd_factor(params.Sigma)
    cum = np.stack([bh(dataset.T) for bh in params.baselines], axis=1)
    total = 0.0
    for i in range(dataset.n):
        s = dataset.subject(i)
        total += (log_longitudinal_density(s, b_all[i], params)
                  + log_survival_density(s, b_all[i], params, cum[i])
                  + float(log_mvnormal0(b_all[i], L)))
    return total


class OmegaLayout:
    """Packing of the parametric component
    (beta, vech(Sigma), sigma2, gamma_1..gamma_K, nu_1..nu_K).

    vech is the row-major lower triangle: (0,0), (1,0), (1,1), (2,0), ...
    """

    def __init__(self, p: int, q: int, p2: int, n_causes: int):
        self.p, self.q, self.p2, self.K = p, q, p2, n_causes
        self.tril = [(a, b) for a in range(q) for b in range(a + 1)]
        self.dim = p + len(self.tril) + 1 + n_causes * (p2 + q)

    @classmethod
    def for_dataset(cls, ds: "Dataset") -> "OmegaLayout":
        return cls(ds.p, ds.q, ds.p2, ds.n_causes)

    @property
    def slices(self) -> dict:
        p, s, K = self.p, len(self.tril), self.K
        out = {"beta": slice(0, p), "Sigma": slice(p, p + s), "sigma2": slice(p + s, p + s + 1)}
        start = p + s + 1
        out["gamma"] = slice(start, start + K * self.p2)
        out["nu"] = slice(start + K * self.p2, self.dim)
        return out

    def pack(self, params: ParameterSet) -> np.ndarray:
        vech = np.array([params.Sigma[a, b] for a, b in self.tril])
        return np.concatenate([params.beta, vech, [params.sigma2],
                               params.gamma.ravel(), params.nu.ravel()])

    def unpack(self, vec, baselines) -> ParameterSet:
        vec = np.asarray(vec, dtype=float)
        sl = self.slices
        Sigma = np.zeros((self.q, self.q))
        for v, (a, b) in zip(vec[sl["Sigma"]], self.tril):
            Sigma[a, b] = Sigma[b, a] = v
        return ParameterSet(vec[sl["beta"]].copy(), float(vec[sl["sigma2"]][0]), Sigma,
                            vec[sl["gamma"]].reshape(self.K, self.p2).copy(),
                            vec[sl["nu"]].reshape(self.K, self.q).copy(), list(baselines))

    def names(self, fixed_names=None, random_names=None, surv_names=None) -> list[str]:
        fixed_names = fixed_names or [str(j) for j in range(self.p)]
        random_names = random_names or [str(j) for j in range(self.q)]
        surv_names = surv_names or [str(j) for j in range(self.p2)]
        out = [f"beta[{n}]" for n in fixed_names]
        out += [f"Sigma[{random_names[a]},{random_names[b]}]" for a, b in self.tril]
        out.append("sigma2")
        out += [f"gamma{k + 1}[{n}]" for k in range(self.K) for n in surv_names]
        out += [f"nu{k + 1}[{n}]" for k in range(self.K) for n in random_names]
        return out
