"""Linear-scan kernels over descending event times.

Three primitives replace nested searches over subjects:

* :func:`step_lookup_scan` evaluates a right-continuous step function, known
  at descending knots, at every (descending) observed time in one merged pass.
* :func:`suffix_riskset_sums` aggregates per-subject values over the risk sets
  ``R(t) = {r : T_r >= t}`` at every knot.  Risk sets are nested, so each
  subject is added exactly once.
* :func:`prefix_event_accumulate` computes ``B(T_i) = sum_{j: t_j <= T_i} b_j``.

Payloads are arrays whose leading axis runs over subjects (or knots); any
trailing shape (scalar, vector, matrix) is summed elementwise.  Ties follow the
half-open convention: a subject whose time equals a knot is in that knot's risk
set and picks up that knot's step value.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np


class ScanError(ValueError):
    pass


@dataclass
class OpCounter:
    """Counts elementary comparisons and payload additions made by a kernel."""

    comparisons: int = 0
    additions: int = 0

    @property
    def total(self) -> int:
        return self.comparisons + self.additions

    def reset(self) -> None:
        self.comparisons = 0
        self.additions = 0


@dataclass(frozen=True)
class DescendingQueries:
    """Observed times sorted nonincreasing plus the permutation that sorted them."""

    times: np.ndarray
    index_map: np.ndarray

    @classmethod
    def from_times(cls, T, tiebreak=None) -> "DescendingQueries":
        T = np.asarray(T, dtype=float)
        keys = (np.arange(len(T)) if tiebreak is None else np.asarray(tiebreak), -T)
        order = np.lexsort(keys)
        return cls(T[order], order)

    def scatter(self, sorted_values: np.ndarray) -> np.ndarray:
        """Map values aligned with the sorted order back to original order."""
        out = np.empty_like(sorted_values)
        out[self.index_map] = sorted_values
        return out


def check_descending(times, strict: bool, what: str) -> None:
    """Single O(n) validation pass; reports the first offending index."""
    t = np.asarray(times, dtype=float)
    if len(t) < 2:
        return
    d = np.diff(t)
    bad = np.flatnonzero(d >= 0) if strict else np.flatnonzero(d > 0)
    if len(bad):
        kind = "strictly descending" if strict else "nonincreasing"
        raise ScanError(f"{what} not {kind} at index {int(bad[0]) + 1}")


def scan_positions(knot_times, query_times, counter: OpCounter | None = None,
                   validate: bool = True) -> np.ndarray:
    """For each query, the index of the largest knot <= query, or ``len(knots)``.

    Both inputs descend.  The knot pointer only moves forward, so the loop makes
    at most ``len(knots) + len(queries)`` comparisons.
    """
    if validate:
        check_descending(knot_times, True, "knots")
        check_descending(query_times, False, "queries")
    knots = np.asarray(knot_times, dtype=float).tolist()
    queries = np.asarray(query_times, dtype=float).tolist()
    nk = len(knots)
    pos = [0] * len(queries)
    j = 0
    comparisons = 0
    for i, t in enumerate(queries):
        while j < nk:
            comparisons += 1
            if t >= knots[j]:
                break
            j += 1
        pos[i] = j
    if counter is not None:
        counter.comparisons += comparisons
    return np.asarray(pos, dtype=np.int64)


def _with_zero_row(values: np.ndarray) -> np.ndarray:
    return np.concatenate([values, np.zeros((1,) + values.shape[1:], dtype=values.dtype)])


def step_lookup_scan(knot_times, knot_values, query_times,
                     counter: OpCounter | None = None, validate: bool = True) -> np.ndarray:
    """Evaluate a right-continuous step function at descending query times.

    ``knot_values[j]`` is the function value on ``[t_j, t_{j-1})``; queries at or
    above the largest knot take ``knot_values[0]`` and queries below the
    smallest knot take zero.
    """
    values = np.asarray(knot_values, dtype=float)
    if len(values) != len(knot_times):
        raise ScanError("knot_values must align with knot_times")
    pos = scan_positions(knot_times, query_times, counter, validate)
    return _with_zero_row(values)[pos]


def suffix_riskset_sums(contributions, query_times, knot_times,
                        counter: OpCounter | None = None, validate: bool = True) -> np.ndarray:
    """``sum_{r : T_r >= t_j} a_r`` for every knot ``t_j``.

    ``contributions`` is aligned with the descending ``query_times``.  The
    boundary of each risk set is found by one merged pass; the running sum is a
    single cumulative sum over subjects, so every contribution is added once.
    """
    a = np.asarray(contributions, dtype=float)
    if len(a) != len(query_times):
        raise ScanError("contributions must align with query_times")
    if validate:
        check_descending(knot_times, True, "knots")
        check_descending(query_times, False, "queries")
        nan = np.flatnonzero(np.isnan(a.reshape(len(a), -1)).any(axis=1))
        if len(nan):
            raise ScanError(f"NaN contribution at sorted subject index {int(nan[0])}")
    ends = _riskset_ends(knot_times, query_times, counter)
    running = np.cumsum(a, axis=0)
    if counter is not None:
        counter.additions += len(a)
    # ends[j] == 0 means an empty risk set
    return _with_zero_row(running)[ends - 1]


def _riskset_ends(knot_times, query_times, counter: OpCounter | None) -> np.ndarray:
    """Number of leading (largest-time) subjects with ``T >= t_j`` for each knot."""
    knots = np.asarray(knot_times, dtype=float).tolist()
    queries = np.asarray(query_times, dtype=float).tolist()
    n = len(queries)
    ends = [0] * len(knots)
    r = 0
    comparisons = 0
    for j, t in enumerate(knots):
        while r < n:
            comparisons += 1
            if queries[r] < t:
                break
            r += 1
        ends[j] = r
    if counter is not None:
        counter.comparisons += comparisons
    return np.asarray(ends, dtype=np.int64)


def prefix_event_accumulate(per_knot_terms, query_times, knot_times,
                            counter: OpCounter | None = None, validate: bool = True) -> np.ndarray:
    """``B(T_i) = sum_{j : t_j <= T_i} b_j`` for every descending query time."""
    b = np.asarray(per_knot_terms, dtype=float)
    if len(b) != len(knot_times):
        raise ScanError("per_knot_terms must align with knot_times")
    # knots descend, so B(t_j) sums b_j and every later (smaller) knot
    B = np.cumsum(b[::-1], axis=0)[::-1]
    if counter is not None:
        counter.additions += len(b)
    return step_lookup_scan(knot_times, B, query_times, counter, validate)


def riskset_ratio_accumulate(weights, numerators, query_times, knot_times, counts,
                             counter: OpCounter | None = None) -> np.ndarray:
    """``sum_{j : t_j <= T_i} d_j S1_j / S0_j^2`` for every descending query.

    ``S0_j`` and ``S1_j`` are risk-set sums of ``weights`` and ``numerators``.
    This is the accumulation inside the profiled score for the survival
    coefficients; it costs two suffix scans and one prefix scan.
    """
    S0 = suffix_riskset_sums(weights, query_times, knot_times, counter)
    S1 = suffix_riskset_sums(numerators, query_times, knot_times, counter)
    if np.any(S0 <= 0):
        raise ScanError("degenerate risk-set denominator")
    d = np.asarray(counts, dtype=float)
    b = (d / S0 ** 2).reshape((-1,) + (1,) * (S1.ndim - 1)) * S1
    return prefix_event_accumulate(b, query_times, knot_times, counter, validate=False)


class Kernels(NamedTuple):
    """A backend: the kernel functions used by the fitting and SE code."""

    name: str
    step_lookup: Callable
    riskset_sums: Callable
    prefix_accumulate: Callable
    ratio_accumulate: Callable


SCAN_KERNELS = Kernels("scan", step_lookup_scan, suffix_riskset_sums,
                       prefix_event_accumulate, riskset_ratio_accumulate)
