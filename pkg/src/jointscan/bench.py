"""Naive reference backends and the timing harness.

The naive kernels share the contracts of the scan kernels but recompute each
quantity from scratch: a global search over all knots per lookup, a fresh
filter of all subjects per risk set, and, for the standard-error accumulation,
a fresh risk-set pass for every (subject, knot) pair.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .em import EmConfig, em_fit, hazard_at_T
from .inference import covariance, profiled_scores
from .lmm import fit_lmm
from .scan import SCAN_KERNELS, Kernels, OpCounter, ScanError, check_descending
from .simulate import SimConfig, simulate_dataset

log = logging.getLogger(__name__)

METHODS = ("naive_em", "scan_em", "naive_se", "scan_se", "naive_lookup", "scan_lookup")
DEFAULT_SIZES = (100, 500, 1000, 5000, 10000, 50000, 100000)
# growth exponent used to predict whether the next size fits the budget
_GROWTH = {"naive_em": 2, "scan_em": 1, "naive_se": 3, "scan_se": 1,
           "naive_lookup": 2, "scan_lookup": 1}
SKIPPED = "skipped(budget)"

_deadline = [math.inf]


class BudgetExceeded(RuntimeError):
    pass


class time_limit:
    """Make the naive kernels abort once ``seconds`` of wall time have passed."""

    def __init__(self, seconds: float):
        self.seconds = seconds

    def __enter__(self):
        self._saved = _deadline[0]
        _deadline[0] = time.perf_counter() + self.seconds
        return self

    def __exit__(self, *exc):
        _deadline[0] = self._saved
        return False


def _check_deadline() -> None:
    if time.perf_counter() > _deadline[0]:
        raise BudgetExceeded("time budget exceeded")


def _validate(knot_times, query_times, validate):
    if validate:
        check_descending(knot_times, True, "knots")
        check_descending(query_times, False, "queries")


def naive_step_lookup(knot_times, knot_values, query_times,
                      counter: OpCounter | None = None, validate: bool = True) -> np.ndarray:
    """Per-query global search for the largest knot <= the query."""
    _validate(knot_times, query_times, validate)
    knots = np.asarray(knot_times, dtype=float)
    values = np.asarray(knot_values, dtype=float)
    if len(values) != len(knots):
        raise ScanError("knot_values must align with knot_times")
    out = np.zeros((len(query_times),) + values.shape[1:])
    for i, t in enumerate(np.asarray(query_times, dtype=float)):
        _check_deadline()
        hit = np.flatnonzero(knots <= t)
        if counter is not None:
            counter.comparisons += len(knots)
        if len(hit):
            out[i] = values[hit[0]]
    return out


def naive_riskset_sums(contributions, query_times, knot_times,
                       counter: OpCounter | None = None, validate: bool = True) -> np.ndarray:
    """Refilter all subjects at every knot."""
    a = np.asarray(contributions, dtype=float)
    T = np.asarray(query_times, dtype=float)
    if len(a) != len(T):
        raise ScanError("contributions must align with query_times")
    _validate(knot_times, T, validate)
    if validate:
        nan = np.flatnonzero(np.isnan(a.reshape(len(a), -1)).any(axis=1))
        if len(nan):
            raise ScanError(f"NaN contribution at sorted subject index {int(nan[0])}")
    out = np.zeros((len(knot_times),) + a.shape[1:])
    for j, t in enumerate(np.asarray(knot_times, dtype=float)):
        _check_deadline()
        at_risk = T >= t
        out[j] = a[at_risk].sum(axis=0)
        if counter is not None:
            counter.comparisons += len(T)
            counter.additions += int(at_risk.sum())
    return out


def naive_prefix_accumulate(per_knot_terms, query_times, knot_times,
                            counter: OpCounter | None = None, validate: bool = True) -> np.ndarray:
    """Sum the terms of every knot at or below each query, separately per query."""
    b = np.asarray(per_knot_terms, dtype=float)
    knots = np.asarray(knot_times, dtype=float)
    if len(b) != len(knots):
        raise ScanError("per_knot_terms must align with knot_times")
    _validate(knots, query_times, validate)
    out = np.zeros((len(query_times),) + b.shape[1:])
    for i, t in enumerate(np.asarray(query_times, dtype=float)):
        _check_deadline()
        below = knots <= t
        out[i] = b[below].sum(axis=0)
        if counter is not None:
            counter.comparisons += len(knots)
            counter.additions += int(below.sum())
    return out


def naive_ratio_accumulate(weights, numerators, query_times, knot_times, counts,
                           counter: OpCounter | None = None) -> np.ndarray:
    """Triple loop: for each subject, each knot below it, a fresh risk-set pass."""
    a = np.asarray(weights, dtype=float)
    num = np.asarray(numerators, dtype=float)
    T = np.asarray(query_times, dtype=float)
    knots = np.asarray(knot_times, dtype=float)
    d = np.asarray(counts, dtype=float)
    out = np.zeros((len(T),) + num.shape[1:])
    for i, Ti in enumerate(T):
        _check_deadline()
        for j in np.flatnonzero(knots <= Ti):
            at_risk = T >= knots[j]
            S0 = a[at_risk].sum()
            if S0 <= 0:
                raise ScanError("degenerate risk-set denominator")
            out[i] += d[j] * num[at_risk].sum(axis=0) / S0 ** 2
            if counter is not None:
                counter.comparisons += len(T)
                counter.additions += 2 * int(at_risk.sum())
    return out


def naive_backends() -> Kernels:
    return Kernels("naive", naive_step_lookup, naive_riskset_sums,
                   naive_prefix_accumulate, naive_ratio_accumulate)


NAIVE_KERNELS = naive_backends()


def check_backends_agree(seed: int = 0, instances: int = 20, rtol: float = 1e-12) -> None:
    """Run both backends on random tied instances; raise on any disagreement."""
    rng = np.random.default_rng(seed)
    for _ in range(instances):
        n = int(rng.integers(1, 60))
        T = np.sort(rng.integers(0, 15, n).astype(float))[::-1]
        knots = np.unique(rng.choice(T, size=int(rng.integers(1, n + 1))))[::-1]
        a = rng.exponential(size=(n, 2))
        vals = rng.normal(size=(len(knots), 3))
        pairs = [
            (SCAN_KERNELS.step_lookup(knots, vals, T), NAIVE_KERNELS.step_lookup(knots, vals, T)),
            (SCAN_KERNELS.riskset_sums(a, T, knots), NAIVE_KERNELS.riskset_sums(a, T, knots)),
            (SCAN_KERNELS.prefix_accumulate(vals, T, knots), NAIVE_KERNELS.prefix_accumulate(vals, T, knots)),
            (SCAN_KERNELS.ratio_accumulate(a[:, 0], a, T, knots, np.ones(len(knots))),
             NAIVE_KERNELS.ratio_accumulate(a[:, 0], a, T, knots, np.ones(len(knots)))),
        ]
        for fast, slow in pairs:
            if not np.allclose(fast, slow, rtol=rtol, atol=rtol * max(1.0, np.abs(slow).max(initial=0))):
                raise AssertionError("scan and naive backends disagree")


@dataclass
class BenchPlan:
    sample_sizes: tuple = DEFAULT_SIZES
    methods: tuple = METHODS
    repetitions: int = 3
    time_budget: float = 60.0
    em_iterations: int = 10
    seed: int = 2024
    threads: int = 1

    def __post_init__(self):
        sizes = [int(s) for s in self.sample_sizes]
        if not sizes or any(s < 1 for s in sizes) or sizes != sorted(set(sizes)):
            raise ValueError("sample_sizes must be positive and strictly ascending")
        self.sample_sizes = tuple(sizes)
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown bench methods {unknown}; choose from {list(METHODS)}")
        if self.repetitions < 1 or self.em_iterations < 1:
            raise ValueError("repetitions and em_iterations must be >= 1")
        if not self.time_budget > 0:
            raise ValueError("time_budget must be positive")


@dataclass
class BenchRow:
    """One timed cell.  A cell stopped by the budget keeps ``min_seconds`` (the
    budget) so its fold change is reported as a lower bound."""

    n: int
    method: str
    seconds: float | None
    fold_change_vs_scan: float | None = None
    status: str = "ok"
    min_seconds: float | None = None

    @property
    def fold_is_lower_bound(self) -> bool:
        return self.status != "ok" and self.fold_change_vs_scan is not None


@dataclass
class BenchResult:
    rows: list = field(default_factory=list)
    timer_overhead: float = 0.0

    def cell(self, n: int, method: str) -> BenchRow | None:
        for r in self.rows:
            if r.n == n and r.method == method:
                return r
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "method", "seconds", "fold_change_vs_scan"])
        for r in self.rows:
            secs = repr(r.seconds) if r.status == "ok" else r.status
            if r.fold_change_vs_scan is None:
                fold = ""
            else:
                fold = (">=" if r.fold_is_lower_bound else "") + repr(r.fold_change_vs_scan)
            w.writerow([r.n, r.method, secs, fold])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"{'n':>8}  {'method':<13}{'seconds':>16}{'fold':>14}"]
        for r in self.rows:
            secs = f"{r.seconds:16.4f}" if r.status == "ok" else f"{r.status:>16}"
            if r.fold_change_vs_scan is None:
                fold = f"{'':>14}"
            else:
                fold = f"{('>=' if r.fold_is_lower_bound else '') + f'{r.fold_change_vs_scan:.1f}':>14}"
            lines.append(f"{r.n:>8}  {r.method:<13}{secs}{fold}")
        lines.append(f"timer overhead per call: {self.timer_overhead:.2e} s")
        return "\n".join(lines)


def timer_overhead(calls: int = 1000) -> float:
    """Median cost of timing an empty call."""
    samples = []
    for _ in range(calls):
        t0 = time.perf_counter()
        (lambda: None)()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


class _Cell:
    """Per-size state shared by the methods: data, LMM fit, and a joint fit."""

    def __init__(self, n: int, plan: BenchPlan, sim: SimConfig):
        cfg = SimConfig(**{**sim.__dict__, "n": n, "seed": plan.seed + n})
        self.ds = simulate_dataset(cfg)
        self.lmm = fit_lmm(self.ds)
        # a fixed iteration count keeps the EM timing comparable across n
        self.em_config = EmConfig(tol=1e-300, max_iter=plan.em_iterations, threads=plan.threads)
        self._fit = None

    @property
    def fit(self):
        if self._fit is None:
            self._fit = em_fit(self.ds, self.em_config, SCAN_KERNELS, self.lmm)
        return self._fit

    def run(self, method: str):
        kernels = NAIVE_KERNELS if method.startswith("naive") else SCAN_KERNELS
        family = method.split("_", 1)[1]
        if family == "em":
            return em_fit(self.ds, self.em_config, kernels, self.lmm)
        if family == "se":
            return covariance(profiled_scores(self.ds, self.fit, kernels, require_converged=False))
        return hazard_at_T(self.ds, self.fit.params, kernels)


def _time_once(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def run_bench(plan: BenchPlan, sim: SimConfig | None = None) -> BenchResult:
    """Time every (n, method) cell.

    Cells predicted to exceed the budget from the previous size are skipped;
    a naive cell that runs past the budget is stopped and marked, keeping the
    budget as a lower bound on its time.
    """
    sim = sim or SimConfig()
    check_backends_agree()
    result = BenchResult(timer_overhead=timer_overhead())
    last = {}                    # method -> (n, seconds) of the last measured cell
    for n in plan.sample_sizes:
        cell = None
        for method in plan.methods:
            prev = last.get(method)
            if prev is not None and prev[1] * (n / prev[0]) ** _GROWTH[method] > plan.time_budget:
                result.rows.append(BenchRow(n, method, None, status=SKIPPED))
                continue
            try:
                cell = cell or _Cell(n, plan, sim)
                if not method.endswith("_em"):
                    cell.fit  # noqa: B018 - the shared fit is not part of the timing
                samples = []
                for _ in range(plan.repetitions):
                    with time_limit(plan.time_budget):
                        samples.append(_time_once(lambda: cell.run(method)))
                    if sum(samples) > plan.time_budget:
                        break
                secs = statistics.median(samples)
            except BudgetExceeded:
                result.rows.append(BenchRow(n, method, None, status=SKIPPED,
                                            min_seconds=plan.time_budget))
                last[method] = (n, plan.time_budget)
                continue
            except Exception as exc:  # recorded, not fatal
                log.warning("bench cell n=%d %s failed: %s", n, method, exc)
                result.rows.append(BenchRow(n, method, None, status=f"error({type(exc).__name__})"))
                continue
            last[method] = (n, secs)
            result.rows.append(BenchRow(n, method, secs))
    _fill_fold_changes(result)
    return result


def _fill_fold_changes(result: BenchResult) -> None:
    for r in result.rows:
        kind, family = r.method.split("_", 1)
        if r.status == "ok" and kind == "scan":
            r.fold_change_vs_scan = 1.0
            continue
        spent = r.seconds if r.status == "ok" else r.min_seconds
        ref = result.cell(r.n, f"scan_{family}")
        if spent is not None and ref is not None and ref.status == "ok" and ref.seconds > 0:
            r.fold_change_vs_scan = spent / ref.seconds


def scaling_ratio(result: BenchResult, method: str, n_small: int, n_large: int) -> float:
    a, b = result.cell(n_small, method), result.cell(n_large, method)
    if a is None or b is None or a.status != "ok" or b.status != "ok":
        return math.nan
    return b.seconds / a.seconds
