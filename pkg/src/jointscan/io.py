"""CSV ingestion and writing, run configuration, and JSON reports.

Longitudinal file: ``id,time,y,<covariates...>``, one row per measurement.
Survival file: ``id,obs_time,cause,<covariates...>``, one row per subject;
cause 0 means censored.  Subjects are kept in survival-file order.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .em import EmConfig
from .model import Dataset, ModelError
from .simulate import SimConfig, simulate_arrays

REPORT_VERSION = 1
LONG_HEADER = ("id", "time", "y")
SURV_HEADER = ("id", "obs_time", "cause")


class ConfigError(ValueError):
    """Invalid configuration, or a configuration that does not match the data files."""


class InputError(ValueError):
    """Malformed or inconsistent input file contents."""


@dataclass
class ModelSpec:
    fixed: list = field(default_factory=lambda: ["time"])
    random: list = field(default_factory=lambda: ["time"])
    survival: list = field(default_factory=list)
    fixed_intercept: bool = True
    random_intercept: bool = True
    n_causes: int = 2

    def __post_init__(self):
        if self.n_causes < 1:
            raise ConfigError("model.n_causes must be >= 1")
        if not (self.fixed or self.fixed_intercept):
            raise ConfigError("model has no fixed-effect columns")
        if not (self.random or self.random_intercept):
            raise ConfigError("model has no random-effect columns")

    @property
    def fixed_names(self) -> list:
        return (["(intercept)"] if self.fixed_intercept else []) + list(self.fixed)

    @property
    def random_names(self) -> list:
        return (["(intercept)"] if self.random_intercept else []) + list(self.random)


@dataclass
class RunConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    em: EmConfig = field(default_factory=EmConfig)
    se: bool = True
    simulate: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)

    def sim_config(self, seed: int | None = None, n: int | None = None) -> SimConfig:
        kw = dict(self.simulate)
        if seed is not None:
            kw["seed"] = seed
        if n is not None:
            kw["n"] = n
        try:
            return SimConfig(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"simulate block: {exc}") from None


def _build(cls, block, where: str):
    if block is None:
        return cls()
    if not isinstance(block, dict):
        raise ConfigError(f"{where} block must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(block) - known)
    if unknown:
        raise ConfigError(f"{where} block: unknown keys {unknown}")
    try:
        return cls(**block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where} block: {exc}") from None


def parse_config(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(obj) - {"model", "em", "quadrature", "se", "simulate", "bench"})
    if unknown:
        raise ConfigError(f"unknown config sections {unknown}")
    model = _build(ModelSpec, obj.get("model"), "model")
    em_block = dict(obj.get("em") or {})
    quad = obj.get("quadrature") or {}
    if not isinstance(quad, dict) or set(quad) - {"mode", "n_q"}:
        raise ConfigError("quadrature block accepts only 'mode' and 'n_q'")
    if "mode" in quad:
        em_block["quad_mode"] = quad["mode"]
    if "n_q" in quad:
        em_block["n_q"] = quad["n_q"]
    em = _build(EmConfig, em_block, "em")
    se = obj.get("se", {"enabled": True})
    se_enabled = se.get("enabled", True) if isinstance(se, dict) else bool(se)
    for name in ("simulate", "bench"):
        if not isinstance(obj.get(name, {}), dict):
            raise ConfigError(f"{name} block must be an object")
    return RunConfig(model, em, bool(se_enabled), dict(obj.get("simulate", {})),
                     dict(obj.get("bench", {})))


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_config(obj)


# ---------------------------------------------------------------- ingestion

def _float(cell: str, path, row: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise InputError(f"{path}:{row}: column {col!r}: not a number: {cell!r}") from None
    if not math.isfinite(v):
        raise InputError(f"{path}:{row}: column {col!r}: non-finite value {cell!r}")
    return v


def _open_table(path, required, wanted, role: str):
    """Open a CSV, check its header, and return (file, reader, column indices)."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"cannot read {role} file {path}: {exc.strerror}") from None
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None:
        fh.close()
        raise InputError(f"{path}: empty file")
    header = [h.strip() for h in header]
    if tuple(header[:len(required)]) != required:
        fh.close()
        raise InputError(f"{path}: header must start with {','.join(required)}")
    missing = [c for c in wanted if c not in header]
    if missing:
        fh.close()
        raise ConfigError(f"{role} file {path} has no column(s) {missing}")
    return fh, reader, [header.index(c) for c in wanted], len(header)


def ingest(long_path, surv_path, spec: ModelSpec, drop_post_event: bool = False) -> Dataset:
    """Read and validate the file pair, returning an assembled :class:`Dataset`."""
    # survival file first: it fixes the subject order and each T_i
    fh, reader, widx, width = _open_table(surv_path, SURV_HEADER, spec.survival, "survival")
    ids, T, D, W, index = [], [], [], [], {}
    with fh:
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise InputError(f"{surv_path}:{row_no}: expected {width} fields, got {len(row)}")
            sid = row[0].strip()
            if sid in index:
                raise InputError(f"{surv_path}:{row_no}: duplicate subject id {sid!r} "
                                 f"(first at row {index[sid][1]})")
            t = _float(row[1], surv_path, row_no, "obs_time")
            if t < 0:
                raise InputError(f"{surv_path}:{row_no}: negative obs_time {t}")
            try:
                cause = int(row[2])
            except ValueError:
                raise InputError(f"{surv_path}:{row_no}: cause must be an integer, got {row[2]!r}") from None
            if not 0 <= cause <= spec.n_causes:
                raise InputError(f"{surv_path}:{row_no}: cause {cause} outside 0..{spec.n_causes}")
            index[sid] = (len(ids), row_no)
            ids.append(sid)
            T.append(t)
            D.append(cause)
            W.append([_float(row[j], surv_path, row_no, spec.survival[a]) for a, j in enumerate(widx)])
    if not ids:
        raise InputError(f"{surv_path}: no subjects")

    cov = sorted(set(c for c in spec.fixed + spec.random if c != "time"))
    fh, reader, cidx, width = _open_table(long_path, LONG_HEADER, cov, "longitudinal")
    col = dict(zip(cov, cidx))
    sub, times, y, X, Z = [], [], [], [], []
    seen = {}
    late = []
    with fh:
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise InputError(f"{long_path}:{row_no}: expected {width} fields, got {len(row)}")
            sid = row[0].strip()
            if sid not in index:
                raise InputError(f"{long_path}:{row_no}: id {sid!r} missing from survival file")
            t = _float(row[1], long_path, row_no, "time")
            if t < 0:
                raise InputError(f"{long_path}:{row_no}: negative time {t}")
            key = (sid, t)
            if key in seen:
                raise InputError(f"{long_path}: duplicate (id, time) = ({sid}, {row[1]}) "
                                 f"at rows {seen[key]} and {row_no}")
            seen[key] = row_no
            i = index[sid][0]
            if t > T[i]:
                if drop_post_event:
                    continue
                late.append(row_no)
                continue
            vals = {c: _float(row[col[c]], long_path, row_no, c) for c in cov}
            vals["time"] = t
            sub.append(i)
            times.append(t)
            y.append(_float(row[2], long_path, row_no, "y"))
            X.append(([1.0] if spec.fixed_intercept else []) + [vals[c] for c in spec.fixed])
            Z.append(([1.0] if spec.random_intercept else []) + [vals[c] for c in spec.random])
    if late:
        shown = ", ".join(str(r) for r in late[:20]) + (" ..." if len(late) > 20 else "")
        raise InputError(f"{long_path}: {len(late)} measurement(s) after the subject's obs_time "
                         f"at rows {shown}; pass --drop-post-event to discard them")

    p, q = len(spec.fixed_names), len(spec.random_names)
    try:
        return Dataset(ids, np.array(sub, dtype=np.int64), np.array(times), np.array(y),
                       np.array(X, dtype=float).reshape(len(y), p),
                       np.array(Z, dtype=float).reshape(len(y), q),
                       np.array(W, dtype=float).reshape(len(ids), len(spec.survival)),
                       np.array(T), np.array(D), spec.n_causes,
                       fixed_names=spec.fixed_names, random_names=spec.random_names,
                       surv_names=list(spec.survival))
    except ModelError as exc:
        raise InputError(str(exc)) from None


# ------------------------------------------------------------------ writing

def fmt(x: float) -> str:
    """Shortest decimal string that reads back to the same double."""
    return repr(float(x))


def write_simulated(config: SimConfig, prefix) -> tuple[Path, Path]:
    """Simulate and write ``<prefix>_long.csv`` and ``<prefix>_surv.csv``."""
    a = simulate_arrays(config)
    prefix = str(prefix)
    long_path, surv_path = Path(prefix + "_long.csv"), Path(prefix + "_surv.csv")
    with open(long_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "time", "y", "x2"])
        for s, t, y in zip(a["sub"], a["t"], a["y"]):
            w.writerow([s + 1, fmt(t), fmt(y), fmt(a["x2"][s])])
    with open(surv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "obs_time", "cause", "x1", "x2"])
        for i in range(config.n):
            w.writerow([i + 1, fmt(a["T"][i]), int(a["D"][i]), fmt(a["x1"][i]), fmt(a["x2"][i])])
    return long_path, surv_path


SIM_MODEL = ModelSpec(fixed=["time", "x2"], random=["time"], survival=["x1", "x2"], n_causes=2)


# ------------------------------------------------------------------ reports

def _encode(obj, indent: int = 0) -> str:
    """JSON with every float written to 17 significant digits."""
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(_encode(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _encode(v, indent + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return "%.17g" % v if math.isfinite(v) else "null"
    return json.dumps(obj)


def dumps_report(report: dict) -> str:
    return _encode(report) + "\n"


def build_report(ds: Dataset, fit, se=None, config: RunConfig | None = None,
                 include_timing: bool = True) -> dict:
    from .model import OmegaLayout

    layout = OmegaLayout.for_dataset(ds)
    names = layout.names(ds.fixed_names, ds.random_names, ds.surv_names)
    est = layout.pack(fit.params)
    report = {
        "report_version": REPORT_VERSION,
        "data": {"n_subjects": ds.n, "n_observations": ds.n_total_obs, "n_causes": ds.n_causes,
                 "events_per_cause": [int(np.sum(ds.D == k + 1)) for k in range(ds.n_causes)]},
        "converged": bool(fit.converged),
        "iterations": int(fit.iterations),
        "loglik": float(fit.loglik_trace[-1]),
        "loglik_trace": [float(v) for v in fit.loglik_trace],
        "estimates": {n: float(v) for n, v in zip(names, est)},
        "standard_errors": None if se is None else se.as_dict(),
        "baseline_hazards": [
            {"cause": k + 1, "times": [float(t) for t in bh.knots[::-1]],
             "jumps": [float(j) for j in bh.jumps[::-1]]}
            for k, bh in enumerate(fit.params.baselines)],
    }
    if config is not None:
        e = config.em
        report["settings"] = {"quad_mode": e.quad_mode, "n_q": fit.quad.order, "tol": e.tol,
                              "max_iter": e.max_iter, "convergence_metric": e.convergence_metric,
                              "node_refresh": e.node_refresh, "refresh_tol": e.refresh_tol}
        report["node_stages"] = [int(s) for s in fit.stage_starts]
    if se is not None:
        report["total_score"] = [float(v) for v in se.total_score]
    if include_timing:
        report["timing_seconds"] = {k: float(v) for k, v in fit.timing.items()}
    return report


def format_table(report: dict) -> str:
    """Fixed-width estimate table."""
    ses = report.get("standard_errors") or {}
    lines = [f"{'parameter':<32}{'estimate':>16}{'std.err':>16}"]
    for name, v in report["estimates"].items():
        s = ses.get(name)
        lines.append(f"{name:<32}{v:>16.6g}{(f'{s:.6g}' if s is not None else '-'):>16}")
    lines.append(f"loglik {report['loglik']:.10g}  iterations {report['iterations']}  "
                 f"converged {str(report['converged']).lower()}")
    return "\n".join(lines)
