"""Command-line driver: validate configs, run sweeps, write CSV/JSON curves.

Usage::

    ibdistill run CONFIG.yaml
    ibdistill validate CONFIG.yaml
    ibdistill figures NAME [--out DIR]

Exit status is 0 on success, 1 on a configuration error and 2 when the run
finished but some row is flagged (non-converged, saturated or failing the
distortion bracket audit).
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from . import __version__
from .core_model import (
    DiscreteFamily,
    DomainError,
    GaussianModel,
    entropy_triple,
    gaussian_entropy,
    rd_bounds,
)
from .discrete_ib import histogram_stats, rd_curve_discrete
from .gaussian_ib import rd_curve_gaussian
from .hull import convex_hull_lower  # noqa: F401  (re-exported)
from .scaling import RateSchedule, gap_series
from .streaming import (
    ComprehensiveConfig,
    RateBudget,
    comprehensive_k2_scalar,
    run_online,
    run_twopass,
)

log = logging.getLogger("ibdistill")

EXPERIMENTS = (
    "batch-discrete",
    "batch-gaussian",
    "stream-online",
    "stream-twopass",
    "stream-comprehensive",
    "scaling",
    "bounds",
)

COLUMNS = (
    "experiment",
    "model_id",
    "method",
    "series",
    "k",
    "round",
    "beta",
    "budget",
    "rate",
    "distortion",
    "total_rate",
    "sum_regret",
    "n_active",
    "converged",
    "bracket_low",
    "bracket_high",
    "rate_lower_bound",
    "rate_upper_bound",
    "gap_to_sample",
    "gap_to_theta",
)

# columns carrying information quantities; rescaled when units are bits
INFO_COLUMNS = {
    "rate", "distortion", "total_rate", "sum_regret", "budget", "bracket_low", "bracket_high",
    "rate_lower_bound", "rate_upper_bound", "gap_to_sample", "gap_to_theta",
}

DISTORTION_MEASURE = {
    "batch-discrete": "H(X|T)",
    "batch-gaussian": "h(X|T)",
    "stream-online": "h(X|T_1..T_round); sum_regret accumulates it over rounds",
    "stream-twopass": "h(X|T_1..T_round); sum_regret accumulates it over rounds",
    "stream-comprehensive": "h(X|T_1..T_round); hull rows carry only total_rate and sum_regret",
    "scaling": "h(X|T) at rate budget R(k)",
    "bounds": "H(X|T)",
}

AUDIT_TOL = 1e-9


# -- configuration -----------------------------------------------------------

class ConfigError(Exception):
    """Collects every problem found in a config, each with a location."""

    def __init__(self, problems: list[str]):
        super().__init__("\n".join(problems))
        self.problems = problems


def _node_marks(node, path=(), out=None) -> dict:
    """Map key paths to 1-based (line, column) from a composed YAML tree."""
    if out is None:
        out = {}
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            p = path + (str(key.value),)
            out[p] = (key.start_mark.line + 1, key.start_mark.column + 1)
            _node_marks(value, p, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, value in enumerate(node.value):
            p = path + (i,)
            out[p] = (value.start_mark.line + 1, value.start_mark.column + 1)
            _node_marks(value, p, out)
    return out


@dataclass
class ExperimentConfig:
    experiment: str
    model: dict
    output_path: str
    output_format: str = "csv"
    units: str = "nats"
    k_values: list = field(default_factory=list)
    rounds: list = field(default_factory=list)
    beta_grid: Optional[list] = None
    rate_budgets: Optional[list] = None
    schedules: Optional[list] = None
    k_max: int = 50
    t_size: int = 0
    restarts: int = 1
    seed: Optional[int] = None
    passes: int = 0
    n_starts: int = 32
    max_evals: int = 2000
    raw: dict = field(default_factory=dict)


class _Checker:
    def __init__(self, data: dict, marks: dict, source: str):
        self.data, self.marks, self.source = data, marks, source
        self.problems: list[str] = []

    def where(self, path: tuple) -> str:
        name = ".".join(str(p) for p in path) or "<root>"
        for n in range(len(path), 0, -1):
            if path[:n] in self.marks:
                line, col = self.marks[path[:n]]
                return f"{self.source}:{line}:{col}: {name}"
        return f"{self.source}: {name}"

    def fail(self, path: tuple, msg: str) -> None:
        self.problems.append(f"{self.where(path)}: {msg}")

    def get(self, obj: dict, path: tuple, key: str, kind, required=False, default=None):
        if key not in obj:
            if required:
                self.fail(path, f"missing required field '{key}'")
            return default
        val = obj[key]
        ok = isinstance(val, kind) and not (isinstance(val, bool) and kind is not bool)
        if not ok:
            self.fail(path + (key,), f"expected {getattr(kind, '__name__', kind)}, got {type(val).__name__}")
            return default
        return val

    def number_list(self, val, path: tuple, positive=False, allow_zero=True) -> Optional[list]:
        if isinstance(val, dict):
            try:
                start, stop, num = float(val["start"]), float(val["stop"]), int(val["num"])
            except (KeyError, TypeError, ValueError):
                self.fail(path, "grid mapping needs numeric start, stop and integer num")
                return None
            spacing = val.get("spacing", "log")
            if spacing not in ("log", "linear") or num < 1 or (spacing == "log" and min(start, stop) <= 0):
                self.fail(path, "spacing must be 'log' (positive ends) or 'linear', num >= 1")
                return None
            grid = np.geomspace(start, stop, num) if spacing == "log" else np.linspace(start, stop, num)
            return [float(x) for x in grid]
        if isinstance(val, (int, float)) and not isinstance(val, bool):
            val = [val]
        if not isinstance(val, list) or not val:
            self.fail(path, "expected a non-empty list of numbers or a {start, stop, num} grid")
            return None
        out = []
        for i, x in enumerate(val):
            if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
                self.fail(path + (i,), f"expected a finite number, got {x!r}")
                return None
            if (positive and x <= 0) or (not allow_zero and x == 0) or x < 0:
                self.fail(path + (i,), f"value {x!r} out of range")
                return None
            out.append(float(x))
        return out

    def int_list(self, val, path: tuple, minimum: int) -> list:
        if isinstance(val, int) and not isinstance(val, bool):
            val = [val]
        if not isinstance(val, list) or not val or not all(
                isinstance(x, int) and not isinstance(x, bool) and x >= minimum for x in val):
            self.fail(path, f"expected an integer >= {minimum} or a list of them")
            return []
        return list(val)


def _check_model(c: _Checker, experiment: str, model) -> None:
    path = ("model",)
    if not isinstance(model, dict):
        c.fail(path, "expected a mapping")
        return
    kind = model.get("kind")
    discrete = experiment in ("batch-discrete", "bounds")
    allowed = ("bernoulli-uniform", "bernoulli", "discrete") if discrete else ("gaussian", "scalar")
    if kind not in allowed:
        c.fail(path + ("kind",), f"expected one of {allowed} for {experiment}, got {kind!r}")
        return
    try:
        build_model(model)
    except (DomainError, TypeError, ValueError, KeyError) as exc:
        c.fail(path, f"invalid model: {exc}")


def build_model(model_cfg: dict):
    """GaussianModel or DiscreteFamily from a config mapping."""
    kind = model_cfg["kind"]
    if kind == "scalar":
        return GaussianModel.scalar(float(model_cfg.get("var_x", 1.0)), float(model_cfg.get("var_theta", 1.0)))
    if kind == "gaussian":
        if "seed" in model_cfg:
            if "sigma_x" in model_cfg or "sigma_theta" in model_cfg:
                raise DomainError("give either seed or explicit matrices, not both")
            return GaussianModel.random(int(model_cfg["d"]), int(model_cfg["seed"]))
        sx = np.array(model_cfg["sigma_x"], dtype=float)
        st = np.array(model_cfg["sigma_theta"], dtype=float)
        if "d" in model_cfg and sx.shape != (int(model_cfg["d"]), int(model_cfg["d"])):
            raise DomainError(f"sigma_x has shape {sx.shape}, d={model_cfg['d']}")
        return GaussianModel(sx, st)
    if kind == "bernoulli-uniform":
        return DiscreteFamily.bernoulli_uniform(int(model_cfg.get("grid_size", 101)))
    if kind == "bernoulli":
        return DiscreteFamily.bernoulli(model_cfg["thetas"], model_cfg.get("prior"))
    if kind == "discrete":
        return DiscreteFamily(np.array(model_cfg["params"], dtype=float), np.array(model_cfg["prior"], dtype=float),
                              np.array(model_cfg["likelihood"], dtype=float))
    raise DomainError(f"unknown model kind {kind!r}")


def model_id(model_cfg: dict) -> str:
    kind = model_cfg["kind"]
    if kind == "gaussian" and "seed" in model_cfg:
        return f"gaussian-d{model_cfg['d']}-seed{model_cfg['seed']}"
    if kind == "scalar":
        return f"scalar-{float(model_cfg.get('var_x', 1.0)):g}-{float(model_cfg.get('var_theta', 1.0)):g}"
    if kind == "bernoulli-uniform":
        return f"bernoulli-uniform-{int(model_cfg.get('grid_size', 101))}"
    blob = json.dumps(model_cfg, sort_keys=True).encode()
    return f"{kind}-{hashlib.sha256(blob).hexdigest()[:12]}"


GRID_FIELDS = {
    "batch-discrete": ("beta_grid",),
    "batch-gaussian": ("beta_grid",),
    "bounds": ("beta_grid",),
    "stream-online": ("beta_grid", "rate_budgets"),
    "stream-twopass": ("beta_grid", "rate_budgets"),
    "stream-comprehensive": ("beta_grid",),
    "scaling": ("schedules",),
}


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
        marks = _node_marks(yaml.compose(text))
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        raise ConfigError([f"{loc}: YAML syntax error: {getattr(exc, 'problem', exc)}"]) from None
    if not isinstance(data, dict):
        raise ConfigError([f"{source}: top level must be a mapping"])
    c = _Checker(data, marks, source)

    experiment = c.get(data, (), "experiment", str, required=True)
    if experiment is not None and experiment not in EXPERIMENTS:
        c.fail(("experiment",), f"expected one of {EXPERIMENTS}, got {experiment!r}")
        experiment = None
    known = {"experiment", "model", "output", "units", "k_values", "rounds", "beta_grid",
             "rate_budgets", "schedules", "k_max", "t_size", "restarts", "seed", "passes",
             "n_starts", "max_evals"}
    for key in data:
        if key not in known:
            c.fail((str(key),), "unknown field")

    out = c.get(data, (), "output", dict, required=True, default={})
    out_path = c.get(out, ("output",), "path", str, required=True)
    out_fmt = c.get(out, ("output",), "format", str, default="csv")
    if out_fmt not in ("csv", "json"):
        c.fail(("output", "format"), f"expected 'csv' or 'json', got {out_fmt!r}")
    units = c.get(data, (), "units", str, default="nats")
    if units not in ("nats", "bits"):
        c.fail(("units",), f"expected 'nats' or 'bits', got {units!r}")

    cfg = ExperimentConfig(experiment or "", data.get("model", {}), out_path or "", out_fmt, units,
                           raw=copy.deepcopy(data))
    if "model" not in data:
        c.fail(("model",), "missing required field 'model'")
    if experiment is None:
        raise ConfigError(c.problems)
    _check_model(c, experiment, data.get("model"))

    present = [f for f in ("beta_grid", "rate_budgets", "schedules") if f in data]
    allowed = GRID_FIELDS[experiment]
    if len(present) != 1:
        c.fail((), f"exactly one of {allowed} is required for {experiment}; found {present or 'none'}")
    elif present[0] not in allowed:
        c.fail((present[0],), f"not valid for {experiment}; use one of {allowed}")

    if "beta_grid" in data:
        cfg.beta_grid = c.number_list(data["beta_grid"], ("beta_grid",), positive=True)
        if cfg.beta_grid and any(b2 < b1 for b1, b2 in zip(cfg.beta_grid, cfg.beta_grid[1:])):
            c.fail(("beta_grid",), "must be ascending")
    if "rate_budgets" in data:
        cfg.rate_budgets = c.number_list(data["rate_budgets"], ("rate_budgets",))
    if "schedules" in data:
        scheds = data["schedules"]
        if not isinstance(scheds, list) or not scheds:
            c.fail(("schedules",), "expected a non-empty list of {kind, coefficient, offset}")
        else:
            cfg.schedules = []
            for i, s in enumerate(scheds):
                try:
                    cfg.schedules.append(RateSchedule(str(s["kind"]), float(s.get("coefficient", 1.0)),
                                                      float(s.get("offset", 0.0))))
                except (KeyError, TypeError, ValueError, AttributeError) as exc:
                    c.fail(("schedules", i), f"invalid schedule: {exc}")

    if experiment in ("batch-discrete", "batch-gaussian", "bounds"):
        cfg.k_values = c.int_list(data.get("k_values"), ("k_values",), 1)
    if experiment.startswith("stream-"):
        cfg.rounds = c.int_list(data.get("rounds"), ("rounds",), 2 if experiment == "stream-twopass" else 1)
        if experiment == "stream-comprehensive" and cfg.rounds and cfg.rounds != [2]:
            c.fail(("rounds",), "the comprehensive solution is implemented for rounds = 2 only")
        if experiment == "stream-comprehensive" and isinstance(data.get("model"), dict):
            try:
                if build_model(data["model"]).d != 1:
                    c.fail(("model",), "the comprehensive solution needs a scalar model")
            except Exception:  # already reported by _check_model
                pass
    if experiment == "scaling":
        cfg.k_max = c.get(data, (), "k_max", int, default=50)
        if cfg.k_max is not None and cfg.k_max < 1:
            c.fail(("k_max",), "must be >= 1")

    cfg.passes = c.get(data, (), "passes", int, default=1 if experiment == "stream-twopass" else 0)
    if experiment == "stream-twopass" and cfg.passes is not None and cfg.passes < 1:
        c.fail(("passes",), "must be >= 1")

    stochastic = experiment in ("batch-discrete", "bounds", "stream-comprehensive")
    cfg.seed = c.get(data, (), "seed", int)
    if stochastic and cfg.seed is None:
        c.fail(("seed",), f"a seed is required for {experiment}")
    if experiment in ("batch-discrete", "bounds"):
        cfg.t_size = c.get(data, (), "t_size", int, required=True, default=0)
        cfg.restarts = c.get(data, (), "restarts", int, default=1)
        if cfg.t_size is not None and cfg.t_size < 1:
            c.fail(("t_size",), "must be >= 1")
        if cfg.restarts is not None and cfg.restarts < 1:
            c.fail(("restarts",), "must be >= 1")
    cfg.n_starts = c.get(data, (), "n_starts", int, default=32)
    cfg.max_evals = c.get(data, (), "max_evals", int, default=2000)

    if c.problems:
        raise ConfigError(c.problems)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"{p}: cannot read: {exc.strerror}"]) from None
    return parse_config(text, str(p))


# -- experiments ---------------------------------------------------------------

def _row(**kw) -> dict:
    row = {c: None for c in COLUMNS}
    for key, val in kw.items():
        if key not in row:
            raise KeyError(key)
        row[key] = val
    return row


def _run_batch_discrete(cfg: ExperimentConfig, fam: DiscreteFamily, with_bounds: bool) -> list:
    rows = []
    h_x = fam.entropy_x()
    for k in cfg.k_values:
        h_xk = histogram_stats(fam, k).cond_entropy_x()
        pts = rd_curve_discrete(fam, k, cfg.beta_grid, cfg.t_size, seed=cfg.seed, restarts=cfg.restarts)
        hull = set(convex_hull_lower([(p.rate, p.distortion) for p in pts], indices=True))
        for i, p in enumerate(pts):
            extra = {}
            if with_bounds:
                lo, hi = rd_bounds(h_x, p.distortion, fam.entropy_theta(), fam.alphabet_size)
                extra = dict(rate_lower_bound=lo, rate_upper_bound=hi)
            rows.append(_row(method="discrete-ib", series="hull" if i in hull else "point", k=k, beta=p.beta,
                             rate=p.rate, distortion=p.distortion, n_active=p.n_active,
                             converged=p.converged, bracket_low=h_xk, bracket_high=h_x, **extra))
    return rows


def _run_batch_gaussian(cfg: ExperimentConfig, model: GaussianModel) -> list:
    rows = []
    for k in cfg.k_values:
        h_x, h_xk, _ = entropy_triple(model, k)
        for p in rd_curve_gaussian(model, k, cfg.beta_grid):
            lo_bound, _ = rd_bounds(h_x, p.distortion)
            rows.append(_row(method="gaussian-ib", series="curve", k=k, beta=p.beta, rate=p.rate,
                             distortion=p.distortion, n_active=p.n_active, converged=True,
                             bracket_low=h_xk, bracket_high=h_x, rate_lower_bound=lo_bound))
    return rows


def _stream_rows(state, method: str, beta, budget, brackets) -> list:
    rows = []
    total, regret = 0.0, 0.0
    for l, (rate, dist) in enumerate(zip(state.rates, state.distortions), start=1):
        total += rate
        regret += dist
        ok = not state.saturated[l - 1] if l - 1 < len(state.saturated) else True
        rows.append(_row(method=method, series="round", k=l, round=l, beta=state.betas[l - 1],
                         budget=budget, rate=rate, distortion=dist, total_rate=total, sum_regret=regret,
                         n_active=state.blocks[l - 1].shape[0], converged=ok,
                         bracket_low=brackets[l - 1][1], bracket_high=brackets[l - 1][0]))
    return rows


def _policies(cfg: ExperimentConfig, to_nats: float):
    if cfg.beta_grid is not None:
        return [(float(b), b, None) for b in cfg.beta_grid]
    return [(RateBudget(r * to_nats), None, r * to_nats) for r in cfg.rate_budgets]


def _run_stream(cfg: ExperimentConfig, model: GaussianModel, to_nats: float) -> list:
    rows = []
    for K in cfg.rounds:
        brackets = [entropy_triple(model, l)[:2] for l in range(1, K + 1)]
        for policy, beta, budget in _policies(cfg, to_nats):
            if cfg.experiment == "stream-online" or cfg.experiment == "stream-twopass":
                rows += _stream_rows(run_online(model, K, policy), "online", beta, budget, brackets)
            if cfg.experiment == "stream-twopass":
                rows += _stream_rows(run_twopass(model, K, policy, cfg.passes), f"twopass-{cfg.passes}",
                                     beta, budget, brackets)
    return rows


def _run_comprehensive(cfg: ExperimentConfig, model: GaussianModel) -> list:
    rows = []
    brackets = [entropy_triple(model, l)[:2] for l in (1, 2)]
    low_regret = brackets[0][1] + brackets[1][1]
    for beta in cfg.beta_grid:
        rows += _stream_rows(run_online(model, 2, beta), "online", beta, None, brackets)
        if cfg.passes:
            rows += _stream_rows(run_twopass(model, 2, beta, cfg.passes), f"twopass-{cfg.passes}",
                                 beta, None, brackets)
    res = comprehensive_k2_scalar(model, cfg.beta_grid,
                                  ComprehensiveConfig(cfg.n_starts, cfg.max_evals, cfg.seed))
    for w, (rate, regret), stalled in zip(res.weights, res.points, res.flags):
        rows.append(_row(method="comprehensive", series="point", k=2, round=2, beta=w, total_rate=rate,
                         sum_regret=regret, converged=not stalled))
    for rate, regret in res.hull:
        rows.append(_row(method="comprehensive", series="hull", k=2, round=2, total_rate=rate,
                         sum_regret=regret, converged=True))
    for r in rows:
        r["_regret_bracket"] = (low_regret, 2.0 * brackets[0][0])
    return rows


def _run_scaling(cfg: ExperimentConfig, model: GaussianModel) -> list:
    rows = []
    for s in cfg.schedules:
        for rec in gap_series(model, s, cfg.k_max):
            rows.append(_row(method="scaling", series=s.label, k=rec.k, beta=rec.beta, budget=rec.rate,
                             rate=rec.rate, distortion=rec.h_x_given_t, converged=rec.reached,
                             bracket_low=rec.h_x_given_sample, bracket_high=gaussian_entropy(model.sigma_marginal),
                             gap_to_sample=rec.gap_t_xk, gap_to_theta=rec.gap_t_theta))
    return rows


def run_rows(cfg: ExperimentConfig) -> list:
    """All output rows in nats and in deterministic grid order."""
    model = build_model(cfg.model)
    mid = model_id(cfg.model)
    to_nats = math.log(2.0) if cfg.units == "bits" else 1.0
    exp = cfg.experiment
    if exp == "batch-discrete":
        rows = _run_batch_discrete(cfg, model, with_bounds=False)
    elif exp == "bounds":
        rows = _run_batch_discrete(cfg, model, with_bounds=True)
    elif exp == "batch-gaussian":
        rows = _run_batch_gaussian(cfg, model)
    elif exp in ("stream-online", "stream-twopass"):
        rows = _run_stream(cfg, model, to_nats)
    elif exp == "stream-comprehensive":
        rows = _run_comprehensive(cfg, model)
    else:
        rows = _run_scaling(cfg, model)
    for r in rows:
        r["experiment"] = exp
        r["model_id"] = mid
    return rows


def audit(rows: list) -> list[str]:
    """Distortions must sit inside their [h(X|X^k), h(X)] bracket."""
    problems = []
    for i, r in enumerate(rows):
        d, lo, hi = r["distortion"], r["bracket_low"], r["bracket_high"]
        if d is not None and lo is not None and not (lo - AUDIT_TOL <= d <= hi + AUDIT_TOL):
            problems.append(f"row {i}: distortion {d!r} outside [{lo!r}, {hi!r}]")
        br = r.get("_regret_bracket")
        s = r["sum_regret"]
        if br is not None and s is not None and r["round"] == 2 and not (br[0] - AUDIT_TOL <= s <= br[1] + AUDIT_TOL):
            problems.append(f"row {i}: sum_regret {s!r} outside [{br[0]!r}, {br[1]!r}]")
    return problems


def _fmt(val) -> str:
    if val is None:
        return ""
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, (int, np.integer)):
        return str(int(val))
    if isinstance(val, (float, np.floating)):
        return format(float(val), ".17g")
    return str(val)


def _json_val(val):
    if val is None or isinstance(val, (bool, str)):
        return val
    if isinstance(val, (int, np.integer)):
        return int(val)
    v = float(val)
    return v if math.isfinite(v) else format(v, ".17g")


def _convert_units(rows: list, units: str) -> list:
    scale = 1.0 / math.log(2.0) if units == "bits" else 1.0
    out = []
    for r in rows:
        o = {}
        for c in COLUMNS:
            v = r[c]
            if c in INFO_COLUMNS and v is not None and scale != 1.0:
                v = float(v) * scale
            o[c] = v
        out.append(o)
    return out


def render(rows: list, fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in COLUMNS])
        return buf.getvalue()
    # json floats go through repr, which round-trips exactly
    records = [{c: _json_val(r[c]) for c in COLUMNS} for r in rows]
    return json.dumps(records, indent=1) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def run_experiment(cfg: ExperimentConfig, out_path: Optional[Path] = None) -> int:
    """Run, write data plus a ``.meta.json`` sidecar, return the exit code."""
    t0 = time.perf_counter()
    rows = run_rows(cfg)
    problems = audit(rows)
    for p in problems:
        log.error("audit: %s", p)
    flagged = sum(1 for r in rows if r["converged"] is False)
    if flagged:
        log.warning("%d row(s) flagged as not converged", flagged)
    out_rows = _convert_units(rows, cfg.units)
    path = Path(out_path or cfg.output_path)
    _write(path, render(out_rows, cfg.output_format))
    meta = {
        "config": cfg.raw,
        "software": {"package": "ibdistill", "version": __version__},
        "columns": list(COLUMNS),
        "units": cfg.units,
        "distortion_measure": DISTORTION_MEASURE[cfg.experiment],
        "rows": len(rows),
        "flagged_rows": flagged,
        "audit_problems": problems,
        "wall_clock_seconds": round(time.perf_counter() - t0, 3),
    }
    if cfg.experiment == "scaling":
        meta["fixture_note"] = "model constants and rate schedules are chosen fixtures, not published values"
    _write(path.with_name(path.name + ".meta.json"), json.dumps(meta, indent=1, sort_keys=True) + "\n")
    log.info("wrote %d rows to %s", len(rows), path)
    return 2 if (flagged or problems) else 0


# -- built-in figure configs --------------------------------------------------

def _log_grid(start, stop, num):
    return {"start": start, "stop": stop, "num": num, "spacing": "log"}


FIGURES: dict[str, dict[str, Any]] = {
    "rate-discrete": {
        "experiment": "batch-discrete",
        "model": {"kind": "bernoulli-uniform", "grid_size": 101},
        "k_values": [4, 10, 20],
        "beta_grid": _log_grid(1.05, 200.0, 25),
        "t_size": 5, "restarts": 3, "seed": 0,
    },
    "rate-dist": {
        "experiment": "batch-gaussian",
        "model": {"kind": "gaussian", "d": 6, "seed": 0},
        "k_values": [5, 20, 100],
        "beta_grid": _log_grid(1.01, 1000.0, 40),
    },
    "compare-stream": {
        "experiment": "stream-comprehensive",
        "model": {"kind": "scalar", "var_x": 1.0, "var_theta": 1.0},
        "rounds": 2,
        "beta_grid": _log_grid(0.05, 1.0e4, 160),
        "seed": 0,
    },
    "rate-relstream": {
        "experiment": "stream-online",
        "model": {"kind": "gaussian", "d": 10, "seed": 0},
        "rounds": 30,
        "rate_budgets": [4, 8, 10, 14, 16],
        "units": "bits",
    },
    "rate-dis-recursive": {
        "experiment": "stream-twopass",
        "model": {"kind": "gaussian", "d": 10, "seed": 0},
        "rounds": [3, 4],
        "beta_grid": _log_grid(1.02, 300.0, 60),
        "passes": 1,
    },
    "rate-dis-com-rcr": {
        "experiment": "stream-comprehensive",
        "model": {"kind": "scalar", "var_x": 1.0, "var_theta": 1.0},
        "rounds": 2,
        "beta_grid": _log_grid(0.05, 1.0e4, 160),
        "passes": 1,
        "seed": 0,
    },
    "rate-sample": {
        "experiment": "scaling",
        "model": {"kind": "scalar", "var_x": 1.0, "var_theta": 1.0},
        "k_max": 50,
        "schedules": [
            {"kind": "constant", "coefficient": 2.0},
            {"kind": "constant", "coefficient": 1.0},
            {"kind": "log", "coefficient": 0.5},
            {"kind": "log", "coefficient": 1.0},
            {"kind": "log", "coefficient": 2.0},
            {"kind": "sqrt", "coefficient": 0.5},
            {"kind": "linear", "coefficient": 0.1},
        ],
    },
    "rd-bounds": {
        "experiment": "bounds",
        "model": {"kind": "bernoulli-uniform", "grid_size": 101},
        "k_values": [4],
        "beta_grid": _log_grid(1.05, 200.0, 25),
        "t_size": 5, "restarts": 3, "seed": 0,
    },
}


def figure_config(name: str, out_dir: str | Path, fmt: str = "csv") -> ExperimentConfig:
    if name not in FIGURES:
        raise ConfigError([f"unknown figure {name!r}; choose from {sorted(FIGURES)}"])
    data = copy.deepcopy(FIGURES[name])
    data["output"] = {"path": str(Path(out_dir) / f"{name}.{fmt}"), "format": fmt}
    return parse_config(yaml.safe_dump(data, sort_keys=False), f"<figure {name}>")


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ibdistill", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--out", help="override the output path")
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    f = sub.add_parser("figures", help="run a built-in figure config")
    f.add_argument("name", choices=sorted(FIGURES))
    f.add_argument("--out", default="figures_out", help="output directory")
    f.add_argument("--format", choices=("csv", "json"), default="csv")
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "figures":
            cfg = figure_config(args.name, args.out, args.format)
        else:
            cfg = load_config(args.config)
    except ConfigError as exc:
        for p in exc.problems:
            print(p, file=sys.stderr)
        return 1
    if args.command == "validate":
        print(f"{args.config}: ok ({cfg.experiment})")
        return 0
    out = Path(args.out) if args.command == "run" and args.out else None
    return run_experiment(cfg, out)


if __name__ == "__main__":
    sys.exit(main())
