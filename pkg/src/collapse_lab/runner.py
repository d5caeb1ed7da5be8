"""Experiment runner: config parsing, dispatch, verdicts and deterministic reports."""
from __future__ import annotations

import copy
import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .asymptotics import (
    ball_volume,
    continued_fraction_of,
    decay_fit,
    inj_profile,
    pigeonhole_k,
    plateau_sequence,
    weighted_curvature_integral,
)
from .errors import ConfigError, LabError
from .fibration import (
    fiber_average_metric,
    fiber_extract,
    gh_chart,
    gh_defect,
    oneill_base_curvature,
    smooth_fibration,
    submersion_diagnostics,
)
from .geodesics import orthonormal_frame
from .manifold import curvature_derivative_norm, curvature_norm
from .models import (
    Euclidean,
    FlatScrewQuotient,
    PerturbedTaubNut,
    TaubNut,
    as_angle,
    deck_distance,
    flat_inj,
    liouville_angle,
    loop_length,
    model_from_config,
)
from .parallel import ordered_map
from .pseudogroup import build_pseudo_group, fundamental_domain_volume, holonomy_defect, lift_count, translation_defect

SCHEMA_VERSION = "collapse-lab-report/1"
SUBCOMMANDS = (
    "inj-profile",
    "volume-growth",
    "curvature-decay",
    "pseudo-group",
    "holonomy-decay",
    "gh-chart",
    "fibration",
    "diophantine",
)
TOP_LEVEL_KEYS = {"seed", "model", "experiments", "name"}
ROW_ERRORS = (LabError, ValueError, ArithmeticError, np.linalg.LinAlgError, NotImplementedError)
SQRT_BOUND_CONSTANT = math.sqrt(1 + 4 * math.pi**2) / 2


# ----------------------------------------------------------------------------
# report types


@dataclass
class Table:
    name: str
    columns: list
    rows: list = field(default_factory=list)


@dataclass
class Verdict:
    name: str
    value: object
    comparison: str
    bound: object
    config_path: str
    passed: bool
    note: str = ""

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "value": self.value,
            "comparison": self.comparison,
            "bound": self.bound,
            "config_path": self.config_path,
            "verdict": "PASS" if self.passed else "FAIL",
            "note": self.note,
        }


@dataclass
class ExperimentResult:
    name: str
    model: dict
    params: dict
    tables: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)
    verdicts: list = field(default_factory=list)
    details: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and all(v.passed for v in self.verdicts)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "model": self.model,
            "params": self.params,
            "tables": {t.name: {"columns": t.columns, "rows": t.rows} for t in self.tables},
            "fits": self.fits,
            "verdicts": [v.to_json() for v in self.verdicts],
            "details": self.details,
            "error": self.error,
            "status": "PASS" if self.passed else "FAIL",
        }


@dataclass
class ExperimentConfig:
    name: str
    model: dict
    params: dict
    seed: int


@dataclass
class Report:
    subcommand: str
    config: dict
    experiments: list
    threads: int
    wall_time: float
    timestamp: str

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.experiments)

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "tool": {"name": "collapse-lab", "version": __version__},
            "subcommand": self.subcommand,
            "config": self.config,
            "experiments": [e.to_json() for e in self.experiments],
            "status": "PASS" if self.passed else "FAIL",
            # everything that legitimately varies between identical runs lives here
            "timestamp": {"utc": self.timestamp, "wall_time_s": self.wall_time, "threads": self.threads},
        }


# ----------------------------------------------------------------------------
# config parsing


def _grid(value, path):
    """A list of numbers, or {"geomspace" | "linspace": [start, stop, num]}."""
    if isinstance(value, list):
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(path, "grid entries must be numbers")
        return [float(v) for v in value]
    if isinstance(value, dict) and len(value) == 1:
        (kind, grid_args), = value.items()
        if kind in ("geomspace", "linspace") and isinstance(grid_args, list) and len(grid_args) == 3:
            lo, hi, n = grid_args
            if not isinstance(n, int) or n < 0:
                raise ConfigError(f"{path}.{kind}[2]", "expected a non-negative integer")
            if kind == "geomspace" and (lo <= 0 or hi <= 0):
                raise ConfigError(f"{path}.{kind}", "geomspace needs positive endpoints")
            fn = np.geomspace if kind == "geomspace" else np.linspace
            return [float(v) for v in fn(lo, hi, n)] if n else []
    raise ConfigError(path, 'expected a list of numbers or {"geomspace"|"linspace": [start, stop, num]}')


def _vector(value, path, length=None):
    if not (isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
        raise ConfigError(path, "expected a list of numbers")
    if length is not None and len(value) != length:
        raise ConfigError(path, f"expected {length} components")
    return [float(v) for v in value]


def _merge(defaults: dict, user: dict, path: str) -> dict:
    if not isinstance(user, dict):
        raise ConfigError(path, "expected an object")
    out = copy.deepcopy(defaults)
    for key, val in user.items():
        if key not in defaults:
            raise ConfigError(f"{path}.{key}", f"unknown key; expected one of {sorted(defaults)}")
        if isinstance(defaults[key], dict) and key in ("bounds",):
            out[key] = _merge(defaults[key], val, f"{path}.{key}")
        else:
            out[key] = val
    return out


def _family(model) -> str:
    if isinstance(model, FlatScrewQuotient):
        return "flat_screw"
    if model.flat:
        return "euclidean"
    return "curved"


def _rational_q(model):
    if isinstance(model, FlatScrewQuotient) and model.theta.ratio is not None and model.theta.ratio.denominator <= 10**6:
        return model.theta.ratio.denominator
    return None


def default_params(name: str, model) -> dict:
    """Every parameter and bound an experiment uses; the resolved set is echoed in the report."""
    fam = _family(model)
    flat = fam != "curved"
    dim = model.dim
    if name == "inj-profile":
        q = _rational_q(model)
        return {
            "radii": {"geomspace": [10.0, 100.0, 10]},
            "direction": [1.0, 0.0, 0.0] if flat else [0.6, 0.8, 0.0],
            "L_max": None,
            "bounds": {
                "pinching_max": 1.2,
                "sqrt_constant": SQRT_BOUND_CONSTANT if fam == "flat_screw" else None,
                "plateau_tol": 0.0 if q is not None else None,
                "max_row_errors": 0,
            },
        }
    if name == "volume-growth":
        return {
            "radii": {"geomspace": [10.0, 100.0, 6]} if fam == "curved" else (
                {"geomspace": [2.0, 10.0, 5]} if fam == "flat_screw" else {"geomspace": [1.0, 4.0, 5]}),
            "center": [40.0, 0.0, 0.0] if fam == "flat_screw" else [0.0] * dim,
            "samples": 200_000,
            "power": 2.0 if fam == "flat_screw" else 3.0,
            "bounds": {"band": 3.0, "max_rel_std_error": 0.02, "exponent": None, "max_row_errors": 0},
        }
    if name == "curvature-decay":
        return {
            "radii": {"geomspace": [10.0, 100.0, 10]},
            "direction": [0.6, 0.8, 0.0],
            "derivative": True,
            "weighted_integral": None,
            "bounds": {
                "exponent": None if flat else [-3.2, -2.8],
                "max_residual": None if flat else 0.1,
                "max_value": 1e-12 if flat else None,
                "max_row_errors": 0,
            },
        }
    if name == "pseudo-group":
        return {
            "point": [3.0, 0.0, 0.0] if flat else [50.0, 0.0, 0.0, 0.0][:dim],
            "rho": 12.0 if flat else 16.5,
            "strategy": "exact",
            "fundamental_volume_samples": 200_000 if fam == "flat_screw" else 0,
            "defect_samples": 1000 if not flat else 200,
            "lift_point": None,
            "bounds": {
                "oracle_length_tol": 1e-12 if fam == "flat_screw" else None,
                "volume_rel_tol": 0.02 if fam == "flat_screw" else None,
                "max_defect_violations": 0,
                "defect_abs_tol": 1e-12,
            },
        }
    if name == "holonomy-decay":
        return {
            "radii": {"geomspace": [20.0, 200.0, 8]},
            "direction": [0.6, 0.8, 0.0],
            "bounds": {"max_exponent": None if flat else -1.8, "max_row_errors": 0},
        }
    if name == "gh-chart":
        return {
            "radii": {"geomspace": [25.0, 100.0, 5]},
            "direction": [1.0, 0.0, 0.0],
            "kappa": 0.25,
            "mode": "smooth",
            "n_pairs": 1000,
            "local_radius": 2.0,
            "bounds": {"exponent": [-0.2, 0.2], "max_defect": None, "max_row_errors": 0},
        }
    if name == "fibration":
        offsets = ([[0.1, 0.2, -0.1, 0.5], [-0.2, 0.1, 0.2, 2.0]] if dim == 4 else [[0.2, 0.1, 0.3]])
        return {
            "radii": {"geomspace": [25.0, 100.0, 5]},
            "direction": [1.0, 0.0, 0.0],
            "kappa": 0.25,
            "offsets": offsets,
            "fiber_base_value": [0.3, -0.2, 0.1][: dim - 1],
            "extract_fibers": True,
            "oneill": not flat,
            "averaging_models": [{"type": "taub_nut"}, {"type": "perturbed_taub_nut", "delta": 0.1}],
            "averaging_radii": {"geomspace": [10.0, 160.0, 5]},
            "averaging_direction": [1.0, 0.3, 0.2],
            "bounds": {
                "c_max": 1.0,
                "vertical_norm_max": 1e-3,
                "kernel_angle_max": 0.05,
                "hessian_exponent_max": None if flat else -1.5,
                "fiber_rel_tol": 0.01 if flat else 0.02,
                "base_sectional_exponent_max": None if flat else -2.5,
                "bracket_exponent_max": None if flat else -1.8,
                "vertical_gradient_exponent_max": None if flat else -1.5,
                "invariant_averaging_tol": 1e-6,
                "perturbed_averaging_exponent_max": -1.8,
                "flow_invariance_tol": 1e-6,
                "max_row_errors": 0,
            },
        }
    if name == "diophantine":
        return {
            "liouville_terms": None,
            "cf_depth": 20,
            "plateau_terms": 4,
            "alpha": 0.05,
            "pigeonhole_t": [1.0, 9.0, 100.0, 1e4],
            # "auto": 4 unless the tested angle is the model's small-denominator rational
            "bounds": {"min_decreasing_terms": "auto"},
        }
    raise ConfigError("subcommand", f"unknown experiment {name!r}")


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc.msg} at line {exc.lineno}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be an object")
    return data


def resolve(subcommand: str, raw: dict, seed_override: int | None = None) -> list[ExperimentConfig]:
    """Validate the raw config and produce one resolved ExperimentConfig per experiment to run."""
    for key in raw:
        if key not in TOP_LEVEL_KEYS:
            raise ConfigError(key, f"unknown top-level key; expected one of {sorted(TOP_LEVEL_KEYS)}")
    seed = seed_override if seed_override is not None else raw.get("seed")
    if seed is None:
        raise ConfigError("seed", "a seed is required (config or --seed)")
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ConfigError("seed", "expected an integer in [0, 2^64)")
    sections = raw.get("experiments", {})
    if not isinstance(sections, dict):
        raise ConfigError("experiments", "expected an object keyed by experiment name")
    for key in sections:
        if key not in SUBCOMMANDS:
            raise ConfigError(f"experiments.{key}", "unknown experiment")
    if subcommand == "all":
        names = [n for n in SUBCOMMANDS if n in sections]
        if not names:
            raise ConfigError("experiments", "no experiments to run")
    elif subcommand in SUBCOMMANDS:
        names = [subcommand]
    else:
        raise ConfigError("subcommand", f"unknown subcommand {subcommand!r}")
    out = []
    for name in names:
        user = dict(sections.get(name, {}) or {})
        if not isinstance(user, dict):
            raise ConfigError(f"experiments.{name}", "expected an object")
        model_desc = user.pop("model", raw.get("model"))
        model_path = f"experiments.{name}.model" if "model" in sections.get(name, {}) else "model"
        if model_desc is None:
            raise ConfigError("model", "a model description is required")
        model = model_from_config(model_desc, model_path)
        params = _merge(default_params(name, model), user, f"experiments.{name}")
        out.append(ExperimentConfig(name, model_desc, params, seed))
    return out


def _derived_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, np.uint64)[0])


# ----------------------------------------------------------------------------
# helpers


def _point(model, r: float, direction) -> np.ndarray:
    d = np.asarray(direction[:3], dtype=float)
    d = d / np.linalg.norm(d)
    X = np.zeros(model.dim)
    X[:3] = r * d
    return X


def _row_error(exc) -> str:
    return f"{type(exc).__name__}: {exc}"


def _count_errors(rows) -> int:
    return sum(1 for r in rows if r.get("error"))


def _fit(res: ExperimentResult, key: str, pairs):
    """Fit and store under res.fits[key]; returns the DecayFit or None."""
    try:
        fit = decay_fit(pairs)
    except ROW_ERRORS as exc:
        res.fits[key] = {"error": _row_error(exc)}
        return None
    res.fits[key] = fit.to_json()
    return fit


def _check(res, name, value, comparison, bound, path, note=""):
    if comparison == "<=":
        ok = value is not None and value <= bound
    elif comparison == ">=":
        ok = value is not None and value >= bound
    elif comparison == "in":
        ok = value is not None and bound[0] <= value <= bound[1]
    elif comparison == "==":
        ok = value == bound
    else:
        raise ValueError(comparison)
    res.verdicts.append(Verdict(name, value, comparison, bound, path, bool(ok), note))


def _fit_check(res, name, fit, comparison, bound, path):
    if bound is None:
        return
    if fit is None:
        res.verdicts.append(Verdict(name, None, comparison, bound, path, False, "fit unavailable"))
    else:
        _check(res, name, fit.exponent, comparison, bound, path)


def _row_error_check(res, rows, bounds, name):
    _check(res, "row_errors", _count_errors(rows), "<=", bounds["max_row_errors"],
           f"experiments.{name}.bounds.max_row_errors")


def _finite_pairs(rows, x, y):
    return [(r[x], r[y]) for r in rows if not r.get("error") and np.isfinite(r[y]) and r[y] > 0]


# ----------------------------------------------------------------------------
# experiments


def run_inj_profile(cfg: ExperimentConfig, model, threads: int) -> ExperimentResult:
    p = cfg.params
    b = p["bounds"]
    path = f"experiments.{cfg.name}.bounds"
    radii = _grid(p["radii"], f"experiments.{cfg.name}.radii")
    direction = _vector(p["direction"], f"experiments.{cfg.name}.direction", 3)
    res = ExperimentResult(cfg.name, model.describe(), p)
    table = Table("inj_profile", ["r", "inj", "infinite", "incomplete", "error"])

    def row(r):
        try:
            s = inj_profile(model, [_point(model, r, direction)], p["L_max"])[0]
            return {"r": s.r, "inj": s.inj, "infinite": s.infinite, "incomplete": s.incomplete, "error": ""}
        except ROW_ERRORS as exc:
            return {"r": r, "inj": math.nan, "infinite": False, "incomplete": True, "error": _row_error(exc)}

    table.rows = ordered_map(row, radii, threads)
    res.tables.append(table)
    good = [r for r in table.rows if not r["error"] and not r["infinite"]]
    if good and b["pinching_max"] is not None:
        vals = [r["inj"] for r in good]
        _check(res, "pinching", max(vals) / min(vals), "<=", b["pinching_max"], f"{path}.pinching_max")
    if good and b["sqrt_constant"] is not None:
        worst = max(r["inj"] / math.sqrt(r["r"]) for r in good)
        _check(res, "sqrt_bound", worst, "<=", b["sqrt_constant"], f"{path}.sqrt_constant")
    q = _rational_q(model)
    if q is not None and b["plateau_tol"] is not None:
        start = q / math.sin(math.pi / q) if q > 1 else 0.0
        on = [r for r in good if r["r"] >= start]
        dev = max((abs(r["inj"] - q / 2) for r in on), default=0.0)
        _check(res, "plateau", dev, "<=", b["plateau_tol"], f"{path}.plateau_tol",
               f"{len(on)} rows with t >= {start:.6g}, plateau value {q / 2}")
    _row_error_check(res, table.rows, b, cfg.name)
    return res


def run_volume_growth(cfg: ExperimentConfig, model, threads: int) -> ExperimentResult:
    p = cfg.params
    b = p["bounds"]
    path = f"experiments.{cfg.name}.bounds"
    radii = _grid(p["radii"], f"experiments.{cfg.name}.radii")
    center = np.array(_vector(p["center"], f"experiments.{cfg.name}.center", model.dim))
    power = float(p["power"])
    res = ExperimentResult(cfg.name, model.describe(), p)
    table = Table("volume_growth", ["t", "volume", "std_error", "normalized", "error"])
    for i, t in enumerate(radii):
        try:
            v = ball_volume(model, center, t, samples=int(p["samples"]), seed=_derived_seed(cfg.seed, 1, i),
                            threads=threads)
            table.rows.append({"t": t, "volume": v.value, "std_error": v.std_error,
                               "normalized": v.value / t**power, "error": ""})
        except ROW_ERRORS as exc:
            table.rows.append({"t": t, "volume": math.nan, "std_error": math.nan, "normalized": math.nan,
                               "error": _row_error(exc)})
    res.tables.append(table)
    good = [r for r in table.rows if not r["error"]]
    fit = _fit(res, "volume", _finite_pairs(table.rows, "t", "volume")) if len(good) >= 5 else None
    if len(good) < 5:
        res.fits["volume"] = {"error": f"{len(good)} rows, a fit needs at least 5"}
    _fit_check(res, "volume_exponent", fit, "in", b["exponent"], f"{path}.exponent")
    if good and b["band"] is not None:
        norm = [r["normalized"] for r in good]
        ratio = max(norm) / min(norm) if min(norm) > 0 else math.inf
        _check(res, "normalized_band", ratio, "<=", b["band"], f"{path}.band", f"volume / t^{power}")
    if good and b["max_rel_std_error"] is not None:
        worst = max(r["std_error"] / r["volume"] if r["volume"] > 0 else math.inf for r in good)
        _check(res, "rel_std_error", worst, "<=", b["max_rel_std_error"], f"{path}.max_rel_std_error")
    _row_error_check(res, table.rows, b, cfg.name)
    return res


def run_curvature_decay(cfg: ExperimentConfig, model, threads: int) -> ExperimentResult:
    p = cfg.params
    b = p["bounds"]
    path = f"experiments.{cfg.name}.bounds"
    radii = _grid(p["radii"], f"experiments.{cfg.name}.radii")
    direction = _vector(p["direction"], f"experiments.{cfg.name}.direction", 3)
    res = ExperimentResult(cfg.name, model.describe(), p)
    table = Table("curvature_decay", ["r", "curvature_norm", "curvature_derivative_norm", "error"])

    def row(r):
        X = _point(model, r, direction)
        try:
            c = curvature_norm(model, X)
            dc = curvature_derivative_norm(model, X, 1) if p["derivative"] else math.nan
            return {"r": float(model.radius(X)), "curvature_norm": c, "curvature_derivative_norm": dc, "error": ""}
        except ROW_ERRORS as exc:
            return {"r": r, "curvature_norm": math.nan, "curvature_derivative_norm": math.nan,
                    "error": _row_error(exc)}

    table.rows = ordered_map(row, radii, threads)
    res.tables.append(table)
    good = [r for r in table.rows if not r["error"]]
    if b["exponent"] is not None or b["max_residual"] is not None:
        fit = _fit(res, "curvature", _finite_pairs(table.rows, "r", "curvature_norm"))
        _fit_check(res, "curvature_exponent", fit, "in", b["exponent"], f"{path}.exponent")
        if b["max_residual"] is not None:
            _check(res, "curvature_fit_residual", None if fit is None else fit.residual, "<=",
                   b["max_residual"], f"{path}.max_residual")
    if p["derivative"] and any(r["curvature_derivative_norm"] > 0 for r in good):
        _fit(res, "curvature_derivative", _finite_pairs(table.rows, "r", "curvature_derivative_norm"))
    if b["max_value"] is not None and good:
        _check(res, "max_curvature", max(r["curvature_norm"] for r in good), "<=", b["max_value"],
               f"{path}.max_value")
    wi = p["weighted_integral"]
    if wi is not None:
        if not isinstance(wi, dict) or set(wi) != {"r_min", "r_max", "samples"}:
            raise ConfigError(f"experiments.{cfg.name}.weighted_integral",
                              'expected {"r_min": ..., "r_max": ..., "samples": ...}')
        est = weighted_curvature_integral(model, float(wi["r_min"]), float(wi["r_max"]), int(wi["samples"]),
                                          seed=_derived_seed(cfg.seed, 2), threads=threads)
        res.details["weighted_integral"] = {"value": est.value, "std_error": est.std_error, **wi}
    _row_error_check(res, table.rows, b, cfg.name)
    return res


def run_pseudo_group(cfg: ExperimentConfig, model, threads: int) -> ExperimentResult:
    p = cfg.params
    b = p["bounds"]
    path = f"experiments.{cfg.name}.bounds"
    x = np.array(_vector(p["point"], f"experiments.{cfg.name}.point", model.dim))
    rho = float(p["rho"])
    res = ExperimentResult(cfg.name, model.describe(), p)
    ball = build_pseudo_group(model, x, rho, seed=_derived_seed(cfg.seed, 3), strategy=p["strategy"])
    d = model.dim
    g = ball.metric0
    table = Table("pseudo_group", ["word_power", "length", "incomplete"] + [f"v{i}" for i in range(d)])
    for e in ball.elements:
        row = {"word_power": e.word_power, "length": float(math.sqrt(e.lift_vector @ g @ e.lift_vector)),
               "incomplete": e.incomplete}
        row.update({f"v{i}": float(e.lift_vector[i]) for i in range(d)})
        table.rows.append(row)
    res.tables.append(table)
    res.details["lifted_ball"] = ball.to_json()

    if isinstance(model, FlatScrewQuotient) and b["oracle_length_tol"] is not None:
        t = float(model.radius(x))
        K = int(math.floor(rho)) + 1
        ks = np.arange(-K, K + 1)
        lens = loop_length(model.theta, ks, t)
        oracle = {int(k): float(ln) for k, ln in zip(ks, lens) if k != 0 and ln <= rho}
        built = {r["word_power"]: r["length"] for r in table.rows if r["word_power"] != 0}
        _check(res, "oracle_element_count", len(built), "==", len(oracle), "derived: deck enumeration",
               "nontrivial elements against closed-form loop lengths")
        same = set(built) == set(oracle)
        err = max((abs(built[k] - oracle[k]) / oracle[k] for k in oracle), default=0.0) if same else math.inf
        _check(res, "oracle_length_error", err, "<=", b["oracle_length_tol"], f"{path}.oracle_length_tol")

    if isinstance(model, FlatScrewQuotient) and p["fundamental_volume_samples"]:
        n = int(p["fundamental_volume_samples"])
        vf, se, bnd = fundamental_domain_volume(ball, rho / 2, samples=n, seed=_derived_seed(cfg.seed, 4),
                                                threads=threads)
        vb = ball_volume(model, x, rho / 2, samples=n, seed=_derived_seed(cfg.seed, 5), threads=threads)
        res.details["fundamental_volume"] = {"rho": rho / 2, "fundamental": vf, "fundamental_std_error": se,
                                             "boundary_hits": bnd, "ball": vb.value, "ball_std_error": vb.std_error}
        if b["volume_rel_tol"] is not None:
            _check(res, "fundamental_volume_identity", abs(vf - vb.value) / vb.value, "<=", b["volume_rel_tol"],
                   f"{path}.volume_rel_tol")

    n_def = int(p["defect_samples"])
    elems = [e for e in ball.nontrivial if float(ball.norm(e.lift_vector)) < rho]
    if n_def and elems:
        rng = np.random.default_rng(_derived_seed(cfg.seed, 6))
        E = orthonormal_frame(g)
        pick = rng.integers(0, len(elems), size=n_def)
        U = rng.normal(size=(n_def, d))
        U /= np.linalg.norm(U, axis=1, keepdims=True)
        radial = rng.uniform(size=n_def) ** (1.0 / d)
        violations, worst = 0, 0.0
        for j, e in enumerate(elems):
            sel = np.flatnonzero(pick == j)
            if not sel.size:
                continue
            vn = float(ball.norm(e.lift_vector))
            W = (U[sel] * (radial[sel] * (rho - vn) * (1 - 1e-9))[:, None]) @ E.T
            wn = ball.norm(W)
            defect = translation_defect(ball, e, W)
            bound = ball.curvature_bound * vn * wn * (vn + wn)
            violations += int(np.sum(defect > bound + b["defect_abs_tol"]))
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(bound > 0, defect / bound, 0.0)
            worst = max(worst, float(np.max(ratio)))
        res.details["translation_defect"] = {"samples": n_def, "curvature_bound": ball.curvature_bound,
                                             "max_defect_over_bound": worst}
        _check(res, "translation_defect_violations", violations, "<=", b["max_defect_violations"],
               f"{path}.max_defect_violations", f"Lambda^2 = {ball.curvature_bound:.6e}")

    if p["lift_point"] is not None:
        y = np.array(_vector(p["lift_point"], f"experiments.{cfg.name}.lift_point", d))
        res.details["lift_count"] = lift_count(ball, y, rho)
    return res


def run_holonomy_decay(cfg: ExperimentConfig, model, threads: int) -> ExperimentResult:
    p = cfg.params
    b = p["bounds"]
    radii = _grid(p["radii"], f"experiments.{cfg.name}.radii")
    direction = _vector(p["direction"], f"experiments.{cfg.name}.direction", 3)
    res = ExperimentResult(cfg.name, model.describe(), p)
    table = Table("holonomy_decay", ["r", "holonomy_defect", "error"])

    def row(r):
        X = _point(model, r, direction)
        try:
            return {"r": float(model.radius(X)), "holonomy_defect": holonomy_defect(model, X), "error": ""}
        except ROW_ERRORS as exc:
            return {"r": r, "holonomy_defect": math.nan, "error": _row_error(exc)}

    table.rows = ordered_map(row, radii, threads)
    res.tables.append(table)
    fit = _fit(res, "holonomy", _finite_pairs(table.rows, "r", "holonomy_defect"))
    _fit_check(res, "holonomy_exponent", fit, "<=", b["max_exponent"],
               f"experiments.{cfg.name}.bounds.max_exponent")
    _row_error_check(res, table.rows, b, cfg.name)
    return res


def _distance_oracle(model):
    if isinstance(model, FlatScrewQuotient):
        return lambda a, c: deck_distance(model, a, c)
    if isinstance(model, Euclidean):
        return lambda a, c: float(np.linalg.norm(a - c))
    raise LabError(f"no exact distance oracle for {model.name}")


def run_gh_chart(cfg: ExperimentConfig, model, threads: int) -> ExperimentResult:
    p = cfg.params
    b = p["bounds"]
    path = f"experiments.{cfg.name}.bounds"
    radii = _grid(p["radii"], f"experiments.{cfg.name}.radii")
    direction = _vector(p["direction"], f"experiments.{cfg.name}.direction", 3)
    res = ExperimentResult(cfg.name, model.describe(), p)
    table = Table("gh_chart", ["r", "defect", "center_offset", "window", "error"])

    def row(item):
        i, r = item
        X = _point(model, r, direction)
        try:
            dist = _distance_oracle(model)
            chart = gh_chart(model, X, float(p["kappa"]), mode=p["mode"])
            D = gh_defect(chart, dist, n_pairs=int(p["n_pairs"]), seed=_derived_seed(cfg.seed, 7, i),
                          local_radius=float(p["local_radius"]))
            return {"r": float(model.radius(X)), "defect": D,
                    "center_offset": float(np.linalg.norm(chart.h(X[None])[0])), "window": int(chart.window),
                    "error": ""}
        except ROW_ERRORS as exc:
            return {"r": r, "defect": math.nan, "center_offset": math.nan, "window": -1, "error": _row_error(exc)}

    table.rows = ordered_map(row, list(enumerate(radii)), threads)
    res.tables.append(table)
    fit = _fit(res, "defect", _finite_pairs(table.rows, "r", "defect"))
    _fit_check(res, "defect_exponent", fit, "in", b["exponent"], f"{path}.exponent")
    good = [r for r in table.rows if not r["error"]]
    if b["max_defect"] is not None and good:
        _check(res, "max_defect", max(r["defect"] for r in good), "<=", b["max_defect"], f"{path}.max_defect")
    _row_error_check(res, table.rows, b, cfg.name)
    return res


FIBRATION_COLUMNS = [
    "r", "sigma_min", "sigma_max", "c", "vertical_norm", "kernel_angle", "hessian_norm", "quadrature_error",
    "surrogate_error", "fiber_length", "orbit_length", "fiber_rel_error", "closure_gap", "level_error",
    "total_sectional", "bracket_vertical", "base_sectional", "vertical_gradient", "error",
]


def _fibration_row(model, p, r):
    row = {c: math.nan for c in FIBRATION_COLUMNS}
    X = _point(model, r, _vector(p["direction"], "direction", 3))
    row["r"] = float(model.radius(X))
    row["error"] = ""
    try:
        chart = gh_chart(model, X, float(p["kappa"]))
        fc = smooth_fibration(chart)
        offsets = np.array(p["offsets"], dtype=float)
        if offsets.ndim != 2 or offsets.shape[1] != model.dim:
            raise ConfigError("offsets", f"expected a list of {model.dim}-vectors")
        rep = submersion_diagnostics(fc, X + offsets)
        row.update(sigma_min=float(rep.singular_values.min()), sigma_max=float(rep.singular_values.max()),
                   c=row["r"] * rep.log_distortion, vertical_norm=float(np.max(rep.vertical_norm)),
                   kernel_angle=float(np.max(rep.kernel_angle)), hessian_norm=float(np.max(rep.hessian_norm)),
                   quadrature_error=fc.quadrature_error,
                   surrogate_error=chart.surrogate_error if chart.surrogate_error is not None else 0.0)
        if p["extract_fibers"]:
            fr = fiber_extract(fc, np.array(p["fiber_base_value"], dtype=float))
            orbit = float(model.orbit_length(fr.points[0]))
            row.update(fiber_length=fr.length, orbit_length=orbit, fiber_rel_error=abs(fr.length - orbit) / orbit,
                       closure_gap=fr.closure_gap, level_error=fr.level_error)
        if p["oneill"]:
            on = oneill_base_curvature(model, fc, X + offsets[0])
            row.update(total_sectional=on.total_sectional, bracket_vertical=on.bracket_vertical,
                       base_sectional=on.base_sectional, vertical_gradient=on.vertical_gradient)
    except ROW_ERRORS as exc:
        row["error"] = _row_error(exc)
    return row


def _averaging_rows(p, threads):
    radii = _grid(p["averaging_radii"], "experiments.fibration.averaging_radii")
    direction = _vector(p["averaging_direction"], "experiments.fibration.averaging_direction", 3)
    rows = []
    for j, desc in enumerate(p["averaging_models"]):
        m = model_from_config(desc, f"experiments.fibration.averaging_models[{j}]")

        def row(r, m=m, j=j):
            X = _point(m, r, direction)
            X[-1] = 0.4
            try:
                h = fiber_average_metric(m, None, X)
                g = m.metric(X[None])[0]
                h2 = fiber_average_metric(m, None, m.circle_action(X, 0.37))
                return {"model_index": j, "r": float(m.radius(X)), "h_minus_g": float(np.linalg.norm(h - g, 2)),
                        "relative": float(np.linalg.norm(h - g, 2) / np.linalg.norm(g, 2)),
                        "flow_invariance": float(np.abs(h - h2).max() / np.abs(h).max()), "error": ""}
            except ROW_ERRORS as exc:
                return {"model_index": j, "r": r, "h_minus_g": math.nan, "relative": math.nan,
                        "flow_invariance": math.nan, "error": _row_error(exc)}

        rows.extend(ordered_map(row, radii, threads))
    return rows


def run_fibration(cfg: ExperimentConfig, model, threads: int) -> ExperimentResult:
    p = cfg.params
    b = p["bounds"]
    path = f"experiments.{cfg.name}.bounds"
    radii = _grid(p["radii"], f"experiments.{cfg.name}.radii")
    res = ExperimentResult(cfg.name, model.describe(), p)
    table = Table("fibration", FIBRATION_COLUMNS, ordered_map(lambda r: _fibration_row(model, p, r), radii, threads))
    res.tables.append(table)
    good = [r for r in table.rows if not r["error"]]
    if good:
        _check(res, "distortion_constant", max(r["c"] for r in good), "<=", b["c_max"], f"{path}.c_max",
               "horizontal singular values within [exp(-c/r), exp(c/r)]")
        if model.has_circle:
            _check(res, "vertical_norm", max(r["vertical_norm"] for r in good), "<=", b["vertical_norm_max"],
                   f"{path}.vertical_norm_max")
            _check(res, "kernel_angle", max(r["kernel_angle"] for r in good), "<=", b["kernel_angle_max"],
                   f"{path}.kernel_angle_max")
        if p["extract_fibers"]:
            _check(res, "fiber_length", max(r["fiber_rel_error"] for r in good), "<=", b["fiber_rel_tol"],
                   f"{path}.fiber_rel_tol", "relative to the circle-orbit length")
    for key, col, bound in (
        ("hessian", "hessian_norm", "hessian_exponent_max"),
        ("base_sectional", "base_sectional", "base_sectional_exponent_max"),
        ("bracket", "bracket_vertical", "bracket_exponent_max"),
        ("vertical_gradient", "vertical_gradient", "vertical_gradient_exponent_max"),
    ):
        if b[bound] is None:
            continue
        pairs = [(r["r"], abs(r[col])) for r in good if np.isfinite(r[col]) and r[col] != 0]
        fit = _fit(res, key, pairs)
        _fit_check(res, f"{key}_exponent", fit, "<=", b[bound], f"{path}.{bound}")

    avg = Table("fibration_averaging", ["model_index", "r", "h_minus_g", "relative", "flow_invariance", "error"],
                _averaging_rows(p, threads))
    res.tables.append(avg)
    for j, desc in enumerate(p["averaging_models"]):
        m = model_from_config(desc, f"experiments.{cfg.name}.averaging_models[{j}]")
        rows = [r for r in avg.rows if r["model_index"] == j and not r["error"]]
        if not rows:
            continue
        _check(res, f"averaging_flow_invariance[{j}]", max(r["flow_invariance"] for r in rows), "<=",
               b["flow_invariance_tol"], f"{path}.flow_invariance_tol")
        if isinstance(m, PerturbedTaubNut):
            fit = _fit(res, f"averaging[{j}]", [(r["r"], r["h_minus_g"]) for r in rows if r["h_minus_g"] > 0])
            _fit_check(res, f"averaging_exponent[{j}]", fit, "<=", b["perturbed_averaging_exponent_max"],
                       f"{path}.perturbed_averaging_exponent_max")
        elif isinstance(m, TaubNut):
            _check(res, f"averaging_identity[{j}]", max(r["relative"] for r in rows), "<=",
                   b["invariant_averaging_tol"], f"{path}.invariant_averaging_tol")
    _row_error_check(res, table.rows + avg.rows, b, cfg.name)
    return res


def _fraction_str(fr: Fraction) -> str:
    return f"{fr.numerator}/{fr.denominator}"


def run_diophantine(cfg: ExperimentConfig, model, threads: int) -> ExperimentResult:
    p = cfg.params
    b = p["bounds"]
    path = f"experiments.{cfg.name}.bounds"
    if p["liouville_terms"] is not None:
        angle = liouville_angle(int(p["liouville_terms"]))
    elif isinstance(model, FlatScrewQuotient):
        angle = model.theta
    else:
        raise ConfigError(f"experiments.{cfg.name}.liouville_terms", "needs a flat_screw model or liouville_terms")
    angle = as_angle(angle)
    res = ExperimentResult(cfg.name, model.describe(), p)
    turns = angle.ratio if angle.ratio is not None else angle.value / (2 * math.pi)
    cf = continued_fraction_of(turns, depth=int(p["cf_depth"]))
    res.details["continued_fraction"] = {
        "coefficients": [str(a) for a in cf.coefficients],
        "convergents": [_fraction_str(c) for c in cf.convergents],
    }

    table = Table("diophantine", ["t", "q", "inj", "normalized"])
    alpha = float(p["alpha"])
    try:
        ts, q = plateau_sequence(angle, n_terms=int(p["plateau_terms"]))
        for t in ts:
            inj = flat_inj(angle, float(t))
            table.rows.append({"t": float(t), "q": int(q), "inj": inj, "normalized": inj / float(t) ** alpha})
    except ROW_ERRORS as exc:
        res.details["plateau_error"] = _row_error(exc)
    res.tables.append(table)
    min_terms = b["min_decreasing_terms"]
    if min_terms == "auto":
        min_terms = None if p["liouville_terms"] is None and _rational_q(model) is not None else 4
    res.details["min_decreasing_terms"] = min_terms
    if min_terms is not None:
        vals = [r["normalized"] for r in table.rows]
        strictly = all(c < a for a, c in zip(vals, vals[1:]))
        _check(res, "strictly_decreasing_terms", len(vals) if strictly else 0, ">=", min_terms,
               f"{path}.min_decreasing_terms", f"inj / t^{alpha}")

    pig = Table("diophantine_pigeonhole", ["t", "k", "chord", "bound", "error"])
    for t in _grid(p["pigeonhole_t"], f"experiments.{cfg.name}.pigeonhole_t"):
        try:
            k = pigeonhole_k(angle, t)
            chord = float(2 * math.sin(math.pi * float(angle.dist_to_int(np.array([k]))[0])))
            pig.rows.append({"t": t, "k": k, "chord": chord, "bound": 2 * math.pi / math.sqrt(t), "error": ""})
        except ROW_ERRORS as exc:
            pig.rows.append({"t": t, "k": -1, "chord": math.nan, "bound": math.nan, "error": _row_error(exc)})
    res.tables.append(pig)
    ok = [r for r in pig.rows if not r["error"]]
    bad = sum(1 for r in ok if not (1 <= r["k"] <= math.sqrt(r["t"]) + 1e-12 and r["chord"] <= r["bound"] * (1 + 1e-12)))
    _check(res, "pigeonhole_violations", bad + len(pig.rows) - len(ok), "==", 0, "derived: pigeonhole bound",
           "k in [1, sqrt t] and |exp(ik theta) - 1| <= 2 pi / sqrt t")
    return res


RUNNERS = {
    "inj-profile": run_inj_profile,
    "volume-growth": run_volume_growth,
    "curvature-decay": run_curvature_decay,
    "pseudo-group": run_pseudo_group,
    "holonomy-decay": run_holonomy_decay,
    "gh-chart": run_gh_chart,
    "fibration": run_fibration,
    "diophantine": run_diophantine,
}


# ----------------------------------------------------------------------------
# run and emit


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    model = model_from_config(cfg.model)
    seeded = ExperimentConfig(cfg.name, cfg.model, cfg.params, _derived_seed(cfg.seed, SUBCOMMANDS.index(cfg.name)))
    try:
        return RUNNERS[cfg.name](seeded, model, threads)
    except ConfigError:
        raise
    except ROW_ERRORS as exc:
        res = ExperimentResult(cfg.name, model.describe(), cfg.params)
        res.error = _row_error(exc)
        return res


def run(subcommand: str, raw_config: dict, seed: int | None = None, threads: int = 1,
        out_dir=None) -> Report:
    """Resolve the config, run each experiment, and emit after each one when out_dir is given."""
    t0 = time.perf_counter()
    configs = resolve(subcommand, raw_config, seed)
    echo = {
        "seed": configs[0].seed,
        "model": raw_config.get("model"),
        "experiments": {c.name: {"model": c.model, **c.params} for c in configs},
    }
    if "name" in raw_config:
        echo["name"] = raw_config["name"]
    report = Report(subcommand, echo, [], threads, 0.0, "")
    for cfg in configs:
        report.experiments.append(run_experiment(cfg, threads))
        if out_dir is not None:
            emit_csv(report.experiments[-1], out_dir)
    report.wall_time = time.perf_counter() - t0
    report.timestamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    if out_dir is not None:
        emit_json(report, out_dir)
    return report


def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return "%.16e" % v
    return str(value)


def table_csv(table: Table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.columns)
    for row in table.rows:
        w.writerow([format_cell(row.get(c)) for c in table.columns])
    return buf.getvalue()


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else format_cell(v)
    return obj


def report_json(report: Report) -> str:
    return json.dumps(_json_safe(report.to_json()), indent=2, allow_nan=False) + "\n"


def emit_csv(result: ExperimentResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for table in result.tables:
        path = out / f"{table.name}.csv"
        path.write_text(table_csv(table))
        paths.append(path)
    return paths


def emit_json(report: Report, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(report_json(report))
    return path


def emit(report: Report, out_dir, formats=("csv", "json")) -> list[Path]:
    paths = []
    if "csv" in formats:
        for res in report.experiments:
            paths.extend(emit_csv(res, out_dir))
    if "json" in formats:
        paths.append(emit_json(report, out_dir))
    return paths
