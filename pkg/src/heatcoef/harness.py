"""End-to-end experiment harness.

Named coefficient fields, a flat key = value config format, the full
simulate / extract / project / invert pipeline with metrics and CSV dumps,
and the mode-truncation study that measures how well the compressed time
basis represents the simulated rate field.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .forward_sim import (SpaceGrid, _BilinearSampler, apply_laplacian,
                          dump_series_csv, extract_cauchy, solve_forward)
from .fourier_data import add_noise, dump_fourier_csv, project, project_series
from .inversion import ReconstructionConfig, ReconstructionResult, reconstruct
from .time_basis import TimeBasis, TimeGrid, build_basis

__all__ = [
    "TestCase",
    "RegionSpec",
    "RunConfig",
    "RunReport",
    "PipelineError",
    "get_case",
    "list_cases",
    "parse_config_file",
    "build_run_config",
    "run_pipeline",
    "simulate_case",
    "truncation_study",
    "compute_metrics",
    "dump_field_csv",
]


# ---------------------------------------------------------------------------
# coefficient test cases

@dataclass(frozen=True)
class RegionSpec:
    """One structure of a coefficient field to score separately.

    kind is "max" or "min"; where(X, Y) restricts the nodes considered and
    None means the whole domain.
    """

    label: str
    kind: str
    true_value: float
    where: Optional[Callable] = None


@dataclass(frozen=True)
class TestCase:
    name: str
    aliases: tuple
    summary: str
    field: Callable
    regions: tuple


def _bump_field(X, Y):
    r2 = X**2 + (Y + 0.3) ** 2
    out = np.zeros_like(np.asarray(X, dtype=float))
    m = r2 < 0.23**2
    out[m] = 20.0 * np.exp(r2[m] / (r2[m] - 0.23**2))
    return out


def _bars_field(X, Y):
    m = (np.abs(X) < 0.8) & ((np.abs(Y - 0.4) < 0.15)
                             | (np.abs(Y + 0.4) < 0.15))
    return np.where(m, 10.0, 0.0)


def _discs_field(X, Y):
    lower = X**2 + (Y + 0.5) ** 2 < 0.23**2
    upper = X**2 + (Y - 0.5) ** 2 < 0.23**2
    return np.where(lower, 5.0, np.where(upper, 8.0, 0.0))


def _cross_field(X, Y):
    arm = (np.abs(X + Y) < 0.25) | (np.abs(X - Y) < 0.25)
    inside = (np.abs(X) < 0.8) & arm
    pos = inside & (Y > -0.8) & (Y <= 0.0)
    neg = inside & (Y > 0.0) & (Y < 0.8)
    return np.where(pos, 8.0, np.where(neg, -8.0, 0.0))


CASES = {
    "bump": TestCase(
        name="bump",
        aliases=("test1", "1"),
        summary="smooth bump of height 20 centered at (0, -0.3), radius 0.23",
        field=_bump_field,
        regions=(RegionSpec("peak", "max", 20.0),),
    ),
    "bars": TestCase(
        name="bars",
        aliases=("test2", "2"),
        summary="two horizontal bars of value 10 at y = +-0.4, |x| < 0.8",
        field=_bars_field,
        regions=(
            RegionSpec("upper_bar", "max", 10.0, lambda X, Y: Y > 0),
            RegionSpec("lower_bar", "max", 10.0, lambda X, Y: Y < 0),
        ),
    ),
    "discs": TestCase(
        name="discs",
        aliases=("test3", "3"),
        summary="discs of value 8 at (0, 0.5) and 5 at (0, -0.5), radius 0.23",
        field=_discs_field,
        regions=(
            RegionSpec("upper_disc", "max", 8.0, lambda X, Y: Y > 0),
            RegionSpec("lower_disc", "max", 5.0, lambda X, Y: Y < 0),
        ),
    ),
    "cross": TestCase(
        name="cross",
        aliases=("test4", "4"),
        summary="X of diagonal strips, +8 on the lower half, -8 on the upper",
        field=_cross_field,
        regions=(
            RegionSpec("lower_arms", "max", 8.0, lambda X, Y: Y <= 0),
            RegionSpec("upper_arms", "min", -8.0, lambda X, Y: Y > 0),
        ),
    ),
}

_ALIASES = {}
for _case in CASES.values():
    _ALIASES[_case.name] = _case.name
    for _a in _case.aliases:
        _ALIASES[_a] = _case.name


def get_case(name: str) -> TestCase:
    key = _ALIASES.get(str(name).strip().lower())
    if key is None:
        known = ", ".join(sorted(CASES))
        raise KeyError(f"unknown case {name!r}; known cases: {known}")
    return CASES[key]


def list_cases():
    return [(c.name, c.aliases, c.summary) for c in CASES.values()]


# ---------------------------------------------------------------------------
# run configuration

@dataclass
class RunConfig:
    case: str = "bump"
    R: float = 1.0
    R1: float = 3.0
    n_x: int = 80
    n_1: int = 240
    n_t: int = 100
    T: float = 0.3
    n_modes: int = 25
    eps: float = 1e-9
    delta: float = 0.0
    seed: int = 0
    p_max: int = 10
    stop_tol: float = 1e-3
    rtol: float = 1e-8
    maxiter: int = 20000
    strategy: str = "auto"
    out: str = ""
    dump_fields: bool = True
    dump_history: bool = False
    dump_data: bool = False


_BOOL_WORDS = {"true": True, "yes": True, "on": True, "1": True,
               "false": False, "no": False, "off": False, "0": False}


def parse_config_file(path) -> dict:
    """Flat key = value lines; # starts a comment; blank lines skipped."""
    mapping = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, val = line.split("=", 1)
        mapping[key.strip()] = val.strip()
    return mapping


def build_run_config(mapping=None, **overrides) -> RunConfig:
    """RunConfig from string mapping (config file) plus typed overrides."""
    spec = {f.name: f.type for f in fields(RunConfig)}
    types = {"str": str, "float": float, "int": int, "bool": bool}
    kwargs = {}
    for key, val in (mapping or {}).items():
        if key not in spec:
            known = ", ".join(sorted(spec))
            raise ValueError(f"unknown config key {key!r}; known keys: {known}")
        typ = types[spec[key]] if isinstance(spec[key], str) else spec[key]
        if typ is bool:
            word = str(val).strip().lower()
            if word not in _BOOL_WORDS:
                raise ValueError(f"config key {key!r}: not a boolean: {val!r}")
            kwargs[key] = _BOOL_WORDS[word]
        else:
            kwargs[key] = typ(val)
    for key, val in overrides.items():
        if val is None:
            continue
        if key not in spec:
            raise ValueError(f"unknown config key {key!r}")
        kwargs[key] = val
    return RunConfig(**kwargs)


# ---------------------------------------------------------------------------
# pipeline

class PipelineError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise PipelineError(name, exc) from exc


@dataclass
class RunReport:
    case: str
    config: dict
    metrics: dict
    stopped: str
    n_correctors: int
    conv_history: list
    fallback_flags: list
    iteration_history: list
    solve_times: list
    residual_history: list
    stage_times: dict
    factor_diagnostics: dict
    files: list


def simulate_case(cfg: RunConfig):
    """Forward simulation of a named case; returns (series, extras)."""
    case = get_case(cfg.case)
    fine = SpaceGrid(R=cfg.R1, n=cfg.n_1)
    tgrid = TimeGrid(T=cfg.T, n_t=cfg.n_t)
    Xf, Yf = fine.meshgrid()
    c_fine = case.field(Xf, Yf)
    f_fine = np.ones_like(c_fine)
    u_stack = solve_forward(c_fine, f_fine, fine, tgrid)
    target = SpaceGrid(R=cfg.R, n=cfg.n_x)
    series = extract_cauchy(u_stack, fine, target, tgrid)
    return series, {
        "case": case, "fine": fine, "tgrid": tgrid, "target": target,
        "u_stack": u_stack, "c_fine": c_fine,
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def dump_field_csv(field_2d, grid: SpaceGrid, path):
    """Nodal field as CSV rows i,j,x,y,value, row-major in i."""
    n = grid.n
    xs = grid.coords
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    rows = np.column_stack([
        ii.ravel(), jj.ravel(), xs[ii.ravel()], xs[jj.ravel()],
        np.asarray(field_2d, dtype=float).ravel(),
    ])
    with open(path, "w") as fh:
        fh.write("i,j,x,y,value\n")
        for i, j, x, y, v in rows:
            fh.write(f"{int(i)},{int(j)},{x:.17g},{y:.17g},{v:.17g}\n")


def compute_metrics(c_comp, c_true, grid: SpaceGrid, case: TestCase = None) -> dict:
    """Recovery metrics: extrema with locations, relative errors, regions."""
    c_comp = np.asarray(c_comp, dtype=float)
    c_true = np.asarray(c_true, dtype=float)
    xs = grid.coords
    X, Y = grid.meshgrid()

    def located(fld, pick):
        idx = np.argmax(fld) if pick == "max" else np.argmin(fld)
        i, j = np.unravel_index(idx, fld.shape)
        return float(fld[i, j]), (float(xs[i]), float(xs[j]))

    max_comp, argmax_comp = located(c_comp, "max")
    min_comp, argmin_comp = located(c_comp, "min")
    max_true, argmax_true = located(c_true, "max")
    min_true, argmin_true = located(c_true, "min")

    def rel(err, ref):
        return err / abs(ref) if ref != 0.0 else err

    l2_true = float(np.linalg.norm(c_true))
    l2_diff = float(np.linalg.norm(c_comp - c_true))
    metrics = {
        "max_comp": max_comp, "argmax_comp": argmax_comp,
        "min_comp": min_comp, "argmin_comp": argmin_comp,
        "max_true": max_true, "argmax_true": argmax_true,
        "min_true": min_true, "argmin_true": argmin_true,
        "rel_max_error": rel(abs(max_comp - max_true), max_true),
        "sup_error": float(np.max(np.abs(c_comp - c_true))),
        "rel_l2_error": l2_diff / l2_true if l2_true > 0 else l2_diff,
        "l2_error_absolute": l2_true == 0.0,
        "regions": [],
    }
    if case is not None:
        for region in case.regions:
            if region.where is None:
                mask = np.ones_like(c_comp, dtype=bool)
            else:
                mask = region.where(X, Y)
            vals = np.where(mask, c_comp,
                            -np.inf if region.kind == "max" else np.inf)
            got, arg = located(vals, region.kind)
            metrics["regions"].append({
                "label": region.label,
                "kind": region.kind,
                "true_value": region.true_value,
                "computed": got,
                "location": arg,
                "rel_error": rel(abs(got - region.true_value),
                                 region.true_value),
            })
    return metrics


def run_pipeline(cfg: RunConfig) -> RunReport:
    """simulate -> extract -> project -> noise -> invert -> metrics -> dumps."""
    stage_times = {}
    t0 = time.perf_counter()
    series, extras = _stage("simulate", simulate_case, cfg)
    stage_times["simulate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    basis = _stage("basis", build_basis, cfg.T, cfg.n_modes)
    data = _stage("project", project, series, basis)
    if cfg.delta != 0.0:
        data = _stage("noise", add_noise, data, cfg.delta, cfg.seed)
    stage_times["project"] = time.perf_counter() - t0

    target = extras["target"]
    rcfg = ReconstructionConfig(
        eps=cfg.eps, p_max=cfg.p_max, stop_tol=cfg.stop_tol, rtol=cfg.rtol,
        maxiter=cfg.maxiter, strategy=cfg.strategy,
        keep_history=cfg.dump_history,
    )
    t0 = time.perf_counter()
    result = _stage("invert", reconstruct, data, basis, target, None, rcfg)
    stage_times["invert"] = time.perf_counter() - t0

    X, Y = target.meshgrid()
    case = extras["case"]
    c_true = case.field(X, Y)
    metrics = _stage("metrics", compute_metrics, result.c, c_true, target, case)

    files = []
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        if cfg.dump_fields:
            for name, fld in (("c_comp", result.c), ("c_true", c_true)):
                path = out / f"{name}.csv"
                dump_field_csv(fld, target, path)
                files.append(str(path))
        if cfg.dump_history and result.c_history:
            for p, c_p in enumerate(result.c_history):
                path = out / f"c_iter_{p:02d}.csv"
                dump_field_csv(c_p, target, path)
                files.append(str(path))
        if cfg.dump_data:
            path = out / "boundary_modes.csv"
            dump_fourier_csv(data, path)
            files.append(str(path))

    report = RunReport(
        case=case.name,
        config=_jsonable(asdict(cfg)),
        metrics=_jsonable(metrics),
        stopped=result.stopped,
        n_correctors=result.n_correctors,
        conv_history=_jsonable(result.conv_history),
        fallback_flags=_jsonable(result.fallback_flags),
        iteration_history=_jsonable(result.iteration_history),
        solve_times=_jsonable(result.time_history),
        residual_history=_jsonable(result.residual_history),
        stage_times=_jsonable(stage_times),
        factor_diagnostics=_jsonable(result.factor_diagnostics),
        files=files,
    )
    if cfg.out:
        path = Path(cfg.out) / "report.json"
        path.write_text(json.dumps(asdict(report), indent=2) + "\n")
        report.files.append(str(path))
    return report


def truncation_study(cfg: RunConfig, n_list=(5, 10, 25)) -> dict:
    """Sup-norm error of the N-mode compression of the simulated rate field.

    The rate v = lap u + c u is evaluated on the fine simulation grid (for
    the implicit stepping this equals the backward time difference exactly),
    sampled at the inversion nodes, projected onto the first max(n_list)
    modes, and compared at t = T against the sampled rate.
    """
    n_list = sorted(int(n) for n in n_list)
    n_max = n_list[-1]
    series, extras = _stage("simulate", simulate_case, cfg)
    fine, tgrid, target = extras["fine"], extras["tgrid"], extras["target"]
    u_stack, c_fine = extras["u_stack"], extras["c_fine"]

    basis = build_basis(cfg.T, n_max)
    X, Y = target.meshgrid()
    sampler = _BilinearSampler(fine, X.ravel(), Y.ravel())
    n_pts = X.size
    rate = np.empty((n_pts, tgrid.n_t))
    for l in range(tgrid.n_t):
        v_l = apply_laplacian(u_stack[l], fine.d) + c_fine * u_stack[l]
        rate[:, l] = sampler(v_l)
    modes = project_series(rate, basis, tgrid)
    final = rate[:, -1]
    errors = {}
    for n in n_list:
        recon = modes[:, :n] @ basis.at_final[:n]
        errors[n] = float(np.max(np.abs(recon - final)))
    return {
        "n_list": n_list,
        "sup_errors": errors,
        "case": extras["case"].name,
    }
