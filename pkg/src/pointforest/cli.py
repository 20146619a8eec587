"""Command-line interface.

Subcommands: simulate, tessellate, fit, predict, tune, vip, evaluate,
study-infill.  Every command is a pure function of its input files, flags
and seed: rerunning with the same inputs produces byte-identical outputs.
Errors go to stderr prefixed with ``ERROR:``; exit codes are 0 (success),
2 (usage or configuration error) and 3 (data error).

Flags may also be supplied through a JSON config file (``--config``) whose
keys are the long flag names with dashes replaced by underscores;
explicitly passed flags take precedence over the file.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .covariate import (
    fit_covariate_forest,
    predict_covariate,
    predict_covariate_grid,
    variable_importance,
)
from .geometry import (
    DEFAULT_RESOLUTION,
    CovariateStack,
    DataError,
    Window,
    fmt_float,
    read_points_csv,
    read_raster,
    window_from_mask,
    write_points_csv,
    write_raster,
)
from .persistence import load_model, save_model
from .scoring import infill_study, miae, mise, synthetic_study, tune
from .simulate import (
    IntensityModel,
    RngSeed,
    simulate_homogeneous_poisson,
    simulate_inhomogeneous_poisson,
    simulate_thomas,
    surrogate_stack,
    synthetic_intensity_model,
)
from .spatial import (
    SpatialForest,
    fit_spatial_forest,
    predict_spatial,
    predict_spatial_grid,
    rule_of_thumb_gamma,
)

__all__ = ["main"]


class UsageError(Exception):
    """Bad flag combination or configuration; exits with code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # ERROR:-prefixed usage failures, exit code 2
        sys.stderr.write(f"ERROR: {message}\n")
        sys.exit(2)


def _build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, help="master random seed")
    common.add_argument("--threads", type=int, help="worker threads for forest fitting")
    common.add_argument("--resolution", type=int,
                        help="pixels on the longer window side (default 256)")
    common.add_argument("--config", type=Path, help="JSON file of default flag values")
    common.add_argument("--window", type=float, nargs=4,
                        metavar=("XMIN", "YMIN", "XMAX", "YMAX"))
    common.add_argument("--mask", type=Path, help="0/1 raster defining a masked window")

    p = _Parser(prog="pointforest", description=__doc__.split("\n")[1])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ps = sub.add_parser("simulate", parents=[common],
                        help="simulate a point pattern (and synthetic covariates)")
    ps.add_argument("--model", choices=["constant", "grid", "synthetic", "thomas"],
                    required=True)
    ps.add_argument("--intensity", type=float, help="intensity for --model constant")
    ps.add_argument("--intensity-grid", type=Path, help="raster for --model grid")
    ps.add_argument("--p", type=int, help="number of synthetic covariates (default 15)")
    ps.add_argument("--smoothness", type=float, help="synthetic field correlation length")
    ps.add_argument("--target-count", type=float, help="expected points (default 1000)")
    ps.add_argument("--covariates-out", type=Path,
                    help="directory for synthetic covariate rasters + manifest")
    ps.add_argument("--truth-out", type=Path, help="write the true intensity raster here")
    ps.add_argument("--parent-intensity", type=float)
    ps.add_argument("--mean-offspring", type=float)
    ps.add_argument("--cluster-sd", type=float)
    ps.add_argument("--out", type=Path, required=True, help="output points CSV")

    pt = sub.add_parser("tessellate", parents=[common],
                        help="sample a Voronoi partition and write its label grid")
    pt.add_argument("--gamma", type=float, required=True)
    pt.add_argument("--margin", type=float, help="nucleus sampling margin override")
    pt.add_argument("--out", type=Path, required=True)

    pf = sub.add_parser("fit", parents=[common], help="fit a forest and save it")
    pf.add_argument("--mode", choices=["spatial", "covariate"], required=True)
    pf.add_argument("--points", type=Path, required=True)
    pf.add_argument("--covariates", type=Path, help="covariate manifest file")
    pf.add_argument("--gamma", type=float, help="partition intensity (default: rule of thumb)")
    pf.add_argument("--M", type=int, help="number of trees (default 100)")
    pf.add_argument("--mtry", type=int, help="candidate covariates per cell")
    pf.add_argument("--n-min", type=int, help="minimal bootstrap count to keep splitting")
    pf.add_argument("--a-n", type=float, help="infill normalisation (default 1)")
    pf.add_argument("--max-depth", type=int, help="optional depth cap for covariate trees")
    pf.add_argument("--bootstrap", action="store_true",
                    help="bootstrap spatial trees (enables OOB scoring)")
    pf.add_argument("--out", type=Path, required=True, help="output model file")
    pf.add_argument("--predict-grid", type=Path, help="also write the estimate raster here")

    pp = sub.add_parser("predict", parents=[common], help="evaluate a saved model")
    pp.add_argument("--model", type=Path, required=True)
    pp.add_argument("--covariates", type=Path, help="manifest (covariate models)")
    pp.add_argument("--grid-out", type=Path, help="write the estimate raster here")
    pp.add_argument("--at", type=float, nargs=2, metavar=("X", "Y"),
                    help="print the estimate at one location")
    pp.add_argument("--z", type=str,
                    help="comma-separated covariate values for a covariate model")

    pu = sub.add_parser("tune", parents=[common],
                        help="select hyperparameters by out-of-bag score")
    pu.add_argument("--mode", choices=["spatial", "covariate"], required=True)
    pu.add_argument("--points", type=Path, required=True)
    pu.add_argument("--covariates", type=Path)
    pu.add_argument("--gamma-grid", type=str, help="comma-separated gamma candidates")
    pu.add_argument("--mtry-grid", type=str, help="comma-separated mtry candidates")
    pu.add_argument("--n-min-grid", type=str, help="comma-separated n_min candidates")
    pu.add_argument("--M", type=int, help="trees per candidate (default 50)")
    pu.add_argument("--scores-out", type=Path, help="write the score table as CSV")

    pv = sub.add_parser("vip", parents=[common], help="variable importance")
    pv.add_argument("--model", type=Path, help="score a saved covariate model")
    pv.add_argument("--points", type=Path, help="refit mode: points CSV")
    pv.add_argument("--covariates", type=Path, help="refit mode: manifest")
    pv.add_argument("--mtry", type=int)
    pv.add_argument("--n-min", type=int)
    pv.add_argument("--M", type=int)
    pv.add_argument("--reps", type=int, help="refit replications (default 1)")
    pv.add_argument("--out", type=Path, help="write CSV here (default stdout)")

    pe = sub.add_parser("evaluate", parents=[common],
                        help="integrated error between estimate and truth grids")
    pe.add_argument("--estimate", type=Path)
    pe.add_argument("--truth", type=Path)
    pe.add_argument("--metric", choices=["mise", "miae", "both"])
    pe.add_argument("--replications", type=int,
                    help="instead: run the synthetic covariate-vs-spatial benchmark")
    pe.add_argument("--p", type=int, help="benchmark covariate count (default 15)")
    pe.add_argument("--target-count", type=float)
    pe.add_argument("--smoothness", type=float)
    pe.add_argument("--M", type=int, help="benchmark trees per forest (default 50)")
    pe.add_argument("--mtry", type=int)
    pe.add_argument("--n-min", type=int)
    pe.add_argument("--out", type=Path, help="write CSV here (default stdout)")

    pi = sub.add_parser("study-infill", parents=[common],
                        help="Monte Carlo infill study of the spatial forest")
    pi.add_argument("--intensity-grid", type=Path, required=True,
                    help="base intensity raster (defines the window)")
    pi.add_argument("--a-grid", type=str, help="comma-separated levels (default 1,4,16,64)")
    pi.add_argument("--h-exponent", type=float,
                    help="h_n = a_n ** exponent (default -0.25)")
    pi.add_argument("--reps", type=int, help="replications per level (default 200)")
    pi.add_argument("--M", type=int, help="trees per forest (default 20)")
    pi.add_argument("--x", type=float, nargs=2, metavar=("X", "Y"),
                    help="study location (default window center)")
    pi.add_argument("--out", type=Path, help="write CSV here (default stdout)")
    return p


# ---------------------------------------------------------------------------
# config handling and shared helpers
# ---------------------------------------------------------------------------

_COMMON_DEFAULTS = {"threads": 1, "resolution": DEFAULT_RESOLUTION}


def _apply_config(args: argparse.Namespace, defaults: dict) -> None:
    """Fill unset flags from the config file, then from defaults."""
    if args.config is not None:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        for key, val in cfg.items():
            dest = key.replace("-", "_")
            if not hasattr(args, dest):
                raise UsageError(f"unknown config key {key!r}")
            if getattr(args, dest) is None:
                setattr(args, dest, val)
    for key, val in {**_COMMON_DEFAULTS, **defaults}.items():
        if getattr(args, key, None) is None:
            setattr(args, key, val)


def _require_seed(args) -> RngSeed:
    if args.seed is None:
        raise UsageError("--seed is required for this command")
    return RngSeed(int(args.seed))


def _get_window(args) -> Window:
    if args.window is not None and args.mask is not None:
        raise UsageError("give either --window or --mask, not both")
    if args.mask is not None:
        return window_from_mask(read_raster(args.mask))
    if args.window is not None:
        x0, y0, x1, y1 = args.window
        try:
            return Window(x0, y0, x1, y1)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    raise UsageError("a window is required: pass --window or --mask")


def _float_list(text: str, flag: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"{flag} must be comma-separated numbers") from exc


def _int_list(text: str, flag: str) -> list[int]:
    return [int(v) for v in _float_list(text, flag)]


def _read_manifest(path: Path) -> CovariateStack:
    """Read a covariate manifest: one ``name relative/path.grid`` per line."""
    try:
        lines = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    except OSError as exc:
        raise DataError(f"cannot read covariate manifest {path}: {exc}") from exc
    names, grids = [], []
    for toks in lines:
        if len(toks) != 2:
            raise DataError(f"{path}: manifest lines must be 'name path'")
        names.append(toks[0])
        grids.append(read_raster(Path(path).parent / toks[1]))
    if not names:
        raise DataError(f"{path}: empty covariate manifest")
    return CovariateStack(tuple(names), tuple(grids))


def _write_manifest(stack: CovariateStack, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, grid in zip(stack.names, stack.grids):
        fname = f"cov_{name}.grid"
        write_raster(grid, directory / fname)
        lines.append(f"{name} {fname}")
    manifest = directory / "covariates.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_simulate(args) -> int:
    _apply_config(args, {"p": 15, "target_count": 1000.0})
    seed = _require_seed(args)
    window = _get_window(args)
    if args.model == "constant":
        if args.intensity is None:
            raise UsageError("--model constant needs --intensity")
        pattern = simulate_homogeneous_poisson(window, args.intensity, seed)
        expected = args.intensity * window.area()
    elif args.model == "grid":
        if args.intensity_grid is None:
            raise UsageError("--model grid needs --intensity-grid")
        model = IntensityModel.from_grid(read_raster(args.intensity_grid), window)
        pattern = simulate_inhomogeneous_poisson(window, model, seed)
        expected = model.integral()
    elif args.model == "thomas":
        for flag in ("parent_intensity", "mean_offspring", "cluster_sd"):
            if getattr(args, flag) is None:
                raise UsageError(f"--model thomas needs --{flag.replace('_', '-')}")
        pattern = simulate_thomas(window, args.parent_intensity,
                                  args.mean_offspring, args.cluster_sd, seed)
        expected = (args.parent_intensity * args.mean_offspring * window.area())
    else:  # synthetic benchmark: covariates + formula intensity + pattern
        stack = surrogate_stack(window, int(args.p), args.smoothness,
                                seed.derive(0), args.resolution)
        model = synthetic_intensity_model(stack, ("Mn", "Zn", "Fe"),
                                          args.target_count, window=window,
                                          surrogate_mn=True)
        pattern = simulate_inhomogeneous_poisson(window, model, seed.derive(1))
        expected = model.integral()
        if args.covariates_out is not None:
            manifest = _write_manifest(stack, args.covariates_out)
            sys.stdout.write(f"covariates {manifest}\n")
        if args.truth_out is not None:
            write_raster(model.grid, args.truth_out)
    write_points_csv(pattern, args.out)
    sys.stdout.write(f"n_points {len(pattern)}\n")
    sys.stdout.write(f"expected_count {fmt_float(expected)}\n")
    return 0


def _cmd_tessellate(args) -> int:
    _apply_config(args, {})
    seed = _require_seed(args)
    window = _get_window(args)
    from .tessellation import poisson_voronoi_partition
    part = poisson_voronoi_partition(window, args.gamma, seed,
                                     resolution=args.resolution, margin=args.margin)
    write_raster(part.labels, args.out)
    sys.stdout.write(f"n_cells {part.n_cells}\n")
    return 0


def _cmd_fit(args) -> int:
    _apply_config(args, {"M": 100, "a_n": 1.0, "n_min": 10})
    seed = _require_seed(args)
    window = _get_window(args)
    pattern = read_points_csv(args.points, window)
    if args.mode == "spatial":
        gamma = args.gamma if args.gamma is not None else rule_of_thumb_gamma(pattern)
        forest = fit_spatial_forest(pattern, gamma, int(args.M), seed,
                                    a_n=args.a_n, bootstrap=args.bootstrap,
                                    resolution=args.resolution, threads=args.threads)
        grid = predict_spatial_grid(forest) if args.predict_grid else None
        sys.stdout.write(f"gamma {fmt_float(gamma)}\n")
    else:
        if args.covariates is None:
            raise UsageError("--mode covariate needs --covariates")
        stack = _read_manifest(args.covariates)
        mtry = args.mtry if args.mtry is not None else max(1, round(stack.p / 3))
        if not 1 <= mtry <= stack.p:
            raise UsageError(f"--mtry must be in 1..{stack.p}")
        forest = fit_covariate_forest(pattern, stack, int(args.M), mtry,
                                      int(args.n_min), seed, a_n=args.a_n,
                                      max_depth=args.max_depth, threads=args.threads)
        grid = predict_covariate_grid(forest, stack) if args.predict_grid else None
        sys.stdout.write(f"mtry {mtry}\n")
    save_model(forest, args.out, seed)
    if grid is not None:
        write_raster(grid, args.predict_grid)
    sys.stdout.write(f"trees {forest.M}\nn_points {len(pattern)}\n")
    return 0


def _cmd_predict(args) -> int:
    _apply_config(args, {})
    model = load_model(args.model)
    if (args.grid_out is None) == (args.at is None and args.z is None):
        raise UsageError("pass exactly one of --grid-out or --at/--z")
    if isinstance(model, SpatialForest):
        if args.z is not None:
            raise UsageError("--z only applies to covariate models")
        if args.grid_out is not None:
            write_raster(predict_spatial_grid(model), args.grid_out)
        else:
            x, y = args.at
            try:
                est = predict_spatial(model, x, y)
            except ValueError as exc:
                raise UsageError(str(exc)) from exc
            sys.stdout.write(f"estimate {fmt_float(est)}\n")
        return 0
    # covariate model
    if args.z is not None:
        z = np.array(_float_list(args.z, "--z"))
        sys.stdout.write(f"estimate {fmt_float(predict_covariate(model, z))}\n")
        return 0
    if args.covariates is None:
        raise UsageError("covariate models need --covariates (or --z with --at)")
    stack = _read_manifest(args.covariates)
    if tuple(stack.names) != tuple(model.names):
        raise DataError("manifest covariates do not match the model's covariates")
    if args.grid_out is not None:
        write_raster(predict_covariate_grid(model, stack), args.grid_out)
    else:
        x, y = args.at
        z = stack.values_at(np.array([x]), np.array([y]))[0]
        if np.isnan(z).any():
            raise DataError(f"no covariate data at ({x}, {y})")
        sys.stdout.write(f"estimate {fmt_float(predict_covariate(model, z))}\n")
    return 0


def _cmd_tune(args) -> int:
    _apply_config(args, {"M": 50})
    seed = _require_seed(args)
    window = _get_window(args)
    pattern = read_points_csv(args.points, window)
    if args.mode == "spatial":
        if args.gamma_grid is None:
            raise UsageError("--mode spatial needs --gamma-grid")
        cands = [{"gamma": g} for g in _float_list(args.gamma_grid, "--gamma-grid")]
        best, grid = tune(pattern, cands, seed, stack=None, default_M=int(args.M),
                          resolution=args.resolution, threads=args.threads)
        header = "gamma,mean_oob"
        rows = [f"{fmt_float(c['gamma'])},{fmt_float(r.mean_oob)}"
                for c, r in zip(grid.candidates, grid.reports)]
        sys.stdout.write(f"best_gamma {fmt_float(best['gamma'])}\n")
    else:
        if args.covariates is None or args.mtry_grid is None or args.n_min_grid is None:
            raise UsageError("--mode covariate needs --covariates, --mtry-grid "
                             "and --n-min-grid")
        stack = _read_manifest(args.covariates)
        cands = [{"mtry": m, "n_min": nm}
                 for m in _int_list(args.mtry_grid, "--mtry-grid")
                 for nm in _int_list(args.n_min_grid, "--n-min-grid")]
        best, grid = tune(pattern, cands, seed, stack=stack, default_M=int(args.M),
                          resolution=args.resolution, threads=args.threads)
        header = "mtry,n_min,mean_oob"
        rows = [f"{c['mtry']},{c['n_min']},{fmt_float(r.mean_oob)}"
                for c, r in zip(grid.candidates, grid.reports)]
        sys.stdout.write(f"best_mtry {best['mtry']}\nbest_n_min {best['n_min']}\n")
    if args.scores_out is not None:
        _emit("\n".join([header] + rows) + "\n", args.scores_out)
    return 0


def _cmd_vip(args) -> int:
    _apply_config(args, {"reps": 1, "M": 50, "n_min": 10})
    if args.model is not None:
        model = load_model(args.model)
        if isinstance(model, SpatialForest):
            raise UsageError("vip requires a covariate model; spatial forests "
                             "have no covariates")
        vip = variable_importance(model)
        lines = ["covariate,vip"]
        lines += [f"{name},{fmt_float(vip[name])}" for name in model.names]
        _emit("\n".join(lines) + "\n", args.out)
        return 0
    if args.points is None or args.covariates is None:
        raise UsageError("vip needs either --model or --points with --covariates")
    seed = _require_seed(args)
    window = _get_window(args)
    pattern = read_points_csv(args.points, window)
    stack = _read_manifest(args.covariates)
    mtry = args.mtry if args.mtry is not None else max(1, round(stack.p / 3))
    lines = ["rep,covariate,vip"]
    for r in range(int(args.reps)):
        forest = fit_covariate_forest(pattern, stack, int(args.M), mtry,
                                      int(args.n_min), seed.derive(r),
                                      threads=args.threads)
        vip = variable_importance(forest)
        lines += [f"{r},{name},{fmt_float(vip[name])}" for name in stack.names]
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def _cmd_evaluate(args) -> int:
    _apply_config(args, {"metric": "mise", "p": 15, "target_count": 1000.0,
                         "M": 50, "mtry": 8, "n_min": 10})
    if args.replications is not None:
        seed = _require_seed(args)
        window = _get_window(args) if (args.window or args.mask) else None
        records = synthetic_study(int(args.replications), seed, window=window,
                                  p=int(args.p), target_count=args.target_count,
                                  smoothness=args.smoothness,
                                  resolution=args.resolution,
                                  M_covariate=int(args.M), mtry=int(args.mtry),
                                  n_min=int(args.n_min), M_spatial=int(args.M),
                                  threads=args.threads)
        lines = ["rep,n_points,mise_covariate,mise_spatial,vip_top3,vip_ok"]
        for rec in records:
            lines.append(
                f"{rec['rep']},{rec['n_points']},"
                f"{fmt_float(rec['mise_covariate'])},{fmt_float(rec['mise_spatial'])},"
                f"{'|'.join(rec['vip_top3'])},{int(rec['vip_ok'])}")
        _emit("\n".join(lines) + "\n", args.out)
        return 0
    if args.estimate is None or args.truth is None:
        raise UsageError("evaluate needs --estimate and --truth (or --replications)")
    est = read_raster(args.estimate)
    truth = read_raster(args.truth)
    try:
        out = []
        if args.metric in ("mise", "both"):
            out.append(f"mise {fmt_float(mise(est, truth))}")
        if args.metric in ("miae", "both"):
            out.append(f"miae {fmt_float(miae(est, truth))}")
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    sys.stdout.write("\n".join(out) + "\n")
    return 0


def _cmd_study_infill(args) -> int:
    _apply_config(args, {"a_grid": "1,4,16,64", "h_exponent": -0.25,
                         "reps": 200, "M": 20})
    seed = _require_seed(args)
    model = IntensityModel.from_grid(read_raster(args.intensity_grid))
    a_grid = _float_list(str(args.a_grid), "--a-grid")
    exponent = float(args.h_exponent)
    x = tuple(args.x) if args.x is not None else None
    results = infill_study(model, a_grid, lambda a: a ** exponent,
                           int(args.reps), seed, M=int(args.M), x=x,
                           resolution=args.resolution)
    lines = ["a_n,h_n,gamma_n,mse,stderr"]
    for rec in results:
        lines.append(",".join(fmt_float(rec[k])
                              for k in ("a_n", "h_n", "gamma_n", "mse", "stderr")))
    _emit("\n".join(lines) + "\n", args.out)
    return 0


_HANDLERS = {
    "simulate": _cmd_simulate,
    "tessellate": _cmd_tessellate,
    "fit": _cmd_fit,
    "predict": _cmd_predict,
    "tune": _cmd_tune,
    "vip": _cmd_vip,
    "evaluate": _cmd_evaluate,
    "study-infill": _cmd_study_infill,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"ERROR: {exc}\n")
        return 2
    except (DataError, FileNotFoundError) as exc:
        sys.stderr.write(f"ERROR: {exc}\n")
        return 3
    except (ValueError, KeyError, OSError) as exc:
        sys.stderr.write(f"ERROR: {exc}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
