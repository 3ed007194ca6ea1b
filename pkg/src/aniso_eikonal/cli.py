"""Command-line interface: ``aniso-eikonal {forward,invert,synth,metrics,frames}``.

Settings are resolved with increasing precedence from built-in defaults,
the ``--config`` file, ``ANISO_EIKONAL_*`` environment variables and
explicit flags. The config file is INI: a ``[global]`` section for the
global flags and one section per subcommand, keys named like the long
flags with ``_`` for ``-`` (``outer_iters = 300``). The environment
variable for a key is its upper-case name with the prefix, e.g.
``ANISO_EIKONAL_SEED`` or ``ANISO_EIKONAL_OUTER_ITERS``.

Exit codes: 0 success, 1 invalid input or failed run, 2 forward solve
did not converge.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from importlib import resources
from typing import Dict, List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .conductivity import decompose, params_from_velocities
from .eikonal import ConvergenceError, EikonalModel, SolverConfig
from .frames import compute_frames
from .io import (
    MeshFormatError, ensure_dir, read_measurements, read_tensor_csv, read_vtk, write_activation_csv,
    write_measurements, write_tensor_csv, write_trace_csv, write_vtk,
)
from .mesh import MeshError, build_geometry, load_mesh, project_points
from .metrics import (
    angle_and_velocity_errors, baseline_errors, format_table, front_direction_and_speed,
    local_baseline, write_table,
)
from .pipeline import MIN_SAMPLES, InsufficientDataError, InversionConfig, run_inversion
from .synthetic import add_noise, constant_angle, disk_lesion, make_synthetic, world_direction

ENV_PREFIX = "ANISO_EIKONAL_"
BUILTIN = "builtin:"
logger = logging.getLogger("aniso_eikonal")


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- argument types ---------------------------------------------------------
def _floats(n: Optional[int] = None):
    def parse(text: str):
        try:
            vals = [float(x) for x in str(text).replace(" ", "").split(",") if x != ""]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
        if not vals or (n is not None and len(vals) != n):
            want = f"{n} " if n else ""
            raise argparse.ArgumentTypeError(f"expected {want}comma-separated numbers, got {text!r}")
        return vals
    parse.__name__ = "float list"
    return parse


def _constant_spec(text: str):
    vals = _floats()(text)
    if len(vals) == 1:
        vals = [vals[0], vals[0], 0.0]
    if len(vals) != 3 or vals[0] <= 0 or vals[1] <= 0:
        raise argparse.ArgumentTypeError(
            f"constant tensor spec is 'v' or 'v_fiber,v_cross,angle_deg' with positive speeds, got {text!r}")
    return vals


def _lesion_spec(text: str):
    vals = _floats(4)(text)
    if vals[3] <= 0:
        raise argparse.ArgumentTypeError(f"lesion radius must be positive, got {text!r}")
    return vals


def _bool(text) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off", ""):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _positive_int(text) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def resolve_path(path: str) -> str:
    """Map ``builtin:NAME`` to a bundled data file; other paths pass through."""
    if not path.startswith(BUILTIN):
        return path
    name = path[len(BUILTIN):]
    root = resources.files("aniso_eikonal") / "data"
    for cand in (name, name + ".off", name + ".csv", name + ".vtk"):
        p = root / cand
        if p.is_file():
            return str(p)
    raise FileNotFoundError(f"no bundled data file named {name!r}")


# -- parser -----------------------------------------------------------------
def _add_solver(p):
    p.add_argument("--kappa", type=float, default=10.0, help="softmin sharpness (1/ms) [10]")
    p.add_argument("--tol", type=float, default=1e-6, help="sweep convergence tolerance (ms) [1e-6]")
    p.add_argument("--max-iters", type=_positive_int, default=5000, help="maximum sweeps [5000]")


def _add_source(p):
    p.add_argument("--source", type=int, default=0, help="source vertex index [0]")
    p.add_argument("--source-point", type=_floats(3), default=None, metavar="X,Y,Z",
                   help="use the vertex nearest to this point instead of --source")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aniso-eikonal", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--seed", type=int, default=0, help="random seed [0]")
    parser.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread limit")
    parser.add_argument("--config", default=None, help="INI config file")
    parser.add_argument("--log-level", default="WARNING", help="logging level [WARNING]")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("forward", help="solve the eikonal equation for a tensor field")
    p.add_argument("--mesh", help="OFF/VTK mesh or builtin:NAME")
    p.add_argument("--tensors", default=None, help="per-triangle CSV tri_id,d1,d2,d3")
    p.add_argument("--constant", type=_constant_spec, default=[0.6, 0.4, 0.0], metavar="SPEC",
                   help="'v' or 'v_fiber,v_cross,angle_deg' when --tensors is absent [0.6,0.4,0]")
    _add_source(p)
    _add_solver(p)
    p.add_argument("--hard", action="store_true", help="hard min instead of softmin")
    p.add_argument("--out", default="forward_out", help="output directory [forward_out]")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("synth", help="synthetic ground truth and measurements")
    p.add_argument("--mesh", help="OFF/VTK mesh or builtin:NAME")
    p.add_argument("--fiber-angle", type=float, default=30.0,
                   help="fiber angle from the local v1 axis (deg) [30]")
    p.add_argument("--fiber-direction", type=_floats(3), default=None, metavar="X,Y,Z",
                   help="world fiber direction projected onto the surface (overrides --fiber-angle)")
    p.add_argument("--v-fiber", type=float, default=0.6, help="fiber speed (m/s) [0.6]")
    p.add_argument("--v-cross", type=float, default=0.4, help="cross-fiber speed (m/s) [0.4]")
    p.add_argument("--lesion", type=_lesion_spec, action="append", default=None, metavar="X,Y,Z,R",
                   help="disk lesion centre and radius (mm); repeatable")
    p.add_argument("--lesion-velocity", type=float, default=0.2, help="lesion speed (m/s) [0.2]")
    _add_source(p)
    p.add_argument("--n-samples", type=int, default=884, help="number of surface samples [884]")
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian noise sigma (ms) [0]")
    p.add_argument("--include-source", action="store_true",
                   help="place the first sample on the source vertex")
    _add_solver(p)
    p.add_argument("--out", default="synth_out", help="output directory [synth_out]")
    p.set_defaults(func=cmd_synth, tol=1e-8)

    p = sub.add_parser("invert", help="cross-validated conductivity inversion")
    p.add_argument("--mesh", help="OFF/VTK mesh or builtin:NAME")
    p.add_argument("--measurements", help="CSV x_mm,y_mm,z_mm,lat_ms")
    p.add_argument("--lambdas", type=_floats(), default=[float(x) for x in InversionConfig.lambdas],
                   help="comma-separated TV weights [7 values over 1e-5..1e-2]")
    p.add_argument("--eps", type=float, default=5e-2, help="Huber threshold [0.05]")
    p.add_argument("--split", type=float, default=0.8, help="training fraction [0.8]")
    p.add_argument("--outer-iters", type=int, default=2000, help="outer iterations per lambda [2000]")
    p.add_argument("--inner-iters", type=int, default=200, help="primal-dual iterations [200]")
    p.add_argument("--inner-tol", type=float, default=1e-6, help="primal-dual tolerance [1e-6]")
    p.add_argument("--rtol", type=float, default=None, help="stop on relative objective change")
    p.add_argument("--v0", type=float, default=0.7, help="initial isotropic speed (m/s) [0.7]")
    p.add_argument("--kappa", type=float, default=10.0, help="softmin sharpness (1/ms) [10]")
    p.add_argument("--solver-tol", type=float, default=1e-4, help="forward tolerance (ms) [1e-4]")
    p.add_argument("--max-dist", type=float, default=None,
                   help="drop measurements farther than this from the mesh (mm)")
    p.add_argument("--no-warm-start", action="store_true", help="cold start every lambda")
    p.add_argument("--out", default="invert_out", help="output directory [invert_out]")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("metrics", help="compare a result bundle with a ground-truth bundle")
    p.add_argument("--model", help="result bundle directory or VTK file")
    p.add_argument("--gt", help="ground-truth bundle directory or VTK file")
    p.add_argument("--baseline", action="store_true",
                   help="also evaluate the local-fit baseline on the GT measurements")
    p.add_argument("--k-neighbors", type=int, default=10, help="baseline neighbourhood size [10]")
    p.add_argument("--append", action="store_true", help="append a row to an existing table")
    p.add_argument("--out", default="metrics.csv", help="metrics CSV [metrics.csv]")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("frames", help="compute and export tangent frames")
    p.add_argument("--mesh", help="OFF/VTK mesh or builtin:NAME")
    p.add_argument("--smoothing-iters", type=int, default=200, help="smoothing sweeps [200]")
    p.add_argument("--frame-tol", type=float, default=1e-6, help="relative energy tolerance [1e-6]")
    p.add_argument("--high-variation-deg", type=float, default=30.0,
                   help="flag triangles whose frame deviates more than this [30]")
    p.add_argument("--out", default="frames.vtk", help="output VTK [frames.vtk]")
    p.set_defaults(func=cmd_frames)
    return parser


# -- configuration layering ---------------------------------------------------
def _subparsers(parser) -> Dict[str, argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return dict(action.choices)
    return {}


def _convert(action: argparse.Action, raw: str, source: str):
    try:
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            return _bool(raw)
        if isinstance(action, argparse._AppendAction):
            return [action.type(part) for part in str(raw).split(";") if part.strip()]
        return action.type(raw) if action.type else raw
    except (argparse.ArgumentTypeError, ValueError) as exc:
        raise CLIError(f"{source}: invalid value for {action.dest}: {exc}") from None


def _layer(p: argparse.ArgumentParser, section: Dict[str, str], env, source: str,
           skip=("help", "version", "config")) -> None:
    values = {}
    for action in p._actions:
        dest = action.dest
        if dest in skip or not action.option_strings:
            continue
        if dest in section:
            values[dest] = _convert(action, section[dest], f"{source} [{p.prog.split()[-1]}]")
        key = ENV_PREFIX + dest.upper()
        if key in env:
            values[dest] = _convert(action, env[key], key)
    if values:
        p.set_defaults(**values)


def _read_config(path: str) -> configparser.ConfigParser:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise CLIError(f"{path}: {exc}") from None
    return cp


def _section(cp, name: str) -> Dict[str, str]:
    if cp is None or not cp.has_section(name):
        return {}
    return {k.replace("-", "_"): v for k, v in cp.items(name)}


def parse_args(argv: Optional[Sequence[str]] = None, env=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    env = os.environ if env is None else env
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=env.get(ENV_PREFIX + "CONFIG"))
    known, _ = pre.parse_known_args(argv)
    cp = _read_config(known.config) if known.config else None
    parser = build_parser()
    _layer(parser, _section(cp, "global"), env, known.config or "config")
    for name, p in _subparsers(parser).items():
        _layer(p, _section(cp, name), env, known.config or "config")
    args = parser.parse_args(argv)
    args.config = known.config
    if args.command is None:
        parser.print_help(sys.stderr)
        raise CLIError("a subcommand is required")
    return args


def config_echo(args: argparse.Namespace) -> Dict[str, object]:
    """Every effective setting, in a JSON-friendly form."""
    out = {}
    for k, v in sorted(vars(args).items()):
        if k == "func":
            continue
        out[k] = v
    return out


def write_config_ini(path: str, args: argparse.Namespace) -> None:
    """Write a config file that reproduces this run when passed to ``--config``."""
    cp = configparser.ConfigParser()
    cp["global"] = {"seed": str(args.seed)}
    section = {}
    for k, v in sorted(vars(args).items()):
        if k in ("func", "command", "seed", "threads", "config", "log_level") or v is None:
            continue
        if isinstance(v, bool):
            section[k] = "true" if v else "false"
        elif isinstance(v, list) and v and isinstance(v[0], list):
            section[k] = ";".join(",".join(repr(float(x)) for x in item) for item in v)
        elif isinstance(v, list):
            section[k] = ",".join(repr(float(x)) for x in v)
        else:
            section[k] = repr(v) if isinstance(v, float) else str(v)
    cp[args.command] = section
    with open(path, "w") as fh:
        cp.write(fh)


def _dump_json(path: str, obj) -> None:
    def default(o):
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.floating):
            return float(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(f"not serialisable: {type(o)}")
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=default, allow_nan=True)
        fh.write("\n")


# -- shared helpers -------------------------------------------------------------
def _require(args, *names):
    for n in names:
        if getattr(args, n, None) in (None, ""):
            raise CLIError(f"--{n.replace('_', '-')} is required")


def _load(args):
    mesh = load_mesh(resolve_path(args.mesh))
    geom = build_geometry(mesh)
    return mesh, geom


def _source_vertex(args, geom) -> int:
    if args.source_point is not None:
        return int(np.argmin(np.linalg.norm(geom.vertices - np.asarray(args.source_point), axis=1)))
    if not 0 <= args.source < geom.n_vertices:
        raise CLIError(f"source vertex {args.source} out of range (mesh has {geom.n_vertices})")
    return int(args.source)


def _cell_fields(T, params) -> Dict[str, np.ndarray]:
    return {
        "D_world": T.D, "fiber_dir": T.fiber_dir, "v_fiber": T.v_fiber, "v_cross": T.v_cross,
        "isotropic": T.isotropic.astype(float),
        "d1": params[:, 0], "d2": params[:, 1], "d3": params[:, 2],
    }


# -- subcommands --------------------------------------------------------------------
def cmd_forward(args) -> int:
    _require(args, "mesh")
    mesh, geom = _load(args)
    frames = compute_frames(geom)
    if args.tensors:
        params = read_tensor_csv(resolve_path(args.tensors))
        if len(params) != geom.n_triangles:
            raise CLIError(f"tensor file has {len(params)} rows, mesh has {geom.n_triangles} triangles")
    else:
        vf, vc, ang = args.constant
        params = params_from_velocities(np.full(geom.n_triangles, vf), np.full(geom.n_triangles, vc),
                                        np.full(geom.n_triangles, np.radians(ang)))
    src = _source_vertex(args, geom)
    cfg = SolverConfig(kappa=args.kappa, tol=args.tol, max_iters=args.max_iters, hard=args.hard)
    field = EikonalModel(geom, frames, cfg).solve(params, src)
    out = ensure_dir(args.out)
    T = decompose(params, frames)
    write_vtk(os.path.join(out, "activation.vtk"), mesh.vertices, mesh.triangles,
              {"u_ms": field.u}, _cell_fields(T, params))
    write_activation_csv(os.path.join(out, "activation.csv"), field.u)
    _dump_json(os.path.join(out, "summary.json"), {
        "converged": field.converged, "iterations": field.iterations, "residual_ms": field.residual,
        "source": src, "u_max_ms": float(field.u.max()), "config": config_echo(args),
        "version": __version__,
    })
    write_config_ini(os.path.join(out, "config.ini"), args)
    if not field.converged:
        print(f"forward solve did not converge after {field.iterations} sweeps "
              f"(residual {field.residual:.3g} ms)", file=sys.stderr)
        return 2
    print(f"converged in {field.iterations} sweeps; max u = {field.u.max():.4g} ms -> {out}")
    return 0


def cmd_synth(args) -> int:
    _require(args, "mesh")
    mesh, geom = _load(args)
    frames = compute_frames(geom)
    if args.n_samples < 1:
        raise InsufficientDataError("insufficient data: --n-samples must be positive")
    rule = world_direction(args.fiber_direction) if args.fiber_direction else constant_angle(args.fiber_angle)
    lesion = np.zeros(geom.n_triangles, dtype=bool)
    for x, y, z, r in args.lesion or []:
        lesion |= disk_lesion(geom, [x, y, z], r)
    src = _source_vertex(args, geom)
    cfg = SolverConfig(kappa=args.kappa, tol=args.tol, max_iters=args.max_iters)
    gt, meas = make_synthetic(geom, frames, rule, args.v_fiber, args.v_cross, lesion,
                              args.lesion_velocity, src, args.n_samples, args.seed, cfg,
                              include_source=args.include_source)
    noisy = add_noise(meas, args.noise, seed=args.seed + 1)
    out = ensure_dir(args.out)
    T = decompose(gt.params, frames)
    cells = _cell_fields(T, gt.params)
    cells["lesion"] = gt.lesion.astype(float)
    write_vtk(os.path.join(out, "ground_truth.vtk"), mesh.vertices, mesh.triangles,
              {"u_ms": gt.activation.u}, cells)
    write_tensor_csv(os.path.join(out, "tensors.csv"), gt.params)
    write_measurements(os.path.join(out, "measurements.csv"), noisy.points, noisy.times)
    write_measurements(os.path.join(out, "measurements_clean.csv"), meas.points, meas.times)
    _dump_json(os.path.join(out, "summary.json"), {
        "source": src, "n_samples": len(meas.times), "sigma_ms": noisy.sigma,
        "psnr_db": noisy.psnr_db if np.isfinite(noisy.psnr_db) else None,
        "lesion_triangles": int(gt.lesion.sum()), "forward_iterations": gt.activation.iterations,
        "config": config_echo(args), "version": __version__,
    })
    write_config_ini(os.path.join(out, "config.ini"), args)
    print(f"ground truth and {len(meas.times)} samples -> {out}")
    return 0


def cmd_invert(args) -> int:
    _require(args, "mesh", "measurements")
    mesh, geom = _load(args)
    points, times = read_measurements(resolve_path(args.measurements))
    if len(times) < MIN_SAMPLES:
        raise InsufficientDataError(f"insufficient data: {len(times)} measurements, need {MIN_SAMPLES}")
    max_dist = np.inf if args.max_dist is None else args.max_dist
    samples = project_points(geom, points, times, max_dist=max_dist)
    cfg = InversionConfig(
        lambdas=args.lambdas, eps=args.eps, split=args.split, seed=args.seed,
        outer_iters=args.outer_iters, inner_iters=args.inner_iters, inner_tol=args.inner_tol,
        v0=args.v0, kappa=args.kappa, solver_tol=args.solver_tol, max_dist=max_dist,
        warm_start=not args.no_warm_start, rtol=args.rtol)
    frames = compute_frames(geom)
    res = run_inversion(geom, samples, cfg, frames)
    out = ensure_dir(args.out)
    write_vtk(os.path.join(out, "result.vtk"), mesh.vertices, mesh.triangles,
              {"u_ms": res.activation.u + res.time_offset}, _cell_fields(res.tensors, res.params))
    write_tensor_csv(os.path.join(out, "tensors.csv"), res.params)
    for lam, trace in res.traces.items():
        write_trace_csv(os.path.join(out, f"trace_{lam:g}.csv"), trace)
    best = next(r for r in res.per_lambda if r.get("lambda") == res.lam_opt)
    _dump_json(os.path.join(out, "summary.json"), {
        "lambda_opt": res.lam_opt, "lambda_grid": list(cfg.lambdas),
        "train_rmse_ms": best["train_rmse_ms"], "val_rmse_ms": best["val_rmse_ms"],
        "per_lambda": res.per_lambda, "source": res.source, "time_offset_ms": res.time_offset,
        "n_samples": len(samples), "n_dropped": int(len(samples.dropped)),
        "n_train": len(res.train_index), "n_val": len(res.val_index),
        "warm_started": res.warm_started, "seed": args.seed,
        "inversion_config": cfg.to_dict(), "config": config_echo(args), "version": __version__,
    })
    write_config_ini(os.path.join(out, "config.ini"), args)
    print(f"lambda* = {res.lam_opt:g}; validation RMSE {best['val_rmse_ms']:.4g} ms -> {out}")
    return 0


def _bundle_vtk(path: str) -> str:
    path = resolve_path(path)
    if os.path.isdir(path):
        for name in ("result.vtk", "ground_truth.vtk", "activation.vtk"):
            cand = os.path.join(path, name)
            if os.path.isfile(cand):
                return cand
        raise FileNotFoundError(f"no result.vtk, ground_truth.vtk or activation.vtk in {path}")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"bundle not found: {path}")
    return path


def _bundle_fields(path: str):
    data = read_vtk(_bundle_vtk(path))
    need = ["D_world", "fiber_dir", "v_fiber"]
    missing = [k for k in need if k not in data.cell_data] + (["u_ms"] if "u_ms" not in data.point_data else [])
    if missing:
        raise CLIError(f"{path}: bundle lacks arrays {missing}")
    return data


def cmd_metrics(args) -> int:
    _require(args, "model", "gt")
    model, gt = _bundle_fields(args.model), _bundle_fields(args.gt)
    if model.triangles.shape != gt.triangles.shape or not np.array_equal(model.triangles, gt.triangles):
        raise CLIError("model and ground-truth bundles are on different meshes")
    from .mesh import TriangleMesh
    geom = build_geometry(TriangleMesh(gt.points, gt.triangles))

    def fields(b):
        e, v, _ = front_direction_and_speed(b.point_data["u_ms"], b.cell_data["D_world"], geom)
        iso = b.cell_data.get("isotropic", np.zeros(geom.n_triangles)) > 0.5
        return dict(e=e, v=v, f=b.cell_data["fiber_dir"], vf=b.cell_data["v_fiber"], isotropic=iso)

    fm, fg = fields(model), fields(gt)
    rep = angle_and_velocity_errors(fm, fg, geom.areas)
    gt_dir = os.path.dirname(_bundle_vtk(args.gt))
    sigma, psnr_db = 0.0, float("inf")
    summ = os.path.join(gt_dir, "summary.json")
    if os.path.isfile(summ):
        with open(summ) as fh:
            s = json.load(fh)
        sigma = float(s.get("sigma_ms", 0.0))
        psnr_db = float("inf") if s.get("psnr_db") is None else float(s["psnr_db"])
    row = {
        "sigma_ms": sigma, "psnr_db": psnr_db,
        "inversion_front_velocity_err_mps": rep.front_velocity_rmse,
        "inversion_front_angle_err_deg": rep.front_angle_rmse,
        "inversion_fiber_velocity_err_mps": rep.fiber_velocity_rmse,
        "inversion_fiber_angle_err_deg": rep.fiber_angle_rmse,
        "local_front_velocity_err_mps": float("nan"), "local_front_angle_err_deg": float("nan"),
    }
    if args.baseline:
        mpath = os.path.join(gt_dir, "measurements.csv")
        if not os.path.isfile(mpath):
            raise FileNotFoundError(f"baseline needs measurements: {mpath} not found")
        pts, t = read_measurements(mpath)
        sp, di, ok = local_baseline(pts, t, args.k_neighbors)
        host = project_points(geom, pts, t).tri
        b = baseline_errors(sp, di, ok, fg["e"][host], fg["v"][host])
        row["local_front_velocity_err_mps"] = b["front_velocity_rmse"]
        row["local_front_angle_err_deg"] = b["front_angle_rmse"]
    out_dir = os.path.dirname(os.path.abspath(args.out))
    ensure_dir(out_dir)
    write_table(args.out, [row], append=args.append)
    _dump_json(os.path.splitext(args.out)[0] + ".json", {"report": rep.summary(), "row": row,
                                                          "config": config_echo(args)})
    print(format_table([row]))
    return 0


def cmd_frames(args) -> int:
    _require(args, "mesh")
    mesh, geom = _load(args)
    fr = compute_frames(geom, args.smoothing_iters, args.frame_tol, args.high_variation_deg)
    ensure_dir(os.path.dirname(os.path.abspath(args.out)))
    hv = np.zeros(geom.n_triangles)
    hv[fr.high_variation] = 1.0
    write_vtk(args.out, mesh.vertices, mesh.triangles, None,
              {"v1": fr.v1, "v2": fr.v2, "n": fr.n, "high_variation": hv})
    print(json.dumps({"triangles": geom.n_triangles, "iterations": fr.iterations,
                      "energy": fr.energy_history[-1] if len(fr.energy_history) else None,
                      "high_variation": int(hv.sum()), "out": args.out}))
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except (CLIError, FileNotFoundError) as exc:
        print(f"aniso-eikonal: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse: usage errors, --help, --version
        return exc.code if isinstance(exc.code, int) else 1
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except ConvergenceError as exc:
        print(f"aniso-eikonal: {exc}", file=sys.stderr)
        return 2
    except (CLIError, FileNotFoundError, MeshError, MeshFormatError, InsufficientDataError,
            ValueError, RuntimeError) as exc:
        print(f"aniso-eikonal: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
