"""Command-line front end.

Exit codes: 0 success, 2 registration did not converge, 3 scan could not be
registered, 64 usage error, 66 input/output error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .geometry import StateVector
from .harness import (
    ALGOS, run_monte_carlo, run_odometry, run_resolution_sweep, solver_for, stitch_map,
)
from .pointcloud_io import ScanFormatError, load_scan, save_scan, write_table
from .scenes import DEFAULT_TRUTH, SCENE_KINDS, SceneSpec, scene_pair
from .solver import RegistrationError, SolverConfig, register
from .voxelgrid import GridConfig

EXIT_OK = 0
EXIT_NONCONVERGED = 2
EXIT_UNREGISTRABLE = 3
EXIT_USAGE = 64
EXIT_IOERR = 66

MANIFEST = "manifest.json"
FORMATS = ("bin_xyzi", "ply_ascii")
SUFFIX = {"bin_xyzi": ".bin", "ply_ascii": ".ply"}
_TRUTH_TEXT = ",".join(f"{v:g}" for v in DEFAULT_TRUTH)

logger = logging.getLogger("icet")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _state(text: str) -> StateVector:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != 6:
        raise argparse.ArgumentTypeError("expected six comma-separated values x,y,z,phi,theta,psi")
    try:
        return StateVector(*(float(p) for p in parts))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _add_common(p: argparse.ArgumentParser, algo: bool = True) -> None:
    g = p.add_argument_group("registration parameters")
    g.add_argument("--grid-res-deg", type=float, default=4.0, help="voxel angular resolution (deg)")
    g.add_argument("--min-points", type=int, default=50, help="minimum points per voxel")
    g.add_argument("--t-cond", type=float, default=5e4, help="condition-number threshold")
    g.add_argument("--t-mod", type=float, default=0.05, help="moving-object residual threshold (m)")
    g.add_argument("--max-iterations", type=_positive_int, default=30, help="WLS iteration cap")
    if algo:
        g.add_argument("--algo", choices=ALGOS, default="icet",
                       help="icet, or ndt for the baseline without sigma-point refinement")


def _add_campaign(p: argparse.ArgumentParser, trials: int) -> None:
    p.add_argument("scene", choices=SCENE_KINDS, help="scene kind")
    p.add_argument("--trials", type=_positive_int, default=trials, help="Monte Carlo trials")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--jobs", type=_positive_int, default=1, help="worker processes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--noise", type=float, default=0.002, help="per-axis range noise sigma (m)")
    p.add_argument("--truth", type=_state, default=_TRUTH_TEXT,
                   help="true displacement x,y,z,phi,theta,psi (m, rad)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="icet", description="Voxel-based LIDAR scan matching with ambiguity detection.",
                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("match", help="register one scan pair; prints a JSON report", formatter_class=fmt)
    p.add_argument("reference", help="reference scan file")
    p.add_argument("new", help="new scan file")
    p.add_argument("--format", choices=FORMATS, default="bin_xyzi", help="scan file format")
    p.add_argument("--initial-guess", type=_state, default="0,0,0,0,0,0",
                   help="x,y,z,phi,theta,psi (m, rad)")
    _add_common(p)

    p = sub.add_parser("odometry", help="chain registrations over a scan sequence", formatter_class=fmt)
    p.add_argument("scans", nargs="+", help="scan files in temporal order")
    p.add_argument("--format", choices=FORMATS, default="bin_xyzi", help="scan file format")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--map", action="store_true", help="also write the stitched map as map.ply")
    _add_common(p)

    p = sub.add_parser("montecarlo", help="Monte Carlo campaign on a synthetic scene", formatter_class=fmt)
    _add_campaign(p, trials=100)
    _add_common(p)

    p = sub.add_parser("sweep", help="mean translation error vs voxel resolution", formatter_class=fmt)
    _add_campaign(p, trials=30)
    p.add_argument("--resolutions", type=_float_list, default=[3.5, 4.0, 5.0, 6.0, 7.0],
                   help="comma-separated resolutions (deg)")
    _add_common(p)

    p = sub.add_parser("scene-gen", help="write a synthetic scan pair", formatter_class=fmt)
    p.add_argument("scene", choices=SCENE_KINDS, help="scene kind")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=FORMATS, default="bin_xyzi", help="scan file format")
    p.add_argument("--noise", type=float, default=0.002, help="per-axis range noise sigma (m)")
    p.add_argument("--truth", type=_state, default=_TRUTH_TEXT,
                   help="true displacement x,y,z,phi,theta,psi (m, rad)")

    p = sub.add_parser("rerun", help="repeat a run from its manifest", formatter_class=fmt)
    p.add_argument("manifest", help="manifest.json written by an earlier run")
    p.add_argument("--out", required=True, help="output directory")
    return parser


# --- config helpers ----------------------------------------------------------

def _grid(args) -> GridConfig:
    return GridConfig(angular_resolution=args.grid_res_deg, min_points=args.min_points)


def _solver(args, initial_guess: StateVector | None = None) -> SolverConfig:
    base = SolverConfig(t_cond=args.t_cond, t_mod=args.t_mod, max_iterations=args.max_iterations)
    cfg = solver_for(getattr(args, "algo", "icet"), base)
    if initial_guess is not None:
        cfg = replace(cfg, initial_guess=initial_guess)
    return cfg


def _jsonable(obj):
    if isinstance(obj, StateVector):
        return obj.to_dict()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and obj != obj:
        return None
    return obj


def _dump_json(data, path: Path) -> None:
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _argv_for_manifest(argv: Sequence[str]) -> list[str]:
    """Resolved argv minus the output directory, which is chosen per run."""
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        out.append(a)
    return out


def _write_manifest(out: Path, argv: Sequence[str], config: dict, outputs: list[str]) -> None:
    _dump_json({
        "tool": "icet",
        "version": __version__,
        "argv": _argv_for_manifest(argv),
        "config": config,
        "outputs": sorted(outputs + [MANIFEST]),
    }, out / MANIFEST)


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scene(args) -> SceneSpec:
    return SceneSpec(kind=args.scene, noise_sigma=args.noise, seed=args.seed)


# --- subcommands --------------------------------------------------------------

def cmd_match(args, argv) -> int:
    ref, d0 = load_scan(args.reference, args.format)
    new, d1 = load_scan(args.new, args.format)
    if d0 or d1:
        logger.info("dropped %d + %d non-finite points", d0, d1)
    try:
        rep = register(ref, new, _grid(args), _solver(args, args.initial_guess))
    except RegistrationError as exc:
        print(f"icet: cannot register {args.new} against {args.reference}: {exc}", file=sys.stderr)
        return EXIT_UNREGISTRABLE
    out = rep.to_dict()
    out["algo"] = args.algo
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK if rep.converged else EXIT_NONCONVERGED


def cmd_odometry(args, argv) -> int:
    scans = [load_scan(p, args.format)[0] for p in args.scans]
    frames = run_odometry(scans, _grid(args), _solver(args))
    out = _out_dir(args.out)
    rows = [f.to_row() for f in frames]
    for row, path in zip(rows, args.scans):
        row["file"] = Path(path).name
    write_table(rows, out / "trajectory.csv")
    outputs = ["trajectory.csv"]
    if args.map:
        save_scan(stitch_map(scans, [f.pose for f in frames]), out / "map.ply", "ply_ascii")
        outputs.append("map.ply")
    _write_manifest(out, argv, {
        "scans": [Path(p).name for p in args.scans],
        "grid": asdict(_grid(args)),
        "solver": _solver_dict(_solver(args)),
    }, outputs)
    failed = sum(f.status == "failed" for f in frames)
    if failed:
        print(f"icet: {failed} frame pair(s) failed to register; identity used", file=sys.stderr)
    return EXIT_OK


def _solver_dict(cfg: SolverConfig) -> dict:
    d = asdict(cfg)
    d["initial_guess"] = cfg.initial_guess.to_dict()
    return d


def cmd_montecarlo(args, argv) -> int:
    res = run_monte_carlo(
        _scene(args), args.trials, args.algo, args.seed, truth=args.truth,
        grid_cfg=_grid(args), solver_cfg=_solver(args), jobs=args.jobs,
    )
    out = _out_dir(args.out)
    write_table(res.rows(), out / "trials.csv")
    _dump_json(res.summary, out / "summary.json")
    _write_manifest(out, argv, res.config.to_dict(), ["trials.csv", "summary.json"])
    print(json.dumps(_jsonable(res.summary["states"]), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args, argv) -> int:
    rows = run_resolution_sweep(
        _scene(args), args.resolutions, args.trials, args.seed, algo=args.algo,
        truth=args.truth, grid_cfg=_grid(args), solver_cfg=_solver(args), jobs=args.jobs,
    )
    out = _out_dir(args.out)
    write_table(rows, out / "sweep.csv")
    _write_manifest(out, argv, {
        "scene": asdict(_scene(args)),
        "resolutions": args.resolutions,
        "trials": args.trials,
        "seed": args.seed,
        "algo": args.algo,
        "truth": args.truth.to_dict(),
        "grid": asdict(_grid(args)),
        "solver": _solver_dict(_solver(args)),
    }, ["sweep.csv"])
    return EXIT_OK


def cmd_scenegen(args, argv) -> int:
    spec = _scene(args)
    ref, new = scene_pair(spec, args.truth)
    out = _out_dir(args.out)
    suffix = SUFFIX[args.format]
    save_scan(ref, out / f"reference{suffix}", args.format)
    save_scan(new, out / f"new{suffix}", args.format)
    _write_manifest(out, argv, {"scene": asdict(spec), "truth": args.truth.to_dict(),
                                "format": args.format},
                    [f"reference{suffix}", f"new{suffix}"])
    return EXIT_OK


COMMANDS = {
    "match": cmd_match,
    "odometry": cmd_odometry,
    "montecarlo": cmd_montecarlo,
    "sweep": cmd_sweep,
    "scene-gen": cmd_scenegen,
}


def _configure_logging() -> None:
    level = os.environ.get("ICET_LOG", "WARNING").upper()
    if level.isdigit():
        level = int(level)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _configure_logging()
    except ValueError:
        print(f"icet: bad ICET_LOG level {os.environ.get('ICET_LOG')!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "rerun":
        try:
            manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
            replay = list(manifest["argv"])
        except (OSError, ValueError, KeyError, TypeError) as exc:
            print(f"icet: cannot read manifest {args.manifest}: {exc}", file=sys.stderr)
            return EXIT_IOERR
        return main(replay + ["--out", args.out])
    try:
        return COMMANDS[args.command](args, argv)
    except ScanFormatError as exc:
        print(f"icet: {exc}", file=sys.stderr)
        return EXIT_IOERR
    except ValueError as exc:
        # bad parameter values, poses outside a scene
        print(f"icet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        name = getattr(exc, "filename", None)
        print(f"icet: {name + ': ' if name else ''}{exc.strerror or exc}", file=sys.stderr)
        return EXIT_IOERR


if __name__ == "__main__":
    sys.exit(main())
