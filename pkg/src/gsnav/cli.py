"""Command-line front end: simulate, run, eval, render.

Exit codes: 0 success, 2 configuration, 3 data, 4 numerical failure.  Every
failure prints a single stderr line of the form `error[<class>]: <message>`
so wrappers can parse outcomes without scraping tracebacks.
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics
from .config import RunConfig, ScenarioConfig
from .errors import ConfigError, DataError, GsnavError, NoOverlap
from .gaussian_map import load_map
from .geometry import Pose, Rot3
from .images import save_image
from .pipeline import run_pipeline, simulate_dataset
from .rasterizer import render
from .sensor_sim import evaluate_ape, load_dataset, read_tum

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class _CliError(Exception):
    def __init__(self, kind: str, code: int, message: str):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    """argparse that reports through the one-line error convention."""

    def error(self, message):
        raise _CliError("config", EXIT_CONFIG, message)


def _read_text(path, what: str) -> str:
    p = Path(path)
    if not p.exists():
        raise _CliError("data", EXIT_DATA, f"{what} not found: {p}")
    return p.read_text()


def _floats(text: str, n: int, what: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != n:
        raise ConfigError(f"{what} needs {n} comma-separated numbers")
    try:
        return np.array([float(x) for x in parts])
    except ValueError as exc:
        raise ConfigError(f"bad {what}: {exc}")


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args) -> int:
    if args.print_config:
        cfg = (ScenarioConfig.load(_read_text(args.config, "config"))
               if args.config else ScenarioConfig())
        sys.stdout.write(cfg.dump())
        return EXIT_OK
    if not args.config:
        raise ConfigError("simulate requires --config")
    if not args.out:
        raise ConfigError("simulate requires --out")
    cfg = ScenarioConfig.load(_read_text(args.config, "config"))
    if args.seed is not None:
        cfg.seed = args.seed
    summary = simulate_dataset(cfg, args.out)
    print(f"dataset: {summary.root}")
    print(f"duration_s = {summary.duration:.6g}")
    print(f"epochs = {summary.n_epochs}")
    print(f"frames = {summary.n_frames}")
    return EXIT_OK


def cmd_run(args) -> int:
    if args.print_config:
        cfg = (RunConfig.load(_read_text(args.config, "config"))
               if args.config else RunConfig())
        sys.stdout.write(cfg.dump())
        return EXIT_OK
    if not args.dataset:
        raise ConfigError("run requires a dataset directory")
    if not args.out:
        raise ConfigError("run requires --out")
    cfg = (RunConfig.load(_read_text(args.config, "config"))
           if args.config else RunConfig())
    if args.seed is not None:
        cfg.seed = args.seed
    if args.no_gs:
        cfg.use_gs = False
    if args.no_prune:
        cfg.use_pruning = False
    if args.no_weighting:
        cfg.use_weighting = False
    dataset = load_dataset(args.dataset)
    result = run_pipeline(dataset, cfg, args.out, paced=args.paced,
                          pipelined=args.pipelined)
    print(f"estimate: {result.estimate_path}")
    print(f"diagnostics: {result.diagnostics_path}")
    print(f"map: {result.map_path}")
    print(f"epochs = {len(result.times)}")
    print(f"map_size = {result.map_size}")
    print(f"landmarks = {result.n_landmarks}")
    return EXIT_OK


def cmd_eval(args) -> int:
    est_t, est_p = read_tum(args.estimate)
    tru_t, tru_p = read_tum(args.truth)
    ape = evaluate_ape(est_t, est_p, tru_t, tru_p)
    print(f"translation_rmse = {ape.translation_rmse:.6g} m")
    print(f"rotation_rmse = {ape.rotation_rmse_deg:.6g} deg")
    out = Path(args.out) if args.out else Path(args.estimate).parent
    out.mkdir(parents=True, exist_ok=True)
    series = out / "ape_enu.csv"
    with open(series, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "east", "north", "up", "translation", "rotation_deg"])
        for i, t in enumerate(ape.times):
            e = ape.errors_enu[i]
            w.writerow([f"{t:.9f}", f"{e[0]:.9g}", f"{e[1]:.9g}",
                        f"{e[2]:.9g}",
                        f"{np.linalg.norm(e):.9g}",
                        f"{ape.rotation_errors_deg[i]:.9g}"])
    print(f"series: {series}")
    return EXIT_OK


def cmd_render(args) -> int:
    if not Path(args.map).exists():
        raise _CliError("data", EXIT_DATA, f"map not found: {args.map}")
    try:
        gmap = load_map(args.map)
    except Exception as exc:
        raise DataError(f"map failed to parse: {exc}")
    vals = _floats(args.pose, 7, "--pose")
    parts = args.camera.split(",")
    if len(parts) not in (6, 7, 8):
        raise ConfigError("--camera needs fx,fy,cx,cy,width,height[,near[,far]]")
    try:
        cam = [float(x) for x in parts]
    except ValueError as exc:
        raise ConfigError(f"bad --camera: {exc}")
    bright = _floats(args.brightness, 2, "--brightness")
    if not args.out:
        raise ConfigError("render requires --out")
    quat_wxyz = np.array([vals[6], vals[3], vals[4], vals[5]])
    pose_wc = Pose(Rot3(quat_wxyz), vals[0:3])
    intr = CameraIntrinsics(
        fx=cam[0], fy=cam[1], cx=cam[2], cy=cam[3], width=int(cam[4]),
        height=int(cam[5]), near=cam[6] if len(cam) > 6 else 0.1,
        far=cam[7] if len(cam) > 7 else 1000.0)
    out = render(gmap, pose_wc.inverse(), intr,
                 brightness=(bright[0], bright[1]))
    if args.opacity:
        image = np.repeat(out.t_acc[:, :, None], 3, axis=2)
    else:
        image = out.color
    save_image(args.out, image)
    print(f"image: {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring

def build_parser() -> _Parser:
    p = _Parser(prog="gsnav", description=__doc__)
    sub = p.add_subparsers(dest="command")

    sim = sub.add_parser("simulate", help="generate a dataset from a scenario")
    sim.add_argument("--config", help="scenario config path")
    sim.add_argument("--out", help="output dataset directory")
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--print-config", action="store_true")
    sim.set_defaults(fn=cmd_simulate)

    run = sub.add_parser("run", help="replay a dataset through the estimator")
    run.add_argument("dataset", nargs="?", help="dataset directory")
    run.add_argument("--config", help="run config path")
    run.add_argument("--out", help="output directory")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--no-gs", action="store_true",
                     help="disable the photometric map factor")
    run.add_argument("--no-prune", action="store_true",
                     help="disable motion-aware pruning")
    run.add_argument("--no-weighting", action="store_true",
                     help="fixed photometric variance instead of adaptive")
    run.add_argument("--paced", action="store_true",
                     help="sleep to replay at sensor rate")
    run.add_argument("--pipelined", action="store_true",
                     help="map optimization on a worker thread "
                          "(not bit-deterministic)")
    run.add_argument("--print-config", action="store_true")
    run.set_defaults(fn=cmd_run)

    ev = sub.add_parser("eval", help="absolute pose error between TUM files")
    ev.add_argument("estimate")
    ev.add_argument("truth")
    ev.add_argument("--out", help="directory for the error series CSV")
    ev.set_defaults(fn=cmd_eval)

    ren = sub.add_parser("render", help="render a saved map")
    ren.add_argument("map")
    ren.add_argument("--pose", required=True,
                     help="camera-in-world tx,ty,tz,qx,qy,qz,qw")
    ren.add_argument("--camera", required=True, help="fx,fy,cx,cy,width,height")
    ren.add_argument("--brightness", default="1,0", help="gain,offset")
    ren.add_argument("--opacity", action="store_true",
                     help="write accumulated opacity instead of color")
    ren.add_argument("--out", help="output image path")
    ren.set_defaults(fn=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "fn", None):
            raise _CliError("config", EXIT_CONFIG,
                            "expected a command: simulate, run, eval, render")
        return args.fn(args)
    except _CliError as exc:
        print(f"error[{exc.kind}]: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, NoOverlap) as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except GsnavError as exc:
        print(f"error[numerical]: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
