"""Command-line entry points: simulate, run, eval, slice, query."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import pipeline, siren
from .coarse import load_grid_snapshot
from .evaluation import append_report, evaluate, export_slice, sample_eval_points
from .geometry import load_scene

log = logging.getLogger("sdfmap.cli")


def _load_spec(arg: str) -> dict:
    """Accepts a JSON file path or an inline JSON object string."""
    s = arg.strip()
    if s.startswith("{"):
        return json.loads(s)
    with open(arg) as f:
        return json.load(f)


def _parse_frames(expr: str) -> tuple[int, int]:
    try:
        a, b = expr.split("..")
        return int(a), int(b)
    except ValueError as e:
        raise SystemExit(f"--frames expects A..B (half-open), got {expr!r}") from e


def cmd_simulate(args) -> int:
    manifest = pipeline.simulate(
        args.scene,
        _load_spec(args.trajectory),
        _load_spec(args.sensor),
        args.output,
        seed=args.seed,
        noise_sigma=args.noise_sigma,
    )
    print(manifest)
    return 0


def cmd_run(args) -> int:
    with open(args.config) as f:
        doc = json.load(f)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.output is not None:
        doc["output_dir"] = args.output
    if args.frames is not None:
        doc["frame_range"] = list(_parse_frames(args.frames))
    if args.no_local:
        doc["use_local"] = False
    if args.no_coarse:
        doc["use_coarse"] = False
    if args.pipelined:
        doc["pipelined"] = True
    config = pipeline.PipelineConfig.from_dict(doc, base_dir=Path(args.config).parent)
    try:
        result = pipeline.run(config)
    except pipeline.PipelineAbortError as e:
        log.error("aborted: %s", e)
        return 1
    if result.frames_skipped:
        log.warning("completed with %d skipped frame(s)", len(result.frames_skipped))
    print(f"processed {result.frames_processed} frames -> {config.output_dir}")
    return result.exit_code


def cmd_eval(args) -> int:
    with open(args.config) as f:
        doc = json.load(f)
    config = pipeline.PipelineConfig.from_dict(doc, base_dir=Path(args.config).parent)
    if config.scene_path is None:
        log.error("evaluation needs a scene for ground truth")
        return 1
    scene = load_scene(config.scene_path)
    net = siren.load_checkpoint(args.checkpoint)
    if args.grid is not None:
        grid = load_grid_snapshot(args.grid)
        manifest = config.dataset_manifest or (config.output_dir / "dataset" / "manifest.json")
        records = pipeline.read_manifest(manifest)
        last = pipeline.load_frame(records[-1], Path(manifest).parent)
    else:
        manifest = config.dataset_manifest or (config.output_dir / "dataset" / "manifest.json")
        grid, last = pipeline.rebuild_grid(manifest, config, scene)
    points = sample_eval_points(
        grid, config.n_eval_points, np.random.SeedSequence([config.seed, 5, last.index])
    )
    report = evaluate(net, scene, points, last.sensor_origin, grid=grid, update_index=last.index)
    print(json.dumps(report.to_dict(), indent=2))
    if args.output is not None:
        append_report(args.output, report)
    return 0


def cmd_slice(args) -> int:
    net = siren.load_checkpoint(args.checkpoint)
    if args.scene is not None:
        scene = load_scene(args.scene)
        bmin, bmax = scene.bounds_min, scene.bounds_max
    elif args.bounds is not None:
        vals = [float(v) for v in args.bounds.split(",")]
        if len(vals) != 6:
            raise SystemExit("--bounds expects x0,y0,z0,x1,y1,z1")
        bmin, bmax = np.asarray(vals[:3]), np.asarray(vals[3:])
    else:
        raise SystemExit("slice needs --scene or --bounds")
    prefix = Path(args.output)
    csv_path, pgm_path = export_slice(
        lambda pts: siren.forward(net, pts),
        args.z,
        bmin,
        bmax,
        args.resolution,
        prefix.with_suffix(".csv"),
        prefix.with_suffix(".pgm"),
    )
    print(csv_path)
    print(pgm_path)
    return 0


def cmd_query(args) -> int:
    t0 = time.perf_counter()
    n = pipeline.query(args.checkpoint, args.points, args.output, with_gradient=args.gradient)
    log.info("queried %d points in %.3f s", n, time.perf_counter() - t0)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdfmap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a synthetic dataset from a scene")
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--trajectory", required=True, help="trajectory spec (JSON file or inline)")
    p.add_argument("--sensor", required=True, help="sensor spec (JSON file or inline)")
    p.add_argument("--output", required=True, help="dataset output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sigma", type=float, default=0.0, help="isotropic point jitter [m]")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("run", help="run the incremental mapping pipeline")
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--output", default=None, help="override output directory")
    p.add_argument("--frames", default=None, help="frame subset A..B (half-open)")
    p.add_argument("--no-local", action="store_true", help="ablation: drop local samples")
    p.add_argument("--no-coarse", action="store_true", help="ablation: drop coarse samples")
    p.add_argument("--pipelined", action="store_true", help="overlap fusion with training")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("eval", help="re-evaluate a checkpoint against ground truth")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", default=None, help="grid snapshot (otherwise refused from dataset)")
    p.add_argument("--output", default=None, help="append the report to this CSV")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("slice", help="export a horizontal SDF slice from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--z", type=float, required=True)
    p.add_argument("--output", required=True, help="output path prefix")
    p.add_argument("--scene", default=None, help="scene file supplying x/y bounds")
    p.add_argument("--bounds", default=None, help="x0,y0,z0,x1,y1,z1")
    p.add_argument("--resolution", type=float, default=0.05)
    p.set_defaults(fn=cmd_slice)

    p = sub.add_parser("query", help="evaluate a checkpoint on a points file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--points", required=True, help=".npy or text file, one x y z per line")
    p.add_argument("--output", required=True)
    p.add_argument("--gradient", action="store_true", help="also emit gradients")
    p.set_defaults(fn=cmd_query)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, ValueError, json.JSONDecodeError) as e:
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
