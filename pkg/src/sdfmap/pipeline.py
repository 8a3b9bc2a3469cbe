"""End-to-end incremental mapping loop and its run artifacts.

Per frame: fuse into the coarse grid, refresh the ESDF, extract coarse and
local training samples, train the network for the configured epochs; every
k-th frame evaluate against ground truth and export an SDF slice. All
randomness derives from the master seed and the frame index, so a (config,
seed) pair fully determines every artifact except the timing log.
"""

from __future__ import annotations

import concurrent.futures
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import siren, trainer
from .coarse import (
    CoarseSamplerConfig,
    CoarseSdfGrid,
    integrate_frame,
    sample_training_points,
    save_grid_snapshot,
    update_esdf,
)
from .evaluation import EvalReport, append_report, evaluate, export_slice, sample_eval_points
from .geometry import Pose, Scene, load_scene
from .local_sdf import LocalSamplerConfig, generate_local_samples
from .samples import SdfSamples
from .sensor import (
    DepthCameraModel,
    LidarModel,
    Trajectory,
    load_frame,
    read_manifest,
    render_depth_frame,
    render_lidar_frame,
    write_dataset,
)
from .trainer import TrainConfig

log = logging.getLogger("sdfmap")

# sub-stream tags for deriving per-stage generators from the master seed
_S_NET, _S_COARSE, _S_LOCAL, _S_TRAIN, _S_EVAL, _S_NOISE = 1, 2, 3, 4, 5, 6


class PipelineAbortError(RuntimeError):
    """Unrecoverable failure before any frame was processed."""


@dataclass
class PipelineConfig:
    output_dir: Path
    seed: int = 0
    dataset_manifest: Path | None = None
    simulate: dict | None = None
    scene_path: Path | None = None
    grid_voxel_size: float = 0.1
    grid_origin: tuple | None = None
    grid_dims: tuple | None = None
    coarse_sampler: CoarseSamplerConfig = field(default_factory=CoarseSamplerConfig)
    local_sampler: LocalSamplerConfig = field(default_factory=LocalSamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    network_layer_dims: tuple = siren.DEFAULT_LAYER_DIMS
    omega0: float = siren.DEFAULT_OMEGA0
    eval_every: int = 5
    n_eval_points: int = 25000
    slice_z: float | None = None
    slice_resolution: float = 0.05
    use_coarse: bool = True
    use_local: bool = True
    pipelined: bool = False
    frame_range: tuple | None = None

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)
        if (self.dataset_manifest is None) == (self.simulate is None):
            raise ValueError("configure exactly one data source: dataset manifest or simulation")
        if self.eval_every < 1:
            raise ValueError("eval cadence must be at least 1")
        if self.n_eval_points < 1:
            raise ValueError("n_eval_points must be positive")
        if not (self.use_coarse or self.use_local):
            raise ValueError("at least one sample source must stay enabled")
        if self.grid_voxel_size <= 0:
            raise ValueError("grid voxel size must be positive")

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path | None = None) -> "PipelineConfig":
        base = Path(base_dir) if base_dir is not None else Path(".")

        def respath(v):
            if v is None:
                return None
            p = Path(v)
            return p if p.is_absolute() else base / p

        known = {
            "seed", "output_dir", "dataset", "simulate", "scene", "grid",
            "coarse_sampler", "local_sampler", "train", "network", "eval",
            "use_coarse", "use_local", "pipelined", "frame_range",
        }
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        dataset = doc.get("dataset") or {}
        gridspec = doc.get("grid") or {}
        net = doc.get("network") or {}
        ev = doc.get("eval") or {}
        sim = doc.get("simulate")
        if sim is not None:
            sim = dict(sim)
            if "scene" in sim:
                sim["scene"] = str(respath(sim["scene"]))
        hidden_layers = int(net.get("hidden_layers", 4))
        hidden_units = int(net.get("hidden_units", 256))
        dims = (3,) + (hidden_units,) * hidden_layers + (1,)
        fr = doc.get("frame_range")
        return cls(
            output_dir=respath(doc.get("output_dir", "out")),
            seed=int(doc.get("seed", 0)),
            dataset_manifest=respath(dataset.get("manifest")),
            simulate=sim,
            scene_path=respath(doc.get("scene")),
            grid_voxel_size=float(gridspec.get("voxel_size", 0.1)),
            grid_origin=tuple(gridspec["origin"]) if "origin" in gridspec else None,
            grid_dims=tuple(gridspec["dims"]) if "dims" in gridspec else None,
            coarse_sampler=CoarseSamplerConfig(**(doc.get("coarse_sampler") or {})),
            local_sampler=LocalSamplerConfig(**(doc.get("local_sampler") or {})),
            train=TrainConfig(**(doc.get("train") or {})),
            network_layer_dims=dims,
            omega0=float(net.get("omega0", siren.DEFAULT_OMEGA0)),
            eval_every=int(ev.get("every", 5)),
            n_eval_points=int(ev.get("n_points", 25000)),
            slice_z=ev.get("slice_z"),
            slice_resolution=float(ev.get("slice_resolution", 0.05)),
            use_coarse=bool(doc.get("use_coarse", True)),
            use_local=bool(doc.get("use_local", True)),
            pipelined=bool(doc.get("pipelined", False)),
            frame_range=tuple(fr) if fr else None,
        )

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        path = Path(path)
        with open(path) as f:
            doc = json.load(f)
        return cls.from_dict(doc, base_dir=path.parent)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "output_dir": str(self.output_dir),
            "dataset": {"manifest": str(self.dataset_manifest)} if self.dataset_manifest else None,
            "simulate": self.simulate,
            "scene": str(self.scene_path) if self.scene_path else None,
            "grid": {
                "voxel_size": self.grid_voxel_size,
                "origin": list(self.grid_origin) if self.grid_origin else None,
                "dims": list(self.grid_dims) if self.grid_dims else None,
            },
            "coarse_sampler": vars(self.coarse_sampler),
            "local_sampler": {
                "s_rays": self.local_sampler.s_rays,
                "q_per_ray": self.local_sampler.q_per_ray,
                "truncation": self.local_sampler.truncation,
            },
            "train": vars(self.train),
            "network": {
                "hidden_layers": len(self.network_layer_dims) - 2,
                "hidden_units": self.network_layer_dims[1] if len(self.network_layer_dims) > 2 else 0,
                "omega0": self.omega0,
            },
            "eval": {
                "every": self.eval_every,
                "n_points": self.n_eval_points,
                "slice_z": self.slice_z,
                "slice_resolution": self.slice_resolution,
            },
            "use_coarse": self.use_coarse,
            "use_local": self.use_local,
            "pipelined": self.pipelined,
            "frame_range": list(self.frame_range) if self.frame_range else None,
        }


def build_trajectory(spec: dict) -> Trajectory:
    """Builds poses from a trajectory spec dict ('orbit' or explicit 'poses')."""
    kind = spec.get("type")
    if kind == "orbit":
        center = np.asarray(spec["center"], dtype=np.float64)
        radius = float(spec["radius"])
        height = float(spec.get("height", center[2]))
        n = int(spec["frames"])
        if n < 1 or radius <= 0:
            raise ValueError("orbit needs frames >= 1 and radius > 0")
        target = np.asarray(spec.get("look_at", center), dtype=np.float64)
        start = float(spec.get("start_angle", 0.0))
        sweep = float(spec.get("sweep", 2.0 * np.pi))
        poses = []
        for i in range(n):
            ang = start + sweep * i / n
            eye = np.array([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang), height])
            poses.append(Pose.look_at(eye, target))
        return Trajectory(poses, max_step=float(spec.get("max_step", 0.5)))
    if kind == "poses":
        poses = [
            Pose(np.asarray(p["rotation"], dtype=np.float64).reshape(3, 3), p["translation"])
            for p in spec["poses"]
        ]
        return Trajectory(poses, max_step=float(spec.get("max_step", 0.5)))
    raise ValueError(f"unknown trajectory type {kind!r}")


def build_sensor(spec: dict):
    """Builds a sensor model from a spec dict ('depth_camera' or 'lidar')."""
    kind = spec.get("type")
    if kind == "depth_camera":
        return DepthCameraModel(
            width=int(spec.get("width", 64)),
            height=int(spec.get("height", 64)),
            horizontal_fov=np.deg2rad(float(spec.get("horizontal_fov_deg", 90.0))),
            max_range=float(spec.get("max_range", 15.0)),
        )
    if kind == "lidar":
        return LidarModel(
            channels=int(spec.get("channels", 16)),
            horizontal_steps=int(spec.get("horizontal_steps", 256)),
            vertical_fov=np.deg2rad(float(spec.get("vertical_fov_deg", 30.0))),
            max_range=float(spec.get("max_range", 25.0)),
        )
    raise ValueError(f"unknown sensor type {kind!r}")


def simulate(scene_path, trajectory_spec, sensor_spec, out_dir, seed=0, noise_sigma=0.0) -> Path:
    """Renders a dataset from a scene file; returns the manifest path."""
    scene = load_scene(scene_path)
    traj = build_trajectory(trajectory_spec)
    sensor = build_sensor(sensor_spec)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _S_NOISE]))
    frames = []
    for i, pose in enumerate(traj.poses):
        if isinstance(sensor, DepthCameraModel):
            frame = render_depth_frame(scene, pose, sensor, index=i, rng=rng, noise_sigma=noise_sigma)
        else:
            frame = render_lidar_frame(scene, pose, sensor, index=i, rng=rng, noise_sigma=noise_sigma)
        frames.append(frame)
    return write_dataset(frames, out_dir, poses=list(traj.poses))


def _resolve_grid(config: PipelineConfig, scene: Scene | None) -> CoarseSdfGrid:
    if config.grid_origin is not None and config.grid_dims is not None:
        return CoarseSdfGrid(config.grid_origin, config.grid_voxel_size, config.grid_dims)
    if scene is None:
        raise ValueError("grid origin/dims required when no scene provides bounds")
    return CoarseSdfGrid.from_bounds(scene.bounds_min, scene.bounds_max, config.grid_voxel_size)


@dataclass
class RunResult:
    exit_code: int
    frames_processed: int
    frames_skipped: list
    checkpoint_path: Path | None
    grid_snapshot_path: Path | None
    metrics_path: Path | None
    trace_path: Path
    timings_path: Path
    summary_path: Path
    dataset_manifest: Path
    net: siren.SirenNetwork
    grid: CoarseSdfGrid
    reports: list


class _StageTimer:
    def __init__(self):
        self.stages: dict[str, list[float]] = {}

    def add(self, stage: str, seconds: float) -> None:
        self.stages.setdefault(stage, []).append(seconds)

    def write_csv(self, path: Path) -> None:
        with open(path, "w") as f:
            f.write("stage,count,total_seconds,mean_seconds\n")
            for stage in sorted(self.stages):
                vals = self.stages[stage]
                f.write(f"{stage},{len(vals)},{sum(vals):.6f},{sum(vals)/len(vals):.6f}\n")


def _backbone_step(grid, record, base_dir, config):
    """Loads one frame, fuses it and extracts both sample sets.

    Runs in the prefetch worker under pipelined mode; touches only the grid
    and its own generators.
    """
    timings = {}
    t0 = time.perf_counter()
    frame = load_frame(record, base_dir)
    timings["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    integrate_frame(grid, frame)
    timings["fusion"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    update_esdf(grid)
    timings["esdf"] = time.perf_counter() - t0

    coarse_samples = SdfSamples.empty()
    if config.use_coarse:
        t0 = time.perf_counter()
        coarse_samples = sample_training_points(
            grid, config.coarse_sampler, np.random.SeedSequence([config.seed, _S_COARSE, record.index])
        )
        timings["coarse_sampling"] = time.perf_counter() - t0

    local_samples = SdfSamples.empty()
    if config.use_local:
        t0 = time.perf_counter()
        local_samples = generate_local_samples(
            frame, config.local_sampler, np.random.SeedSequence([config.seed, _S_LOCAL, record.index])
        )
        timings["local_sampling"] = time.perf_counter() - t0
    return frame, coarse_samples, local_samples, timings


def run(config: PipelineConfig) -> RunResult:
    """Executes the full incremental loop; see module docstring.

    Raises PipelineAbortError when the first frame (or setup) fails; later
    frame failures are logged, skipped, and surface as exit code 2.
    """
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    scene = load_scene(config.scene_path) if config.scene_path else None

    if config.simulate is not None:
        sim = config.simulate
        scene_for_sim = sim.get("scene") or config.scene_path
        if scene_for_sim is None:
            raise PipelineAbortError("simulation source needs a scene file")
        manifest = simulate(
            scene_for_sim,
            sim["trajectory"],
            sim["sensor"],
            out / "dataset",
            seed=config.seed,
            noise_sigma=float(sim.get("noise_sigma", 0.0)),
        )
    else:
        manifest = config.dataset_manifest

    try:
        records = read_manifest(manifest)
    except Exception as e:
        raise PipelineAbortError(f"cannot read dataset: {e}") from e
    if config.frame_range is not None:
        a, b = config.frame_range
        records = records[a:b]
    if not records:
        raise PipelineAbortError("dataset contains no frames")

    grid = _resolve_grid(config, scene)
    net = siren.init_siren(
        config.network_layer_dims, config.omega0, seed=np.random.SeedSequence([config.seed, _S_NET])
    )
    opt_state = siren.AdamState.for_network(net)

    trace_path = out / "loss_trace.csv"
    metrics_path = out / "metrics.csv"
    slices_dir = out / "slices"
    for stale in (trace_path, metrics_path):
        if stale.exists():
            stale.unlink()
    slices_dir.mkdir(exist_ok=True)
    timer = _StageTimer()
    trace_file = open(trace_path, "w")
    trace_file.write("update_index,epoch,total,sdf,eikonal\n")

    reports: list[EvalReport] = []
    skipped: list[tuple[int, str]] = []
    processed = 0
    last_frame = None
    slice_z = config.slice_z
    if slice_z is None:
        slice_z = float(grid.origin[2] + grid.dims[2] * grid.voxel_size / 2.0)

    def run_eval(frame):
        t0 = time.perf_counter()
        points = sample_eval_points(
            grid, config.n_eval_points, np.random.SeedSequence([config.seed, _S_EVAL, frame.index])
        )
        report = evaluate(
            net, scene, points, frame.sensor_origin, grid=grid, update_index=frame.index
        )
        append_report(metrics_path, report)
        reports.append(report)
        export_slice(
            lambda pts: siren.forward(net, pts),
            slice_z,
            grid.origin,
            grid.bounds_max,
            config.slice_resolution,
            slices_dir / f"slice_{frame.index:05d}.csv",
            slices_dir / f"slice_{frame.index:05d}.pgm",
        )
        timer.add("evaluation", time.perf_counter() - t0)
        log.info(
            "eval frame %d: global_mae=%.4f local_mae=%.4f eikonal=%.3f cosine=%.3f",
            frame.index, report.global_sdf_mae, report.local_sdf_mae,
            report.eikonal_mean, report.cosine_loss_mean,
        )

    def train_on(frame, coarse_samples, local_samples):
        nonlocal processed, last_frame
        dataset = trainer.assemble_dataset(coarse_samples, local_samples)
        t0 = time.perf_counter()
        epoch_stats = trainer.incremental_update(
            net, opt_state, dataset, config.train,
            np.random.SeedSequence([config.seed, _S_TRAIN, frame.index]),
        )
        dt = time.perf_counter() - t0
        timer.add("training", dt)
        timer.add("training_epoch", dt / max(1, len(epoch_stats)))
        for st in epoch_stats:
            trace_file.write(
                f"{frame.index},{st.epoch},{st.total!r},{st.sdf!r},{st.eikonal!r}\n"
            )
        trace_file.flush()
        processed += 1
        last_frame = frame

    executor = (
        concurrent.futures.ThreadPoolExecutor(max_workers=1) if config.pipelined else None
    )
    try:
        pending = None  # (record, future) under pipelined mode
        i = 0
        while i < len(records) or pending is not None:
            if pending is not None:
                record, future = pending
                pending = None
                step = lambda: future.result()
            else:
                record = records[i]
                i += 1
                step = lambda: _backbone_step(grid, record, manifest.parent, config)
            try:
                frame, coarse_samples, local_samples, timings = step()
                for stage, dt in timings.items():
                    timer.add(stage, dt)
            except Exception as e:  # noqa: BLE001 - per-frame isolation is the contract
                if processed == 0 and not skipped:
                    raise PipelineAbortError(f"first frame failed: {e}") from e
                log.warning("skipping frame %d: %s", record.index, e)
                skipped.append((record.index, str(e)))
                continue
            will_eval = scene is not None and (
                (processed + 1) % config.eval_every == 0 or (i >= len(records) and pending is None)
            )
            if executor is not None and not will_eval and i < len(records):
                nxt = records[i]
                i += 1
                pending = (nxt, executor.submit(_backbone_step, grid, nxt, manifest.parent, config))
            try:
                train_on(frame, coarse_samples, local_samples)
            except Exception as e:  # noqa: BLE001
                if processed == 0 and not skipped:
                    raise PipelineAbortError(f"first frame failed: {e}") from e
                log.warning("skipping frame %d at training: %s", record.index, e)
                skipped.append((record.index, str(e)))
                continue
            if scene is not None and processed % config.eval_every == 0:
                run_eval(frame)
    finally:
        trace_file.close()
        if executor is not None:
            executor.shutdown(wait=True)

    if processed == 0:
        raise PipelineAbortError("no frame could be processed")
    if scene is not None and processed % config.eval_every != 0:
        run_eval(last_frame)

    checkpoint_path = out / "checkpoint.bin"
    siren.save_checkpoint(net, checkpoint_path)
    snapshot_path = out / "grid_snapshot.bin"
    save_grid_snapshot(grid, snapshot_path)
    timings_path = out / "timings.csv"
    timer.write_csv(timings_path)
    exit_code = 2 if skipped else 0
    summary_path = out / "run_summary.json"
    with open(summary_path, "w") as f:
        json.dump(
            {
                "config": config.to_dict(),
                "frames_processed": processed,
                "frames_skipped": skipped,
                "exit_code": exit_code,
            },
            f,
            indent=2,
        )
        f.write("\n")
    return RunResult(
        exit_code=exit_code,
        frames_processed=processed,
        frames_skipped=skipped,
        checkpoint_path=checkpoint_path,
        grid_snapshot_path=snapshot_path,
        metrics_path=metrics_path if scene is not None else None,
        trace_path=trace_path,
        timings_path=timings_path,
        summary_path=summary_path,
        dataset_manifest=manifest,
        net=net,
        grid=grid,
        reports=reports,
    )


def load_points_file(path) -> np.ndarray:
    """Reads query points: .npy array or text with one 'x y z' per line."""
    path = Path(path)
    if path.suffix == ".npy":
        pts = np.load(path)
    else:
        text = path.read_text()
        rows = [ln.replace(",", " ").split() for ln in text.splitlines() if ln.strip()]
        if not rows:
            return np.empty((0, 3))
        try:
            pts = np.asarray(rows, dtype=np.float64)
        except ValueError as e:
            raise ValueError(f"{path}: malformed points file: {e}") from e
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{path}: expected (N, 3) points, got shape {pts.shape}")
    if pts.size and not np.isfinite(pts).all():
        raise ValueError(f"{path}: non-finite point values")
    return pts


def query(checkpoint_path, points_path, output_path, with_gradient: bool = False) -> int:
    """Evaluates a trained checkpoint on a points file; returns point count.

    Writes one line per input point, order preserved: the SDF value, followed
    by the gradient components when requested.
    """
    net = siren.load_checkpoint(checkpoint_path)
    pts = load_points_file(points_path)
    with open(output_path, "w") as f:
        if pts.shape[0] == 0:
            return 0
        if with_gradient:
            vals, grads = siren.forward_with_gradient(net, pts)
            for v, g in zip(vals, grads):
                f.write(f"{float(v)!r} {float(g[0])!r} {float(g[1])!r} {float(g[2])!r}\n")
        else:
            vals = siren.forward(net, pts)
            f.write("\n".join(repr(float(v)) for v in vals))
            f.write("\n")
    return int(pts.shape[0])


def rebuild_grid(manifest_path, config: PipelineConfig, scene: Scene | None) -> tuple:
    """Replays fusion (no training) over a dataset; returns (grid, last frame)."""
    records = read_manifest(manifest_path)
    if config.frame_range is not None:
        a, b = config.frame_range
        records = records[a:b]
    if not records:
        raise ValueError("dataset contains no frames")
    grid = _resolve_grid(config, scene)
    last = None
    for record in records:
        last = load_frame(record, Path(manifest_path).parent)
        integrate_frame(grid, last)
    update_esdf(grid)
    return grid, last
