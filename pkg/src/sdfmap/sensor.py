"""Synthetic depth-camera / LiDAR simulation and dataset serialization.

Frames are produced by sphere tracing rays against an analytic scene. The
on-disk dataset is a manifest.json plus one raw little-endian float32 xyz
file per frame (world coordinates, meters).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Frame, Pose, Scene, as_vec3

SURFACE_TOLERANCE = 1e-4
MAX_TRACE_ITERS = 256

DATASET_VERSION = 1


@dataclass(frozen=True)
class DepthCameraModel:
    width: int = 64
    height: int = 64
    horizontal_fov: float = np.deg2rad(90.0)
    max_range: float = 15.0

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError("camera resolution must be at least 8x8")
        if not 0 < self.horizontal_fov < np.pi:
            raise ValueError("horizontal_fov must be in (0, pi)")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")


@dataclass(frozen=True)
class LidarModel:
    channels: int = 16
    horizontal_steps: int = 256
    vertical_fov: float = np.deg2rad(30.0)
    max_range: float = 25.0

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("lidar needs at least one channel")
        if self.horizontal_steps < 8:
            raise ValueError("lidar needs at least 8 horizontal steps")
        if not 0 <= self.vertical_fov < np.pi:
            raise ValueError("vertical_fov must be in [0, pi)")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")


@dataclass(eq=False)
class Trajectory:
    """Ordered sensor poses with a sanity bound on consecutive motion."""

    poses: list
    max_step: float = 0.5

    def __post_init__(self):
        if not self.poses:
            raise ValueError("trajectory needs at least one pose")
        for a, b in zip(self.poses[:-1], self.poses[1:]):
            step = float(np.linalg.norm(b.translation - a.translation))
            if step > self.max_step:
                raise ValueError(
                    f"trajectory step {step:.3f} m exceeds max_step {self.max_step:.3f} m"
                )

    def __len__(self) -> int:
        return len(self.poses)


class EmptyFrameError(RuntimeError):
    """All rays of a rendered frame missed the scene."""


def sphere_trace(scene: Scene, origin, direction, max_range: float):
    """Marches one ray by the SDF value; returns hit distance or None on miss."""
    origin = as_vec3(origin, "origin")
    direction = np.asarray(direction, dtype=np.float64).reshape(3)
    t, hit = sphere_trace_batch(scene, origin[None, :], direction[None, :], max_range)
    return float(t[0]) if hit[0] else None


def sphere_trace_batch(scene: Scene, origins, directions, max_range: float):
    """Vectorized sphere tracing. Returns (distances (N,), hit-mask (N,)).

    Steps each active ray forward by the current SDF value until it is within
    SURFACE_TOLERANCE of a surface, exceeds max_range, or the iteration cap.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    norms = np.linalg.norm(directions, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("ray directions must be unit length")
    n = origins.shape[0]
    t = np.zeros(n, dtype=np.float64)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(MAX_TRACE_ITERS):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        pts = origins[idx] + t[idx, None] * directions[idx]
        d = scene.sdf(pts)
        arrived = d <= SURFACE_TOLERANCE
        hit[idx[arrived]] = True
        active[idx[arrived]] = False
        adv = idx[~arrived]
        t[adv] += d[~arrived]
        overshoot = t[adv] > max_range
        active[adv[overshoot]] = False
    return t, hit


def camera_ray_directions(model: DepthCameraModel) -> np.ndarray:
    """Unit ray directions through all pixel centers, camera frame, row-major.

    Camera frame: +x right, +y down, +z forward (optical axis).
    """
    focal = (model.width / 2.0) / np.tan(model.horizontal_fov / 2.0)
    us = (np.arange(model.width) + 0.5) - model.width / 2.0
    vs = (np.arange(model.height) + 0.5) - model.height / 2.0
    uu, vv = np.meshgrid(us, vs)
    dirs = np.stack([uu / focal, vv / focal, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def lidar_ray_directions(model: LidarModel) -> np.ndarray:
    """Unit ray directions of the ring pattern, sensor frame, ring-major.

    Sensor frame: +x forward at zero azimuth, +z up; channels are elevation
    rings spanning [-vfov/2, +vfov/2].
    """
    if model.channels == 1:
        elevations = np.array([0.0])
    else:
        half = model.vertical_fov / 2.0
        elevations = np.linspace(-half, half, model.channels)
    azimuths = np.arange(model.horizontal_steps) * (2.0 * np.pi / model.horizontal_steps)
    el, az = np.meshgrid(elevations, azimuths, indexing="ij")
    ce = np.cos(el)
    dirs = np.stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)], axis=-1)
    return dirs.reshape(-1, 3)


def _render(scene, pose, dirs_local, max_range, index, rng, noise_sigma) -> Frame:
    dirs_world = dirs_local @ pose.rotation.T
    origin = pose.translation
    origins = np.broadcast_to(origin, dirs_world.shape)
    t, hit = sphere_trace_batch(scene, origins, dirs_world, max_range)
    if not hit.any():
        raise EmptyFrameError("empty frame")
    pts = origin + t[hit, None] * dirs_world[hit]
    if noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng()
        pts = pts + rng.normal(0.0, noise_sigma, pts.shape)
    return Frame(sensor_origin=origin, points=pts, index=index)


def render_depth_frame(
    scene: Scene,
    pose: Pose,
    model: DepthCameraModel,
    index: int = 0,
    rng=None,
    noise_sigma: float = 0.0,
) -> Frame:
    """Renders a pinhole depth frame; misses are dropped, all-miss errors."""
    return _render(scene, pose, camera_ray_directions(model), model.max_range, index, rng, noise_sigma)


def render_lidar_frame(
    scene: Scene,
    pose: Pose,
    model: LidarModel,
    index: int = 0,
    rng=None,
    noise_sigma: float = 0.0,
) -> Frame:
    """Renders one spinning-LiDAR sweep; misses are dropped, all-miss errors."""
    return _render(scene, pose, lidar_ray_directions(model), model.max_range, index, rng, noise_sigma)


@dataclass(eq=False)
class FrameRecord:
    """One manifest entry; points are loaded lazily from points_file."""

    index: int
    pose: Pose
    points_file: str
    num_points: int


def write_dataset(frames, directory, poses=None) -> Path:
    """Writes frames (and optional matching poses) as a dataset directory.

    Returns the manifest path. Point files hold raw little-endian float32 xyz
    triples; the manifest records {index, pose, points_file} per frame in
    order. Round-trips bit-exactly through load_dataset.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if poses is None:
        poses = [Pose(np.eye(3), f.sensor_origin) for f in frames]
    if len(poses) != len(frames):
        raise ValueError("poses must align with frames")
    records = []
    for frame, pose in zip(frames, poses):
        name = f"frame_{frame.index:05d}.xyz"
        data = np.ascontiguousarray(frame.points, dtype="<f4")
        (directory / name).write_bytes(data.tobytes())
        records.append(
            {
                "index": frame.index,
                "pose": {
                    "rotation": [float(v) for v in pose.rotation.reshape(-1)],
                    "translation": [float(v) for v in pose.translation],
                },
                "points_file": name,
                "num_points": frame.n_points,
            }
        )
    manifest = directory / "manifest.json"
    with open(manifest, "w") as f:
        json.dump({"version": DATASET_VERSION, "frames": records}, f, indent=1)
        f.write("\n")
    return manifest


def read_manifest(manifest_path) -> list[FrameRecord]:
    """Parses and validates the manifest (not the point files)."""
    manifest_path = Path(manifest_path)
    try:
        with open(manifest_path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    except json.JSONDecodeError as e:
        raise ValueError(f"{manifest_path}: malformed manifest JSON: {e}") from e
    if doc.get("version") != DATASET_VERSION:
        raise ValueError(f"{manifest_path}: unsupported dataset version {doc.get('version')!r}")
    records = []
    for i, rec in enumerate(doc.get("frames", [])):
        try:
            pose = Pose(
                np.asarray(rec["pose"]["rotation"], dtype=np.float64).reshape(3, 3),
                rec["pose"]["translation"],
            )
            records.append(
                FrameRecord(
                    index=int(rec["index"]),
                    pose=pose,
                    points_file=str(rec["points_file"]),
                    num_points=int(rec["num_points"]),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"{manifest_path}: bad frame record {i}: {e}") from e
    return records


def load_frame(record: FrameRecord, base_dir) -> Frame:
    """Loads and validates one frame's points file."""
    path = Path(base_dir) / record.points_file
    if not path.exists():
        raise FileNotFoundError(f"points file missing: {path}")
    raw = path.read_bytes()
    if len(raw) % 12 != 0:
        raise ValueError(f"{path}: truncated point file ({len(raw)} bytes)")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 3)
    if pts.shape[0] != record.num_points:
        raise ValueError(
            f"{path}: expected {record.num_points} points, found {pts.shape[0]}"
        )
    if not np.isfinite(pts).all():
        raise ValueError(f"{path}: non-finite point values")
    return Frame(sensor_origin=record.pose.translation, points=pts, index=record.index)


def load_dataset(manifest_path):
    """Loads the full dataset strictly. Returns (frames, poses)."""
    manifest_path = Path(manifest_path)
    records = read_manifest(manifest_path)
    base = manifest_path.parent
    frames = [load_frame(rec, base) for rec in records]
    return frames, [rec.pose for rec in records]
