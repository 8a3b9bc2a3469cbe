"""Core geometric types and analytic signed-distance scenes.

Scenes are unions of exact primitives (spheres, axis-aligned boxes,
half-space planes) and serve as ground truth for simulation and evaluation.
Points are numpy arrays: (3,) for a single point, (N, 3) for batches,
world frame, meters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

Vec3 = np.ndarray  # shape (3,), float64

# direction flagged unreliable when the finite-difference gradient magnitude
# drops below this (medial axis / equidistant points)
GRAD_RELIABLE_MIN_NORM = 0.5


def as_vec3(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.shape != (3,):
        raise ValueError(f"{name} must have 3 components")
    if not np.isfinite(v).all():
        raise ValueError(f"{name} must be finite")
    return v


def as_points(x) -> np.ndarray:
    """Coerces to an (N, 3) float64 array without finiteness checks."""
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must have shape (3,) or (N, 3)")
    return pts


@dataclass(eq=False)
class Pose:
    """Rigid transform: world_point = rotation @ local_point + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = as_vec3(self.translation, "translation")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation is not orthonormal (deviation {err:.2e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > 1e-6:
            raise ValueError(f"rotation must be proper (det {det:.8f})")

    def transform_points(self, pts) -> np.ndarray:
        return as_points(pts) @ self.rotation.T + self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Camera pose at ``eye`` with +z (viewing axis) toward ``target``.

        Camera convention: +x right, +y down, +z forward.
        """
        eye = as_vec3(eye, "eye")
        target = as_vec3(target, "target")
        fwd = target - eye
        n = np.linalg.norm(fwd)
        if n < 1e-12:
            raise ValueError("eye and target coincide")
        fwd = fwd / n
        up = as_vec3(up, "up")
        if abs(fwd @ up) > 0.999 * np.linalg.norm(up):
            up = np.array([1.0, 0.0, 0.0])
            if abs(fwd @ up) > 0.999:
                up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return cls(np.column_stack([right, down, fwd]), eye)


@dataclass(eq=False)
class Frame:
    """One posed point-cloud measurement: sensor origin plus world points.

    Points are stored float32 to match the on-disk dataset format exactly.
    """

    sensor_origin: np.ndarray
    points: np.ndarray
    index: int = 0

    def __post_init__(self):
        self.sensor_origin = as_vec3(self.sensor_origin, "sensor_origin")
        pts = np.ascontiguousarray(np.asarray(self.points), dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise ValueError("frame needs a non-empty (N, 3) point array")
        if not np.isfinite(pts).all():
            raise ValueError("frame points must be finite")
        origin32 = self.sensor_origin.astype(np.float32)
        if bool(np.any(np.all(pts == origin32, axis=1))):
            raise ValueError("frame contains a point at the sensor origin")
        self.points = pts
        self.index = int(self.index)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


@dataclass(eq=False)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = as_vec3(self.center, "sphere center")
        self.radius = float(self.radius)
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        d = pts - self.center
        return np.sqrt(np.einsum("ij,ij->i", d, d)) - self.radius

    def to_dict(self) -> dict:
        return {"type": "sphere", "center": self.center.tolist(), "radius": self.radius}


@dataclass(eq=False)
class AxisBox:
    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        self.center = as_vec3(self.center, "box center")
        self.half_extents = as_vec3(self.half_extents, "box half extents")
        if not (self.half_extents > 0).all():
            raise ValueError("box half extents must be positive")

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        q = np.abs(pts - self.center) - self.half_extents
        outside = np.sqrt(np.einsum("ij,ij->i", np.maximum(q, 0.0), np.maximum(q, 0.0)))
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside

    def to_dict(self) -> dict:
        return {
            "type": "box",
            "center": self.center.tolist(),
            "half_extents": self.half_extents.tolist(),
        }


@dataclass(eq=False)
class Plane:
    """Half-space solid: sdf = normal . x - offset, negative behind the plane."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        self.normal = as_vec3(self.normal, "plane normal")
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")
        self.offset = float(self.offset)

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.normal - self.offset

    def to_dict(self) -> dict:
        return {"type": "plane", "normal": self.normal.tolist(), "offset": self.offset}


@dataclass(eq=False)
class Scene:
    """Union-by-minimum of disjoint primitives inside an axis-aligned domain."""

    primitives: list
    bounds_min: np.ndarray
    bounds_max: np.ndarray

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        self.bounds_min = as_vec3(self.bounds_min, "bounds min")
        self.bounds_max = as_vec3(self.bounds_max, "bounds max")
        if not (self.bounds_max > self.bounds_min).all():
            raise ValueError("scene bounds are degenerate")

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        values = self.primitives[0].sdf(pts)
        for prim in self.primitives[1:]:
            np.minimum(values, prim.sdf(pts), out=values)
        return values

    @property
    def extent(self) -> np.ndarray:
        return self.bounds_max - self.bounds_min

    def contains(self, pts) -> np.ndarray:
        pts = as_points(pts)
        return np.all((pts >= self.bounds_min) & (pts <= self.bounds_max), axis=1)


def analytic_sdf(scene: Scene, x):
    """Exact signed distance of the scene union. (3,) -> float, (N,3) -> (N,)."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    vals = scene.sdf(as_points(arr))
    return float(vals[0]) if single else vals


def analytic_grad(scene: Scene, x, step: float = 1e-5):
    """Normalized SDF gradient by central finite differences, with validity flag.

    Returns (direction, reliable). The flag is False where the raw
    finite-difference magnitude falls below GRAD_RELIABLE_MIN_NORM, which
    happens at medial-axis / equidistant points where the true SDF is not
    differentiable. Single input -> ((3,), bool); batch -> ((N,3), (N,) bool).
    """
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    pts = as_points(arr)
    n = pts.shape[0]
    probe = np.repeat(pts, 6, axis=0)
    offsets = np.zeros((6, 3))
    for axis in range(3):
        offsets[2 * axis, axis] = step
        offsets[2 * axis + 1, axis] = -step
    probe += np.tile(offsets, (n, 1))
    vals = scene.sdf(probe).reshape(n, 3, 2)
    grad = (vals[:, :, 0] - vals[:, :, 1]) / (2.0 * step)
    norm = np.sqrt(np.einsum("ij,ij->i", grad, grad))
    reliable = norm >= GRAD_RELIABLE_MIN_NORM
    safe = np.where(norm > 0, norm, 1.0)
    direction = grad / safe[:, None]
    if single:
        return direction[0], bool(reliable[0])
    return direction, reliable


def squared_distances_to_cloud(cloud: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """(M, P) squared Euclidean distances, computed with a fixed expression.

    Shared by the brute-force operations and their test oracles so that both
    sides produce bit-identical floats.
    """
    dx = queries[:, 0, None] - cloud[None, :, 0]
    dy = queries[:, 1, None] - cloud[None, :, 1]
    dz = queries[:, 2, None] - cloud[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def brute_force_min_distance(points, q) -> tuple[float, int]:
    """Exact nearest-point distance and index (lowest index on ties)."""
    cloud = as_points(points)
    if cloud.shape[0] == 0:
        raise ValueError("empty point cloud")
    query = as_vec3(q, "query")
    d2 = squared_distances_to_cloud(cloud, query[None, :])[0]
    idx = int(np.argmin(d2))
    return float(np.sqrt(d2[idx])), idx


def min_distances_to_cloud(cloud, queries, chunk: int = 2048) -> np.ndarray:
    """Exact nearest-point distances of many queries against one cloud.

    Brute force over all pairs, chunked over queries to bound memory; results
    are identical to per-query evaluation.
    """
    cloud = as_points(cloud)
    if cloud.shape[0] == 0:
        raise ValueError("empty point cloud")
    queries = as_points(queries)
    out = np.empty(queries.shape[0], dtype=np.float64)
    for i0 in range(0, queries.shape[0], chunk):
        d2 = squared_distances_to_cloud(cloud, queries[i0 : i0 + chunk])
        out[i0 : i0 + chunk] = np.sqrt(d2.min(axis=1))
    return out


_PRIMITIVE_TYPES = {"sphere", "box", "plane"}


def _primitive_from_dict(spec: dict):
    kind = spec.get("type")
    if kind == "sphere":
        return Sphere(spec["center"], spec["radius"])
    if kind == "box":
        return AxisBox(spec["center"], spec["half_extents"])
    if kind == "plane":
        return Plane(spec["normal"], spec["offset"])
    raise ValueError(f"unknown primitive type {kind!r} (expected one of {sorted(_PRIMITIVE_TYPES)})")


def load_scene(path) -> Scene:
    """Reads a scene JSON file (primitives + bounds min/max corners)."""
    path = Path(path)
    with open(path) as f:
        doc = json.load(f)
    try:
        prims = [_primitive_from_dict(p) for p in doc["primitives"]]
        bounds = doc["bounds"]
        return Scene(prims, bounds["min"], bounds["max"])
    except KeyError as e:
        raise ValueError(f"{path}: missing scene key {e}") from e


def save_scene(scene: Scene, path) -> None:
    doc = {
        "primitives": [p.to_dict() for p in scene.primitives],
        "bounds": {"min": scene.bounds_min.tolist(), "max": scene.bounds_max.tolist()},
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
