"""Metric suite against analytic ground truth and 2D slice export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import siren
from .coarse import CoarseSdfGrid, query_grid_batch
from .geometry import Scene, analytic_grad, analytic_sdf, as_points, as_vec3

LOCAL_RADIUS = 3.0


@dataclass
class EvalReport:
    """Per-update accuracy metrics. NaN marks an absent field (e.g. no
    points inside the local radius), never a silent zero."""

    update_index: int
    n_points: int
    global_sdf_mae: float
    local_sdf_mae: float
    n_local: int
    eikonal_mean: float
    cosine_loss_mean: float
    n_cosine: int
    n_gradient_excluded: int
    grid_sdf_mae: float

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_CSV_FIELDS = [f.name for f in fields(EvalReport)]
_INT_FIELDS = {"update_index", "n_points", "n_local", "n_cosine", "n_gradient_excluded"}


def append_report(path, report: EvalReport) -> None:
    """Appends one CSV row (header on first write); floats keep full precision."""
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(_CSV_FIELDS)
        row = []
        for name in _CSV_FIELDS:
            v = getattr(report, name)
            row.append(str(v) if name in _INT_FIELDS else repr(float(v)))
        writer.writerow(row)


def read_reports(path) -> list[EvalReport]:
    path = Path(path)
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for rec in reader:
            kwargs = {}
            for name in _CSV_FIELDS:
                kwargs[name] = int(rec[name]) if name in _INT_FIELDS else float(rec[name])
            out.append(EvalReport(**kwargs))
    return out


def sample_eval_points(grid: CoarseSdfGrid, n: int, seed) -> np.ndarray:
    """n points uniform over the observed voxel volume, deterministic."""
    if n <= 0:
        raise ValueError("need a positive point count")
    observed = np.flatnonzero(grid.observed.reshape(-1))
    if observed.size == 0:
        raise ValueError("observed region is empty")
    rng = np.random.default_rng(seed)
    chosen = observed[rng.integers(0, observed.size, size=n)]
    centers = grid.voxel_centers(chosen)
    return centers + (rng.random((n, 3)) - 0.5) * grid.voxel_size


def cosine_loss(g_pred, g_true) -> float:
    """1 - cosine similarity; 0 for aligned, 2 for opposite directions."""
    gp = as_vec3(g_pred, "predicted gradient")
    gt = as_vec3(g_true, "reference gradient")
    np_, nt = np.linalg.norm(gp), np.linalg.norm(gt)
    if np_ == 0.0 or nt == 0.0:
        raise ValueError("degenerate gradient: zero norm")
    return float(1.0 - (gp @ gt) / (np_ * nt))


def evaluate(
    net,
    scene: Scene,
    points,
    sensor_origin,
    local_radius: float = LOCAL_RADIUS,
    grid: CoarseSdfGrid | None = None,
    update_index: int = 0,
) -> EvalReport:
    """Computes the four accuracy metrics of a field on the given points.

    ``net`` is a SirenNetwork or any callable mapping (N, 3) points to
    (values, gradients). Metrics: global/local SDF MAE against the analytic
    scene, mean Eikonal residual, and mean cosine loss against
    finite-difference ground-truth gradients (points with unreliable ground
    truth or zero predicted gradients are excluded and counted). When
    ``grid`` is given its trilinear interpolation error on the same points is
    reported alongside.
    """
    pts = as_points(points)
    if pts.shape[0] == 0:
        raise ValueError("no evaluation points")
    sensor_origin = as_vec3(sensor_origin, "sensor origin")
    if isinstance(net, siren.SirenNetwork):
        vals, grads = siren.forward_with_gradient(net, pts)
    else:
        vals, grads = net(pts)
    vals = np.asarray(vals, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    truth = analytic_sdf(scene, pts)
    abs_err = np.abs(vals - truth)
    global_mae = float(abs_err.mean())

    dist_to_sensor = np.linalg.norm(pts - sensor_origin, axis=1)
    local_mask = dist_to_sensor < local_radius
    n_local = int(local_mask.sum())
    local_mae = float(abs_err[local_mask].mean()) if n_local else math.nan

    pred_norm = np.linalg.norm(grads, axis=1)
    eikonal_mean = float(np.abs(pred_norm - 1.0).mean())

    true_dir, reliable = analytic_grad(scene, pts)
    usable = reliable & (pred_norm > 0)
    n_cos = int(usable.sum())
    if n_cos:
        dots = np.einsum("ij,ij->i", grads[usable], true_dir[usable])
        cos_mean = float((1.0 - dots / pred_norm[usable]).mean())
    else:
        cos_mean = math.nan

    if grid is not None:
        grid_vals = query_grid_batch(grid, pts)
        grid_mae = float(np.abs(grid_vals - truth).mean())
    else:
        grid_mae = math.nan

    return EvalReport(
        update_index=int(update_index),
        n_points=int(pts.shape[0]),
        global_sdf_mae=global_mae,
        local_sdf_mae=local_mae,
        n_local=n_local,
        eikonal_mean=eikonal_mean,
        cosine_loss_mean=cos_mean,
        n_cosine=n_cos,
        n_gradient_excluded=int(pts.shape[0] - n_cos),
        grid_sdf_mae=grid_mae,
    )


def export_slice(
    field,
    z: float,
    bounds_min,
    bounds_max,
    resolution: float,
    csv_path,
    pgm_path=None,
):
    """Writes a horizontal slice of a scalar field as CSV and 8-bit PGM.

    ``field`` maps (N, 3) points to (N,) values. The CSV carries the
    geo-reference in comment lines and one row per y line; the PGM uses a
    diverging mapping symmetric around 0 (negative values in [0, 127],
    non-negative in [128, 255]).
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    bounds_min = as_vec3(bounds_min, "bounds min")
    bounds_max = as_vec3(bounds_max, "bounds max")
    xs = np.arange(bounds_min[0] + resolution / 2, bounds_max[0], resolution)
    ys = np.arange(bounds_min[1] + resolution / 2, bounds_max[1], resolution)
    if xs.size == 0 or ys.size == 0:
        raise ValueError("slice bounds collapse to an empty grid")
    xx, yy = np.meshgrid(xs, ys)
    pts = np.stack([xx.ravel(), yy.ravel(), np.full(xx.size, float(z))], axis=1)
    values = np.asarray(field(pts), dtype=np.float64).reshape(ys.size, xs.size)

    csv_path = Path(csv_path)
    with open(csv_path, "w") as f:
        f.write(f"# z={z!r}\n")
        f.write(f"# xmin={bounds_min[0]!r} ymin={bounds_min[1]!r}\n")
        f.write(f"# resolution={resolution!r} nx={xs.size} ny={ys.size}\n")
        for row in values:
            f.write(",".join(repr(v) for v in row))
            f.write("\n")

    if pgm_path is not None:
        pgm_path = Path(pgm_path)
        scale = float(np.abs(values).max())
        if scale == 0.0:
            scale = 1.0
        pix = np.where(
            values >= 0,
            128 + np.round(127.0 * np.minimum(values, scale) / scale),
            127 - np.round(127.0 * np.minimum(-values, scale) / scale),
        ).astype(np.uint8)
        with open(pgm_path, "wb") as f:
            f.write(f"P5\n{xs.size} {ys.size}\n255\n".encode())
            f.write(pix.tobytes())
    return csv_path, pgm_path


def read_slice_csv(path):
    """Loads a slice CSV back as (values (ny, nx), meta dict)."""
    meta = {}
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line.startswith("#"):
                for part in line[1:].split():
                    if "=" in part:
                        k, v = part.split("=", 1)
                        meta[k] = float(v)
            elif line:
                rows.append([float(v) for v in line.split(",")])
    return np.asarray(rows), meta
