"""Fine near-surface supervision from a single frame.

Rays from the sensor through a random subset of the cloud are sampled with
one point per equal stratum, each sample gets its sign from the
closer-than-the-surface rule, its magnitude from a brute-force nearest-point
search against the full cloud, and samples farther than the truncation
distance from the cloud are discarded.

The batched implementation is written so that a plain per-ray / per-sample
loop drawing from the same generator reproduces it bit for bit; tests rely
on that equivalence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Frame, as_vec3, min_distances_to_cloud
from .samples import SOURCE_LOCAL, SdfSamples


@dataclass(frozen=True)
class LocalSamplerConfig:
    s_rays: int = 1000
    q_per_ray: int = 20
    truncation: float = 0.2

    def __post_init__(self):
        if self.s_rays <= 0 or self.q_per_ray <= 0:
            raise ValueError("ray and per-ray sample counts must be positive")
        if self.truncation <= 0:
            raise ValueError("truncation must be positive")


def subsample_cloud(frame: Frame, s_rays: int, rng) -> np.ndarray:
    """Uniform subset of min(s_rays, P) distinct cloud points, (M, 3) float64."""
    pts = frame.points.astype(np.float64)
    n = pts.shape[0]
    rng = np.random.default_rng(rng)
    idx = rng.choice(n, size=min(s_rays, n), replace=False)
    return pts[idx]


def stratified_ray_samples(sensor, p_i, q_per_ray: int, truncation: float, rng) -> np.ndarray:
    """Q stratified points on the sensor ray, reaching truncation behind p_i.

    Sample j is uniform in stratum [j L / Q, (j+1) L / Q) of the total length
    L = ||p_i - sensor|| + truncation.
    """
    sensor = as_vec3(sensor, "sensor")
    p_i = as_vec3(p_i, "ray point")
    rng = np.random.default_rng(rng)
    diff = p_i - sensor
    dist = np.sqrt(diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2])
    if dist == 0.0:
        raise ValueError("degenerate ray: point coincides with sensor")
    length = dist + truncation
    u = rng.random(q_per_ray)
    d = (np.arange(q_per_ray) + u) * (length / q_per_ray)
    return sensor + d[:, None] * (diff / dist)


def assign_sign(q, sensor, p_i) -> int:
    """+1 when the sample is nearer the sensor than the generating point."""
    q = as_vec3(q, "sample")
    sensor = as_vec3(sensor, "sensor")
    p_i = as_vec3(p_i, "ray point")
    dq = q - sensor
    dp = p_i - sensor
    qd = np.sqrt(dq[0] * dq[0] + dq[1] * dq[1] + dq[2] * dq[2])
    pd = np.sqrt(dp[0] * dp[0] + dp[1] * dp[1] + dp[2] * dp[2])
    return 1 if qd < pd else -1


def compute_lsdf(positions, signs, cloud) -> np.ndarray:
    """Signed brute-force distance of each sample to the full cloud."""
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.size == 0:
        raise ValueError("empty point cloud")
    signs = np.asarray(signs, dtype=np.float64)
    return signs * min_distances_to_cloud(cloud, positions)


def generate_local_samples(frame: Frame, config: LocalSamplerConfig, seed) -> SdfSamples:
    """Full local sampling pipeline for one frame.

    subsample -> stratify -> sign -> signed distance -> truncation filter.
    Deterministic under seed; output order is ray-major then stratum.
    """
    rng = np.random.default_rng(seed)
    cloud = frame.points.astype(np.float64)
    sensor = frame.sensor_origin
    subset = subsample_cloud(frame, config.s_rays, rng)
    s, q = subset.shape[0], config.q_per_ray

    diff = subset - sensor
    dist = np.sqrt(diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2])
    if np.any(dist == 0.0):
        raise ValueError("degenerate ray: point coincides with sensor")
    length = dist + config.truncation
    u = rng.random((s, q))
    d = (np.arange(q) + u) * (length[:, None] / q)
    dirs = diff / dist[:, None]
    positions = (sensor + d[:, :, None] * dirs[:, None, :]).reshape(-1, 3)

    dq = positions - sensor
    sample_dist = np.sqrt(dq[:, 0] * dq[:, 0] + dq[:, 1] * dq[:, 1] + dq[:, 2] * dq[:, 2])
    signs = np.where(sample_dist < np.repeat(dist, q), 1.0, -1.0)
    lsdf = compute_lsdf(positions, signs, cloud)
    keep = np.abs(lsdf) <= config.truncation
    return SdfSamples(positions[keep], lsdf[keep], SOURCE_LOCAL)
