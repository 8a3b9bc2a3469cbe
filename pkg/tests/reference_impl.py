"""Plain serial reference pipelines used as oracles for the batched code.

These stay deliberately loop-based; the batched implementations must match
them bit for bit under the same seed.
"""

import numpy as np

from sdfmap.geometry import squared_distances_to_cloud


def serial_local_samples(frame, config, seed):
    """O(S*Q*P) per-sample version of generate_local_samples."""
    rng = np.random.default_rng(seed)
    cloud = frame.points.astype(np.float64)
    sensor = frame.sensor_origin
    idx = rng.choice(cloud.shape[0], size=min(config.s_rays, cloud.shape[0]), replace=False)
    positions, values = [], []
    for i in idx:
        p = cloud[i]
        diff = p - sensor
        dist = np.sqrt(diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2])
        length = dist + config.truncation
        u = rng.random(config.q_per_ray)
        d = (np.arange(config.q_per_ray) + u) * (length / config.q_per_ray)
        direction = diff / dist
        for j in range(config.q_per_ray):
            q = sensor + d[j] * direction
            dq = q - sensor
            qd = np.sqrt(dq[0] * dq[0] + dq[1] * dq[1] + dq[2] * dq[2])
            sign = 1.0 if qd < dist else -1.0
            d2 = squared_distances_to_cloud(cloud, q[None, :])[0]
            lsdf = sign * np.sqrt(d2.min())
            if abs(lsdf) <= config.truncation:
                positions.append(q)
                values.append(lsdf)
    if positions:
        return np.asarray(positions), np.asarray(values)
    return np.empty((0, 3)), np.empty(0)


def brute_force_esdf(observed, tsdf, voxel_size):
    """Exhaustive nearest-surface-voxel distances for every voxel.

    Surface voxels are observed voxels with |tsdf| < voxel_size; distances
    are exact center-to-center Euclidean, sign from the tsdf sign.
    """
    surface = observed & (np.abs(tsdf) < voxel_size)
    surf_idx = np.argwhere(surface).astype(np.int64)
    assert surf_idx.shape[0] > 0, "oracle needs at least one surface voxel"
    dims = observed.shape
    coords = np.argwhere(np.ones(dims, dtype=bool)).astype(np.int64)
    best = np.full(coords.shape[0], np.iinfo(np.int64).max, dtype=np.int64)
    chunk = 4096
    for i0 in range(0, coords.shape[0], chunk):
        block = coords[i0 : i0 + chunk]
        diff = block[:, None, :] - surf_idx[None, :, :]
        d2 = (diff * diff).sum(axis=2)
        best[i0 : i0 + chunk] = d2.min(axis=1)
    dist = voxel_size * np.sqrt(best.astype(np.float64)).reshape(dims)
    return np.where(tsdf < 0, -dist, dist)
