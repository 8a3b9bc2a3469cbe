"""Loss definitions and the per-frame incremental training schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import siren
from .samples import SdfSamples, concat_samples


@dataclass
class TrainConfig:
    lambda_sdf: float = 5.0
    lambda_eikonal: float = 2.0
    epochs_per_update: int = 10
    learning_rate: float = 4e-4
    weight_decay: float = 0.012
    minibatch_size: int = 10000
    decay_mode: str = "decoupled"

    def __post_init__(self):
        if self.lambda_sdf < 0 or self.lambda_eikonal < 0:
            raise ValueError("loss weights must be non-negative")
        if self.epochs_per_update < 1:
            raise ValueError("epochs_per_update must be at least 1")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be at least 1")
        if self.decay_mode not in ("decoupled", "l2"):
            raise ValueError("decay_mode must be 'decoupled' or 'l2'")


def sdf_loss(prediction: float, target: float) -> float:
    """L1 distance between predicted and supervised SDF value."""
    return abs(float(prediction) - float(target))


def eikonal_loss(gradient) -> float:
    """Deviation of the gradient norm from 1."""
    g = np.asarray(gradient, dtype=np.float64).reshape(-1)
    return abs(float(np.sqrt(np.sum(g * g))) - 1.0)


def total_loss(net: siren.SirenNetwork, batch: SdfSamples, config: TrainConfig) -> float:
    """lambda_sdf * mean L1 + lambda_eikonal * mean Eikonal over the batch."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    vals, grads = siren.forward_with_gradient(net, batch.positions)
    residual = np.abs(vals.astype(np.float64) - batch.values)
    gnorm = np.linalg.norm(grads.astype(np.float64), axis=1)
    return float(
        config.lambda_sdf * residual.mean() + config.lambda_eikonal * np.abs(gnorm - 1.0).mean()
    )


def assemble_dataset(coarse_samples: SdfSamples, local_samples: SdfSamples) -> SdfSamples:
    """Concatenates the two sample sources for one update, tags preserved.

    Either source may be empty; both empty is an error. No data from earlier
    updates is carried over.
    """
    merged = concat_samples(coarse_samples, local_samples)
    if len(merged) == 0:
        raise ValueError("both sample sources are empty")
    return merged


@dataclass
class EpochStats:
    epoch: int
    total: float
    sdf: float
    eikonal: float


def incremental_update(
    net: siren.SirenNetwork,
    opt_state: siren.AdamState,
    dataset: SdfSamples,
    config: TrainConfig,
    seed,
) -> list[EpochStats]:
    """Trains the network in place for epochs_per_update passes.

    Each epoch shuffles the dataset (seeded) and applies one Adam step per
    minibatch. Returns per-epoch mean losses (evaluated on the pre-step
    parameters of each minibatch). Deterministic under seed.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    positions = np.ascontiguousarray(dataset.positions, dtype=net.dtype)
    values = np.ascontiguousarray(dataset.values, dtype=net.dtype)
    n = positions.shape[0]
    mb = config.minibatch_size
    trace = []
    for epoch in range(config.epochs_per_update):
        perm = rng.permutation(n)
        sums = np.zeros(3)
        for i0 in range(0, n, mb):
            idx = perm[i0 : i0 + mb]
            terms, grads = siren.loss_param_gradients(
                net, positions[idx], values[idx], config.lambda_sdf, config.lambda_eikonal
            )
            siren.adam_step(
                net,
                opt_state,
                grads,
                lr=config.learning_rate,
                weight_decay=config.weight_decay,
                decay_mode=config.decay_mode,
            )
            sums += np.array([terms.total, terms.sdf, terms.eikonal]) * idx.size
        trace.append(
            EpochStats(
                epoch=epoch,
                total=float(sums[0] / n),
                sdf=float(sums[1] / n),
                eikonal=float(sums[2] / n),
            )
        )
    return trace
