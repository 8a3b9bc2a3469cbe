"""Supervision samples: (position, signed distance, source) tuples in batches."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

SOURCE_COARSE = "coarse"
SOURCE_LOCAL = "local"


class SdfSample(NamedTuple):
    position: np.ndarray
    sdf: float
    source: str


class SdfSamples:
    """Column-oriented batch of SDF supervision samples.

    Behaves like a sequence of SdfSample for inspection while keeping the
    training-friendly array layout: positions (N, 3) float64, values (N,)
    float64, sources (N,) of SOURCE_* strings.
    """

    def __init__(self, positions, values, sources):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.values = np.asarray(values, dtype=np.float64).reshape(-1)
        if isinstance(sources, str):
            sources = np.full(self.values.shape[0], sources, dtype="U6")
        self.sources = np.asarray(sources, dtype="U6").reshape(-1)
        if not (len(self.positions) == len(self.values) == len(self.sources)):
            raise ValueError("positions, values and sources must align")
        if len(self.values) and not (
            np.isfinite(self.positions).all() and np.isfinite(self.values).all()
        ):
            raise ValueError("samples must be finite")

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, i: int) -> SdfSample:
        return SdfSample(self.positions[i], float(self.values[i]), str(self.sources[i]))

    def count(self, source: str) -> int:
        return int(np.sum(self.sources == source))

    @classmethod
    def empty(cls) -> "SdfSamples":
        return cls(np.empty((0, 3)), np.empty(0), np.empty(0, dtype="U6"))


def concat_samples(*batches: SdfSamples) -> SdfSamples:
    parts = [b for b in batches if len(b)]
    if not parts:
        return SdfSamples.empty()
    return SdfSamples(
        np.concatenate([b.positions for b in parts]),
        np.concatenate([b.values for b in parts]),
        np.concatenate([b.sources for b in parts]),
    )
