"""Federated averaging at the validator and coordinator levels.

All reductions run in index order so results are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, EmptyAggregationError, ZeroMassError
from .model import WeightVector


def _stack(updates: Sequence[WeightVector]) -> np.ndarray:
    if not updates:
        raise EmptyAggregationError("nothing to aggregate")
    dim = updates[0].dim
    for i, u in enumerate(updates):
        if u.dim != dim:
            raise DimensionError(f"update {i} has dimension {u.dim}, expected {dim}")
    return np.stack([u.as_array() for u in updates])


def _convex_combination(flat: np.ndarray, weights: np.ndarray) -> np.ndarray:
    out = np.zeros(flat.shape[1])
    for row, w in zip(flat, weights):
        out += w * row
    return out


@dataclass(frozen=True)
class WeightedSet:
    entries: tuple[tuple[WeightVector, float], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple((w, float(m)) for w, m in self.entries))
        if not self.entries:
            raise EmptyAggregationError("weighted set is empty")
        _stack([w for w, _ in self.entries])
        masses = [m for _, m in self.entries]
        if any(m < 0 or not np.isfinite(m) for m in masses):
            raise ConfigError(f"weights must be finite and nonnegative, got {masses}")
        if not any(m > 0 for m in masses):
            raise ZeroMassError("all weights are zero")

    @classmethod
    def of(cls, vectors: Sequence[WeightVector], weights: Sequence[float]) -> "WeightedSet":
        if len(vectors) != len(weights):
            raise DimensionError(f"{len(vectors)} vectors but {len(weights)} weights")
        return cls(tuple(zip(vectors, weights)))


def fedavg_by_samples(updates: Sequence[WeightVector]) -> WeightVector:
    """Average weighted by each update's ``sample_count``."""
    flat = _stack(updates)
    counts = np.array([u.sample_count for u in updates], dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ZeroMassError("every update has sample_count 0")
    return WeightVector.from_array(_convex_combination(flat, counts / total), int(total))


def weighted_average(wset: WeightedSet) -> WeightVector:
    vectors = [w for w, _ in wset.entries]
    masses = np.array([m for _, m in wset.entries])
    flat = _stack(vectors)
    return WeightVector.from_array(
        _convex_combination(flat, masses / masses.sum()), sum(v.sample_count for v in vectors)
    )


def mean_of_accepted(accepted: Sequence[WeightVector]) -> WeightVector:
    flat = _stack(accepted)
    n = len(accepted)
    return WeightVector.from_array(
        _convex_combination(flat, np.full(n, 1.0 / n)), sum(v.sample_count for v in accepted)
    )
