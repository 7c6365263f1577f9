"""Local Outlier Factor novelty detection over flattened weight vectors.

Validators fit a :class:`LofModel` on node updates they have received and then
score proposals from other validators. Neighbourhoods contain exactly ``k``
points, ties broken by training index. Duplicate points can make a local
reachability density infinite; a ratio of two infinite densities counts as 1.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, InsufficientDataError
from .model import WeightVector

DEFAULT_K = 5
DEFAULT_THRESHOLD = 1.5


def _distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _density(reach: np.ndarray) -> np.ndarray:
    mean = reach.mean(axis=-1)
    with np.errstate(divide="ignore"):
        return np.where(mean > 0, 1.0 / np.where(mean > 0, mean, 1.0), np.inf)


def _density_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num, den = np.broadcast_arrays(num, den)
    both_inf = np.isinf(num) & np.isinf(den)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = num / den
    return np.where(both_inf, 1.0, out)


@dataclass(frozen=True, eq=False)
class NoveltyVerdict:
    score: float
    is_novel: bool


@dataclass(frozen=True, eq=False)
class LofModel:
    training_points: np.ndarray
    k_neighbors: int
    threshold: float
    k_distance: np.ndarray
    lrd: np.ndarray
    neighbors: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.training_points.shape[1])

    def training_scores(self) -> np.ndarray:
        """LOF of every training point against the rest of the corpus."""
        return _density_ratio(self.lrd[self.neighbors], self.lrd[:, None]).mean(axis=1)


def lof_fit(
    points: Sequence[Sequence[float]] | np.ndarray,
    k: int | None = None,
    threshold: float = DEFAULT_THRESHOLD,
) -> LofModel:
    pts = np.array(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 1:
        raise DimensionError(f"points must form a non-empty 2-D array, got shape {pts.shape}")
    n = pts.shape[0]
    if k is None:
        k = min(DEFAULT_K, n - 1)
    if k < 1 or n < k + 1:
        raise InsufficientDataError(f"LOF with k={k} needs at least {k + 1} points, got {n}")
    if not threshold > 1:
        raise ConfigError(f"novelty threshold must exceed 1, got {threshold}")

    dist = _distances(pts, pts)
    np.fill_diagonal(dist, np.inf)
    neighbors = np.argsort(dist, axis=1, kind="stable")[:, :k]
    rows = np.arange(n)[:, None]
    k_distance = dist[rows[:, 0], neighbors[:, -1]]
    reach = np.maximum(k_distance[neighbors], dist[rows, neighbors])
    lrd = _density(reach)
    for arr in (pts, k_distance, lrd, neighbors):
        arr.setflags(write=False)
    return LofModel(pts, int(k), float(threshold), k_distance, lrd, neighbors)


def lof_score(model: LofModel, query: Sequence[float] | np.ndarray) -> NoveltyVerdict:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != model.dim:
        raise DimensionError(f"query has dimension {q.shape[0]}, model expects {model.dim}")
    d = _distances(q[None, :], model.training_points)[0]
    nbrs = np.argsort(d, kind="stable")[: model.k_neighbors]
    reach = np.maximum(model.k_distance[nbrs], d[nbrs])
    lrd_q = _density(reach)
    score = float(_density_ratio(model.lrd[nbrs], lrd_q).mean())
    return NoveltyVerdict(score, score > model.threshold)


def vet_weights(model: LofModel, proposal: WeightVector) -> bool:
    """Initial opinion on a proposal: accept unless it looks novel."""
    return not lof_score(model, proposal.as_array()).is_novel


class RollingCorpus:
    """Per-validator training corpus: node updates from the last ``window`` rounds."""

    def __init__(self, window: int = 10) -> None:
        if window < 1:
            raise ConfigError(f"window must be >= 1, got {window}")
        self._rounds: deque[list[np.ndarray]] = deque(maxlen=window)

    def add_round(self, updates: Iterable[WeightVector]) -> None:
        self._rounds.append([u.as_array() for u in updates])

    def __len__(self) -> int:
        return sum(len(r) for r in self._rounds)

    def points(self) -> np.ndarray:
        return np.array([p for r in self._rounds for p in r])

    def fit(self, k: int | None = None, threshold: float = DEFAULT_THRESHOLD) -> LofModel:
        pts = self.points()
        if k is not None:
            k = min(k, len(pts) - 1)
        return lof_fit(pts, k, threshold)
