"""Trust scores, validator influence and the gated global-model rule.

Validator ``i`` proposes weight vector ``i``; row ``i`` of the opinion matrix
holds validator ``i``'s accept/reject verdicts on every proposal, and the
consensus row holds the Snowball outcome per proposal.

Influence for a threshold ``zeta`` (the minimal number of accepted proposals
needed to skip influence weighting):

* trust is normalized to unit sum,
* every validator whose proposal was accepted is granted ``1/zeta``,
* the remaining pool ``1 - accepted/zeta`` is shared in proportion to
  normalized trust,
* final influence = grant + share, which sums to 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .aggregation import WeightedSet, mean_of_accepted, weighted_average
from .errors import DimensionError, FallbackError, PolicyError
from .model import WeightVector

MATCH_REWARD = 10
MIN_TRUST = 1


class GenerationPath(str, Enum):
    CONSENSUS = "consensus"
    INFLUENCE = "influence"
    CARRY_FORWARD = "carry_forward"


@dataclass(frozen=True, eq=False)
class OpinionMatrix:
    rows: np.ndarray
    consensus_row: np.ndarray

    def __post_init__(self) -> None:
        rows = np.array(self.rows, dtype=np.int64)
        cons = np.array(self.consensus_row, dtype=np.int64).reshape(-1)
        if rows.ndim != 2:
            raise DimensionError(f"opinion rows must be 2-D, got shape {rows.shape}")
        n = cons.shape[0]
        if rows.shape[1] != n:
            raise DimensionError(f"rows have length {rows.shape[1]}, consensus row has {n}")
        if not (np.isin(rows, (0, 1)).all() and np.isin(cons, (0, 1)).all()):
            raise DimensionError("opinions must be 0 or 1")
        rows.setflags(write=False)
        cons.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "consensus_row", cons)

    @property
    def n_validators(self) -> int:
        return int(self.rows.shape[0])

    @property
    def n_proposals(self) -> int:
        return int(self.consensus_row.shape[0])

    def accepted(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.consensus_row == 1)]


@dataclass(frozen=True)
class PolicyConfig:
    zeta: int = 0

    def check(self, n_validators: int) -> None:
        if not 0 <= self.zeta <= n_validators:
            raise PolicyError(f"zeta must be in [0, {n_validators}], got {self.zeta}")


@dataclass(frozen=True, eq=False)
class InfluenceVector:
    values: np.ndarray
    trust: np.ndarray
    normalized_trust: np.ndarray
    residual: np.ndarray
    max_influence: float
    pool: float


def trust_calculation(final_opinion: Sequence[int], individual_opinion: Sequence[int]) -> int:
    """+10 per agreement with the consensus, -10 per disagreement, floored at 1."""
    if len(final_opinion) != len(individual_opinion):
        raise DimensionError(f"opinion lengths differ: {len(final_opinion)} vs {len(individual_opinion)}")
    score = 0
    for f, o in zip(final_opinion, individual_opinion):
        score += MATCH_REWARD if f == o else -MATCH_REWARD
    return max(score, MIN_TRUST)


def trust_scores(matrix: OpinionMatrix) -> np.ndarray:
    return np.array([trust_calculation(matrix.consensus_row, row) for row in matrix.rows], dtype=np.int64)


def compute_influence(matrix: OpinionMatrix, accepted: Iterable[int], zeta: int) -> InfluenceVector:
    accepted = sorted(set(int(a) for a in accepted))
    n = matrix.n_validators
    if zeta < 1:
        raise PolicyError("influence weighting needs zeta >= 1")
    if any(not 0 <= a < n for a in accepted):
        raise PolicyError(f"accepted indices {accepted} outside [0, {n})")
    max_influence = 1.0 / zeta
    pool = 1.0 - len(accepted) * max_influence
    if pool < -1e-12:
        raise PolicyError(f"{len(accepted)} accepted proposals exceed zeta={zeta}; influence pool would be negative")
    pool = max(pool, 0.0)

    trust = trust_scores(matrix)
    normalized = trust / trust.sum()
    residual = normalized * pool
    grant = np.zeros(n)
    grant[accepted] = max_influence
    for arr in (trust, normalized, residual):
        arr.setflags(write=False)
    values = grant + residual
    values.setflags(write=False)
    return InfluenceVector(values, trust, normalized, residual, max_influence, pool)


def generate_global_model(
    proposals: Sequence[WeightVector], matrix: OpinionMatrix, zeta: int
) -> tuple[WeightVector, GenerationPath]:
    """Average the consensus-accepted proposals when at least ``zeta`` were
    accepted, otherwise weight all proposals by influence.

    Raises :class:`FallbackError` when ``zeta == 0`` and nothing was accepted.
    """
    if not proposals:
        raise DimensionError("no proposals")
    if len(proposals) != matrix.n_proposals or matrix.n_validators != len(proposals):
        raise DimensionError(
            f"{len(proposals)} proposals vs opinion matrix {matrix.n_validators}x{matrix.n_proposals}"
        )
    accepted = matrix.accepted()
    if len(accepted) >= zeta:
        if not accepted:
            raise FallbackError("no proposal accepted and zeta=0; carry the previous model forward")
        return mean_of_accepted([proposals[i] for i in accepted]), GenerationPath.CONSENSUS
    influence = compute_influence(matrix, accepted, zeta)
    return weighted_average(WeightedSet.of(proposals, influence.values)), GenerationPath.INFLUENCE
