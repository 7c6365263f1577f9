"""Snowball binary consensus with random quorum subsampling.

Decisions are encoded as integers: ``REJECT = 0`` and ``ACCEPT = 1``. One
consensus instance decides one proposal. Nodes poll in lock-step rounds:
every undecided node samples ``quorum_k`` peers, reads their current answers
(the final decision if decided, else the preference) from a snapshot taken
at the start of the round, and applies :func:`step`.

An alpha-majority requires at least ``alpha`` matching answers. A majority
for the decision already being counted increments the consecutive-success
counter; a majority for the other decision switches to it with the counter
at 1. A poll without an alpha-majority resets the counter. The node decides
when the counter reaches ``beta``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import IO, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ProtocolError

REJECT = 0
ACCEPT = 1


def _as_decision(value: object) -> int:
    if value in (0, 1) and not isinstance(value, float):
        return int(value)  # type: ignore[arg-type]
    raise ProtocolError(f"decision must be 0 or 1, got {value!r}")


@dataclass(frozen=True)
class ConsensusParams:
    n_nodes: int
    quorum_k: int = 4
    alpha: int = 3
    beta: int = 3
    max_rounds: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_nodes < 1:
            raise ConfigError(f"n_nodes must be >= 1, got {self.n_nodes}")
        if self.n_nodes == 1:
            if self.quorum_k != 0:
                raise ConfigError("a single node has no peers; quorum_k must be 0")
        elif not 1 <= self.quorum_k <= self.n_nodes - 1:
            raise ConfigError(f"quorum_k must be in [1, {self.n_nodes - 1}], got {self.quorum_k}")
        if not 1 <= self.alpha <= max(self.quorum_k, 1):
            raise ConfigError(f"alpha must be in [1, quorum_k={self.quorum_k}], got {self.alpha}")
        if self.beta < 1:
            raise ConfigError(f"beta must be >= 1, got {self.beta}")
        if self.max_rounds < 1:
            raise ConfigError(f"max_rounds must be >= 1, got {self.max_rounds}")

    @classmethod
    def for_network(cls, n_nodes: int, quorum_k: int = 4, alpha: int = 3, beta: int = 3, **kw) -> "ConsensusParams":
        """Clamp the quorum parameters to a network that may be smaller than they assume."""
        k = min(quorum_k, n_nodes - 1)
        return cls(n_nodes, k, min(alpha, max(k, 1)), beta, **kw)


@dataclass(frozen=True)
class SnowballState:
    preference: int
    previous_decision: int
    count: int = 0
    confidence_counter: tuple[int, int] = (0, 0)
    decided: bool = False
    final_decision: int | None = None

    @property
    def answer(self) -> int:
        """What this node tells a peer that polls it."""
        return self.final_decision if self.decided else self.preference  # type: ignore[return-value]


def init_state(initial_preference: int) -> SnowballState:
    pref = _as_decision(initial_preference)
    return SnowballState(preference=pref, previous_decision=pref)


def sample_peers(self_id: int, params: ConsensusParams, rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform sample of ``quorum_k`` distinct peers, never including ``self_id``."""
    n, k = params.n_nodes, params.quorum_k
    if not 0 <= self_id < n:
        raise ConfigError(f"node id {self_id} outside [0, {n})")
    if k > n - 1:
        raise ConfigError(f"cannot sample {k} peers from {n - 1}")
    others = np.array([i for i in range(n) if i != self_id], dtype=np.int64)
    picked = rng.choice(others.size, size=k, replace=False)
    return tuple(sorted(int(i) for i in others[picked]))


def step(state: SnowballState, responses: Sequence[int], params: ConsensusParams) -> SnowballState:
    if state.decided:
        raise ProtocolError("cannot step a decided node")
    if len(responses) != params.quorum_k:
        raise ProtocolError(f"expected {params.quorum_k} responses, got {len(responses)}")
    votes = [_as_decision(r) for r in responses]
    counter = (votes.count(REJECT), votes.count(ACCEPT))
    max_val = max(counter)
    winner = counter.index(max_val)
    if max_val < params.alpha:
        return replace(state, count=0, confidence_counter=counter)
    if winner == state.previous_decision:
        count = state.count + 1
    else:
        count = 1
    decided = count >= params.beta
    return SnowballState(
        preference=winner,
        previous_decision=winner,
        count=count,
        confidence_counter=counter,
        decided=decided,
        final_decision=winner if decided else None,
    )


@dataclass(frozen=True)
class TraceRecord:
    round: int
    node: int
    peers: tuple[int, ...]
    responses: tuple[int, ...]
    confidence_counter: tuple[int, int]
    count: int
    preference: int
    decided: bool


@dataclass
class ConsensusResult:
    final: int
    rounds_used: int
    converged: bool
    decisions: list[int | None]
    trace: list[TraceRecord] = field(default_factory=list)

    @property
    def agreement(self) -> bool:
        decided = {d for d in self.decisions if d is not None}
        return len(decided) <= 1


def _majority(values: Sequence[int]) -> int:
    ones = sum(values)
    return ACCEPT if 2 * ones > len(values) else REJECT


def run_consensus(
    initial_opinions: Sequence[int],
    params: ConsensusParams,
    byzantine: Mapping[int, int] | None = None,
    record_trace: bool = True,
) -> ConsensusResult:
    """Simulate one Snowball instance to completion.

    ``byzantine`` maps node ids to a fixed answer; those nodes never update and
    are excluded from termination and from the returned decision. If the honest
    nodes have not all decided after ``max_rounds`` the result falls back to the
    majority of their current answers (ties reject) with ``converged=False``.
    """
    if len(initial_opinions) != params.n_nodes:
        raise ConfigError(f"{len(initial_opinions)} opinions for {params.n_nodes} nodes")
    byzantine = {int(i): _as_decision(v) for i, v in (byzantine or {}).items()}
    states = [init_state(o) for o in initial_opinions]
    honest = [i for i in range(params.n_nodes) if i not in byzantine]
    rng = np.random.default_rng(params.seed)
    trace: list[TraceRecord] = []

    if params.n_nodes == 1:
        only = states[0]
        return ConsensusResult(only.preference, 0, True, [only.preference], trace)

    rounds = 0
    while rounds < params.max_rounds and not all(states[i].decided for i in honest):
        rounds += 1
        answers = [byzantine.get(i, s.answer) for i, s in enumerate(states)]
        for i in honest:
            if states[i].decided:
                continue
            peers = sample_peers(i, params, rng)
            responses = tuple(answers[p] for p in peers)
            states[i] = step(states[i], responses, params)
            if record_trace:
                s = states[i]
                trace.append(
                    TraceRecord(rounds, i, peers, responses, s.confidence_counter, s.count, s.preference, s.decided)
                )

    decisions = [states[i].final_decision if i in honest else None for i in range(params.n_nodes)]
    converged = all(states[i].decided for i in honest)
    if converged:
        final = _majority([states[i].final_decision for i in honest])  # type: ignore[misc]
    else:
        final = _majority([states[i].answer for i in honest])
    return ConsensusResult(final, rounds, converged, decisions, trace)


def write_trace_jsonl(trace: Sequence[TraceRecord], out: IO[str] | str | Path, **extra: object) -> None:
    """One JSON object per (round, node) poll; ``extra`` fields are prepended to each."""
    if isinstance(out, (str, Path)):
        with open(out, "w", encoding="utf-8") as fh:
            write_trace_jsonl(trace, fh, **extra)
        return
    for rec in trace:
        out.write(json.dumps({**extra, **asdict(rec)}) + "\n")
