import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import WORKED_ROWS
from fedsnow.consensus import (
    ACCEPT,
    REJECT,
    ConsensusParams,
    init_state,
    run_consensus,
    sample_peers,
    step,
    write_trace_jsonl,
)
from fedsnow.errors import ConfigError, ProtocolError

DEFAULTS = ConsensusParams(5, 4, 3, 3)


class TestStep:
    def test_majority_increments_counter(self):
        s = step(init_state(ACCEPT), [1, 1, 1, 0], DEFAULTS)
        assert (s.preference, s.count, s.decided) == (ACCEPT, 1, False)
        s = step(s, [1, 1, 1, 1], DEFAULTS)
        s = step(s, [1, 1, 1, 0], DEFAULTS)
        assert s.decided and s.final_decision == ACCEPT and s.answer == ACCEPT

    def test_exactly_alpha_counts_as_majority(self):
        assert step(init_state(REJECT), [0, 0, 0, 1], DEFAULTS).count == 1

    def test_split_vote_resets(self):
        s = step(init_state(ACCEPT), [1, 1, 1, 1], DEFAULTS)
        s = step(s, [1, 1, 0, 0], DEFAULTS)
        assert s.count == 0 and s.preference == ACCEPT and s.confidence_counter == (2, 2)

    def test_flip_restarts_at_one(self):
        s = step(init_state(ACCEPT), [1, 1, 1, 1], DEFAULTS)
        s = step(s, [1, 1, 1, 1], DEFAULTS)
        s = step(s, [0, 0, 0, 1], DEFAULTS)
        assert (s.preference, s.count) == (REJECT, 1)

    def test_first_majority_against_initial_preference(self):
        s = step(init_state(ACCEPT), [0, 0, 0, 0], DEFAULTS)
        assert (s.preference, s.count) == (REJECT, 1)

    def test_beta_one_decides_immediately(self):
        s = step(init_state(REJECT), [1, 1, 1, 0], ConsensusParams(5, 4, 3, 1))
        assert s.decided and s.final_decision == ACCEPT

    def test_errors(self):
        with pytest.raises(ProtocolError):
            step(init_state(ACCEPT), [1, 1, 1], DEFAULTS)
        with pytest.raises(ProtocolError):
            step(init_state(ACCEPT), [1, 1, 2, 1], DEFAULTS)
        decided = step(init_state(ACCEPT), [1, 1, 1, 1], ConsensusParams(5, 4, 3, 1))
        with pytest.raises(ProtocolError):
            step(decided, [1, 1, 1, 1], DEFAULTS)
        with pytest.raises(ProtocolError):
            init_state(2)


class TestParams:
    @pytest.mark.parametrize(
        "kw",
        [dict(n_nodes=0), dict(n_nodes=5, quorum_k=5), dict(n_nodes=5, alpha=5), dict(n_nodes=5, alpha=0),
         dict(n_nodes=5, beta=0), dict(n_nodes=5, max_rounds=0), dict(n_nodes=1, quorum_k=1)],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ConsensusParams(**kw)

    def test_for_network_clamps(self):
        p = ConsensusParams.for_network(3)
        assert (p.quorum_k, p.alpha) == (2, 2)
        assert ConsensusParams.for_network(1).quorum_k == 0


def test_sample_peers_excludes_self():
    rng = np.random.default_rng(0)
    for _ in range(200):
        me = int(rng.integers(5))
        peers = sample_peers(me, DEFAULTS, rng)
        assert len(set(peers)) == 4 and me not in peers


def test_single_node_decides_own_opinion():
    res = run_consensus([1], ConsensusParams(1, 0, 1, 1))
    assert res.final == 1 and res.converged


def _replay(initial, params, trace):
    """Oracle: re-derive every transition from the recorded polls."""
    pref = list(initial)
    count = [0] * len(initial)
    decided = [False] * len(initial)
    by_round = {}
    for rec in trace:
        by_round.setdefault(rec.round, []).append(rec)
    for rnd in sorted(by_round):
        snapshot = list(pref)
        for rec in by_round[rnd]:
            i = rec.node
            assert not decided[i]
            assert tuple(snapshot[p] for p in rec.peers) == rec.responses
            ones = sum(rec.responses)
            zeros = len(rec.responses) - ones
            if max(ones, zeros) >= params.alpha:
                winner = 1 if ones > zeros else 0
                count[i] = count[i] + 1 if winner == pref[i] else 1
                pref[i] = winner
                decided[i] = count[i] >= params.beta
            else:
                count[i] = 0
            assert (rec.preference, rec.count, rec.decided) == (pref[i], count[i], decided[i])
    return pref, decided


@pytest.mark.parametrize("seed", range(20))
def test_trace_replay_oracle(seed):
    rng = np.random.default_rng(seed)
    initial = rng.integers(0, 2, size=7).tolist()
    params = ConsensusParams(7, 4, 3, 3, seed=seed)
    res = run_consensus(initial, params)
    pref, decided = _replay(initial, params, res.trace)
    assert all(decided) == res.converged
    assert [p if d else None for p, d in zip(pref, decided)] == res.decisions


@given(st.sampled_from([5, 7, 9]), st.integers(0, 2**32 - 1), st.data())
@settings(max_examples=150, deadline=None)
def test_safety_properties(n, seed, data):
    initial = data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    params = ConsensusParams(n, 4, 3, 3, seed=seed)
    res = run_consensus(initial, params, record_trace=False)
    assert res.rounds_used <= params.max_rounds
    assert res.final in initial
    if res.converged:
        assert res.final in {d for d in res.decisions}
        if n == 5:
            assert res.agreement
    if len(set(initial)) == 1:
        assert res.converged and res.final == initial[0] and res.decisions == initial
    again = run_consensus(initial, params, record_trace=False)
    assert (again.final, again.rounds_used, again.decisions) == (res.final, res.rounds_used, res.decisions)


def test_byzantine_nodes_are_fixed_and_ignored():
    params = ConsensusParams(7, 4, 3, 3, seed=4)
    res = run_consensus([1, 1, 1, 1, 1, 0, 0], params, byzantine={5: 0, 6: 0})
    assert res.decisions[5] is None and res.decisions[6] is None
    assert all(rec.node not in (5, 6) for rec in res.trace)


def test_non_convergence_falls_back_to_majority():
    params = ConsensusParams(5, 4, 4, 3, max_rounds=1, seed=0)
    res = run_consensus([1, 1, 0, 0, 1], params)
    assert not res.converged and res.rounds_used == 1
    answers = [rec.preference for rec in res.trace]
    assert res.final == (1 if sum(answers) * 2 > len(answers) else 0)


def test_worked_example_fourth_proposal_rejected():
    column = [row[3] for row in WORKED_ROWS]
    assert column == [1, 1, 0, 0, 0]
    res = run_consensus(column, ConsensusParams(5, 4, 3, 3, seed=42))
    assert res.converged and res.final == REJECT


def test_trace_jsonl():
    res = run_consensus([1, 0, 1, 0, 1], ConsensusParams(5, seed=1))
    buf = io.StringIO()
    write_trace_jsonl(res.trace, buf, proposal=2)
    lines = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert len(lines) == len(res.trace)
    assert lines[0]["proposal"] == 2 and set(lines[0]) >= {"round", "node", "peers", "responses", "count"}


def test_sample_peers_examples():
    assert sample_peers(0, DEFAULTS, np.random.default_rng(0)) == (1, 2, 3, 4)
    small = ConsensusParams(5, 2, 2, 3)
    rng = np.random.default_rng(1)
    draws = [sample_peers(3, small, rng) for _ in range(20)]
    assert all(len(set(d)) == 2 and 3 not in d for d in draws)
    assert len(set(draws)) > 1
    replay = np.random.default_rng(1)
    assert draws == [sample_peers(3, small, replay) for _ in range(20)]


def test_threshold_crossing_from_beta_minus_one():
    s = step(init_state(ACCEPT), [1, 1, 1, 1], DEFAULTS)
    s = step(s, [1, 1, 1, 1], DEFAULTS)
    assert s.count == DEFAULTS.beta - 1 and not s.decided
    s = step(s, [1, 1, 1, 1], DEFAULTS)
    assert s.decided and s.final_decision == ACCEPT


def test_mixed_opinions_seed_42_matches_replay():
    initial = [1, 1, 0, 0, 0]
    res = run_consensus(initial, ConsensusParams(5, 4, 3, 3, seed=42))
    pref, decided = _replay(initial, ConsensusParams(5, 4, 3, 3, seed=42), res.trace)
    assert all(decided) and res.final == pref[0]


def test_unanimous_accept_decides_within_beta_rounds():
    res = run_consensus([1] * 5, DEFAULTS)
    assert res.rounds_used == DEFAULTS.beta and res.decisions == [1] * 5


@pytest.mark.parametrize("n", [5, 7, 9])
def test_agreement_validity_termination_over_1000_runs(n):
    rng = np.random.default_rng(n)
    terminated = agreed = 0
    for t in range(1000):
        initial = rng.integers(0, 2, size=n).tolist()
        res = run_consensus(initial, ConsensusParams(n, 4, 3, 3, seed=t), record_trace=False)
        assert res.final in initial
        if res.converged:
            terminated += 1
            agreed += res.agreement
    assert terminated >= 990
    if n == 5:
        # k = n - 1: every poll sees the whole network, so agreement is exact
        assert agreed == terminated
    else:
        # beta = 3 gives only probabilistic safety once polls are proper subsamples
        assert agreed >= 0.995 * terminated


def test_safety_is_probabilistic_at_small_beta():
    """A replay-checked run where an early minority decision survives."""
    initial = [0, 1, 1, 1, 0, 0, 0]
    params = ConsensusParams(7, 4, 3, 3, seed=220)
    res = run_consensus(initial, params)
    _replay(initial, params, res.trace)
    assert res.converged and not res.agreement
    assert res.decisions == [1, 1, 0, 1, 1, 1, 1] and res.final == 1
