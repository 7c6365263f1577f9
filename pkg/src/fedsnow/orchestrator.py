"""Round protocol wiring nodes, validators, the vault, consensus and the ledger.

One repetition of an experiment owns a :class:`RunState`. Each call to
:func:`run_round` performs, in order:

1. broadcast of the current global model to every node;
2. local training (nodes of malicious validators hold label-flipped shards);
3. node -> validator transfer through the encrypted content store;
4. validator aggregation by sample count and novelty-corpus update;
5. proposal exchange and initial opinions from LOF vetting;
6. one Snowball instance per proposal;
7. opinions and consensus row written to the ledger;
8. coordinator reads the ledger and generates the global model;
9. evaluation of the defended model and of an undefended FedAvg baseline.

All randomness is derived from ``master_seed`` through ``numpy.random.SeedSequence``
spawn keys, so results do not depend on execution order.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any

import numpy as np

from . import ledger as ledger_mod
from .aggregation import fedavg_by_samples
from .consensus import ConsensusParams, TraceRecord, run_consensus
from .errors import AccessDenied, ConfigError, FallbackError, IntegrityError
from .ledger import CONSENSUS_KEY, OpinionCollector
from .model import (
    AttackConfig,
    Dataset,
    SyntheticSpec,
    TrainConfig,
    WeightVector,
    evaluate,
    flip_labels,
    load_csv,
    make_synthetic,
    train_local,
    train_test_split,
)
from .novelty import DEFAULT_K, DEFAULT_THRESHOLD, RollingCorpus, vet_weights
from .trust import GenerationPath, OpinionMatrix, PolicyConfig, compute_influence, generate_global_model, trust_scores
from .vault import ContentStore, KeyPair, generate_keypair, receive_weights, seeded_random_bytes, send_weights, serialize_weights

log = logging.getLogger(__name__)

COORDINATOR = "coordinator"

# spawn-key tags for independent random streams
_SPLIT, _PARTITION, _MALICIOUS, _FLIP, _KEYS, _VAULT, _TRAIN, _CONSENSUS = range(8)


def derive_seed(master_seed: int, *path: int) -> int:
    """64-bit seed for the stream identified by ``path`` under ``master_seed``."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(int(p) for p in path))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


@dataclass(frozen=True)
class Topology:
    n_validators: int = 5
    nodes_per_validator: int = 2

    def __post_init__(self) -> None:
        if self.n_validators < 1 or self.nodes_per_validator < 1:
            raise ConfigError("topology needs at least one validator and one node per validator")

    @property
    def n_nodes(self) -> int:
        return self.n_validators * self.nodes_per_validator

    def validator_of(self, node: int) -> int:
        return node // self.nodes_per_validator

    def nodes_of(self, validator: int) -> range:
        start = validator * self.nodes_per_validator
        return range(start, start + self.nodes_per_validator)


@dataclass(frozen=True)
class NoveltyConfig:
    window: int = 10
    k_neighbors: int = DEFAULT_K
    threshold: float = DEFAULT_THRESHOLD
    # below this many corpus points every proposal is accepted
    min_points: int | None = None

    @property
    def required_points(self) -> int:
        return self.min_points if self.min_points is not None else self.k_neighbors + 1


@dataclass(frozen=True)
class DataConfig:
    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    csv_path: str | None = None
    label_column: str = "label"
    positive_label: str | None = None
    categorical_encoding: str = "onehot"
    test_fraction: float = 0.25

    def load(self) -> Dataset:
        if self.csv_path is not None:
            return load_csv(self.csv_path, self.label_column, self.categorical_encoding, self.positive_label)
        if self.synthetic is None:
            raise ConfigError("data needs either a synthetic spec or a csv path")
        return make_synthetic(**asdict(self.synthetic))


@dataclass(frozen=True)
class ExperimentConfig:
    topology: Topology = field(default_factory=Topology)
    train: TrainConfig = field(default_factory=TrainConfig)
    consensus: ConsensusParams = field(default_factory=lambda: ConsensusParams(5, 4, 3, 3))
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    novelty: NoveltyConfig = field(default_factory=NoveltyConfig)
    data: DataConfig = field(default_factory=DataConfig)
    rounds: int = 10
    repetitions: int = 1
    master_seed: int = 0
    surety_payment: float = 0.01

    def validate(self) -> None:
        n = self.topology.n_validators
        if self.consensus.n_nodes != n:
            raise ConfigError(f"consensus.n_nodes={self.consensus.n_nodes} but topology has {n} validators")
        self.attack.check_validators(n)
        try:
            self.policy.check(n)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.rounds < 1 or self.repetitions < 1:
            raise ConfigError("rounds and repetitions must be positive")

    def with_sweep_point(self, zeta: int, flip: int, proportion: int) -> "ExperimentConfig":
        return replace(
            self,
            policy=PolicyConfig(zeta),
            attack=AttackConfig(flip=flip, proportion=proportion, seed=self.attack.seed),
        )

    def to_dict(self) -> dict[str, Any]:
        return _jsonable(asdict(self))

    def digest(self) -> str:
        """SHA-256 over the canonical JSON form; identifies a run together with the seed."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def default_config(**overrides: Any) -> ExperimentConfig:
    """Five validators with two nodes each and Snowball at k=4, alpha=3, beta=3."""
    cfg = ExperimentConfig(**overrides)
    cfg.validate()
    return cfg


@dataclass
class RoundReport:
    repetition: int
    round: int
    accepted: list[int]
    opinions: list[list[int]]
    consensus_row: list[int]
    trust: list[int]
    influence: list[float] | None
    path: GenerationPath
    accuracy_defended: float
    accuracy_baseline: float
    consensus_rounds: list[int]
    consensus_converged: list[bool]
    ledger_root: str
    malicious: list[int]
    global_cid: str
    traces: dict[int, list[TraceRecord]] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("traces")
        d["path"] = self.path.value
        return d


@dataclass
class SummaryRow:
    round: int
    mean_defended: float
    std_defended: float
    mean_baseline: float
    std_baseline: float


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: list[list[RoundReport]]
    summary: list[SummaryRow]
    ledgers: list[list[ledger_mod.TxEntry]] = field(default_factory=list, repr=False)


@dataclass
class RunState:
    """Mutable per-repetition simulation state."""

    cfg: ExperimentConfig
    repetition: int
    train: Dataset
    test: Dataset
    shards: list[Dataset]
    malicious: list[int]
    validator_keys: list[KeyPair]
    coordinator_keys: KeyPair
    store: ContentStore
    ledger: OpinionCollector
    corpora: list[RollingCorpus]
    global_weights: WeightVector
    baseline_weights: WeightVector
    random_bytes: Any
    round: int = 0
    global_cid: Any = None

    @property
    def validator_addresses(self) -> list[str]:
        return [f"validator-{v}" for v in range(self.cfg.topology.n_validators)]

    def seed(self, *path: int) -> int:
        return derive_seed(self.cfg.master_seed, self.repetition, *path)


def partition_data(dataset: Dataset, topology: Topology, seed: int) -> list[Dataset]:
    """IID split into ``topology.n_nodes`` disjoint shards whose sizes differ by at most one."""
    n_nodes = topology.n_nodes
    if len(dataset) < n_nodes:
        raise ConfigError(f"{len(dataset)} samples cannot cover {n_nodes} nodes")
    order = np.random.default_rng(seed).permutation(len(dataset))
    return [
        dataset.subset(np.sort(part), f"{dataset.name}/node{i}")
        for i, part in enumerate(np.array_split(order, n_nodes))
    ]


def init_state(cfg: ExperimentConfig, repetition: int = 0, dataset: Dataset | None = None) -> RunState:
    """Build the topology for one repetition and register validators on the ledger."""
    cfg.validate()
    master = cfg.master_seed
    topo = cfg.topology
    data = dataset if dataset is not None else cfg.data.load()
    train, test = train_test_split(data, cfg.data.test_fraction, derive_seed(master, repetition, _SPLIT))
    shards = partition_data(train, topo, derive_seed(master, repetition, _PARTITION))

    mal_rng = np.random.default_rng(derive_seed(master, repetition, _MALICIOUS))
    malicious = sorted(int(v) for v in mal_rng.choice(topo.n_validators, cfg.attack.flip, replace=False))
    for v in malicious:
        for node in topo.nodes_of(v):
            flip_seed = derive_seed(master, repetition, _FLIP, node, cfg.attack.seed)
            shards[node] = flip_labels(shards[node], cfg.attack.proportion, flip_seed)

    key_bytes = seeded_random_bytes(derive_seed(master, repetition, _KEYS))
    validator_keys = [generate_keypair(key_bytes) for _ in range(topo.n_validators)]
    coordinator_keys = generate_keypair(key_bytes)

    ledger = OpinionCollector(COORDINATOR)
    state = RunState(
        cfg=cfg,
        repetition=repetition,
        train=train,
        test=test,
        shards=shards,
        malicious=malicious,
        validator_keys=validator_keys,
        coordinator_keys=coordinator_keys,
        store=ContentStore(),
        ledger=ledger,
        corpora=[RollingCorpus(cfg.novelty.window) for _ in range(topo.n_validators)],
        global_weights=WeightVector.zeros(data.n_features),
        baseline_weights=WeightVector.zeros(data.n_features),
        random_bytes=seeded_random_bytes(derive_seed(master, repetition, _VAULT)),
    )
    for addr in state.validator_addresses:
        ledger.open_account(addr, balance=max(1.0, cfg.surety_payment))
        if not ledger.add_validator(addr, cfg.surety_payment):
            raise ConfigError(
                f"surety payment {cfg.surety_payment} rejected; it must exceed {ledger.state.surety_fee}"
            )
    return state


def _node_train_cfg(state: RunState, node: int) -> TrainConfig:
    return replace(state.cfg.train, seed=state.seed(_TRAIN, state.round, node))


def _transfer(state: RunState, w: WeightVector, recipient: KeyPair) -> WeightVector:
    cid = send_weights(state.store, recipient.public_part, w, state.random_bytes)
    received = receive_weights(state.store, cid, recipient)
    if received != w:
        raise IntegrityError(f"weights received under {cid} differ from the weights sent")
    return received


def _baseline_step(state: RunState) -> float:
    """Undefended FedAvg over every node, poisoned ones included."""
    updates = [
        train_local(shard, state.baseline_weights, _node_train_cfg(state, node))
        for node, shard in enumerate(state.shards)
    ]
    state.baseline_weights = fedavg_by_samples(updates)
    return evaluate(state.baseline_weights, state.test).accuracy


def run_round(state: RunState, cfg: ExperimentConfig | None = None, record_traces: bool = False) -> RoundReport:
    cfg = cfg or state.cfg
    topo = cfg.topology
    n = topo.n_validators
    state.round += 1
    coord = COORDINATOR
    addresses = state.validator_addresses

    # (1)-(4) node training, transfer, validator aggregation
    proposals: list[WeightVector] = []
    for v in range(n):
        received = []
        for node in topo.nodes_of(v):
            update = train_local(state.shards[node], state.global_weights, _node_train_cfg(state, node))
            received.append(_transfer(state, update, state.validator_keys[v]))
        proposals.append(fedavg_by_samples(received))
        state.corpora[v].add_round(received)

    # (5) proposal exchange and vetting
    opinions = np.ones((n, n), dtype=np.int64)
    for w in range(n):
        corpus = state.corpora[w]
        if len(corpus) < cfg.novelty.required_points:
            continue
        lof = corpus.fit(cfg.novelty.k_neighbors, cfg.novelty.threshold)
        for u in range(n):
            if u != w:
                seen = _transfer(state, proposals[u], state.validator_keys[w])
                opinions[w, u] = int(vet_weights(lof, seen))

    # (6) one Snowball instance per proposal
    consensus_row, rounds_used, converged, traces = [], [], [], {}
    for u in range(n):
        params = replace(cfg.consensus, seed=state.seed(_CONSENSUS, state.round, u))
        result = run_consensus(opinions[:, u].tolist(), params, record_trace=record_traces)
        consensus_row.append(result.final)
        rounds_used.append(result.rounds_used)
        converged.append(result.converged)
        if record_traces:
            traces[u] = result.trace

    # (7) ledger recording
    try:
        state.ledger.setup(coord, n)
        for v in range(n):
            state.ledger.set_opinion(addresses[v], v, opinions[v].tolist())
        state.ledger.set_opinion(coord, CONSENSUS_KEY, consensus_row)
        snapshot = state.ledger.get_opinion(coord)
    except AccessDenied as exc:
        raise AccessDenied(f"round {state.round} aborted: ledger refused a call ({exc})") from exc

    # (8) coordinator builds the global model from the ledger view
    matrix = OpinionMatrix([snapshot[v] for v in range(n)], snapshot[CONSENSUS_KEY])
    at_coordinator = [_transfer(state, p, state.coordinator_keys) for p in proposals]
    zeta = cfg.policy.zeta
    influence = None
    try:
        new_global, path = generate_global_model(at_coordinator, matrix, zeta)
    except FallbackError:
        new_global, path = state.global_weights, GenerationPath.CARRY_FORWARD
    if path is GenerationPath.INFLUENCE:
        influence = compute_influence(matrix, matrix.accepted(), zeta).values.tolist()
    state.global_weights = new_global

    global_cid = state.store.put(serialize_weights(new_global))
    if state.global_cid is not None and state.global_cid != global_cid:
        state.store.unpin(state.global_cid)
    state.store.pin(global_cid)
    state.global_cid = global_cid
    state.store.gc()

    if not state.ledger.verify():
        raise IntegrityError(f"ledger hash chain broken after round {state.round}")

    # (9) evaluation
    acc = evaluate(new_global, state.test).accuracy
    acc_base = _baseline_step(state)
    report = RoundReport(
        repetition=state.repetition,
        round=state.round,
        accepted=matrix.accepted(),
        opinions=opinions.tolist(),
        consensus_row=[int(c) for c in consensus_row],
        trust=trust_scores(matrix).tolist(),
        influence=influence,
        path=path,
        accuracy_defended=acc,
        accuracy_baseline=acc_base,
        consensus_rounds=rounds_used,
        consensus_converged=converged,
        ledger_root=state.ledger.root_hash,
        malicious=list(state.malicious),
        global_cid=str(global_cid),
        traces=traces,
    )
    log.debug("rep %d round %d path=%s acc=%.4f base=%.4f", state.repetition, state.round, path.value, acc, acc_base)
    return report


def summarize(reports: list[list[RoundReport]]) -> list[SummaryRow]:
    rows = []
    for r in range(len(reports[0])):
        d = np.array([rep[r].accuracy_defended for rep in reports])
        b = np.array([rep[r].accuracy_baseline for rep in reports])
        rows.append(SummaryRow(r + 1, float(d.mean()), float(d.std()), float(b.mean()), float(b.std())))
    return rows


def run_experiment(cfg: ExperimentConfig, record_traces: bool = False) -> ExperimentResult:
    cfg.validate()
    dataset = cfg.data.load()
    reports, ledgers = [], []
    for rep in range(cfg.repetitions):
        state = init_state(cfg, rep, dataset)
        reports.append([run_round(state, cfg, record_traces) for _ in range(cfg.rounds)])
        ledgers.append(state.ledger.tx_log)
    return ExperimentResult(cfg, reports, summarize(reports), ledgers)


def run_baseline(cfg: ExperimentConfig, repetition: int = 0) -> list[float]:
    """Per-round test accuracy of plain FedAvg over all nodes on the same partitions."""
    state = init_state(cfg, repetition)
    series = []
    for _ in range(cfg.rounds):
        state.round += 1
        series.append(_baseline_step(state))
    return series


def run_centralized(cfg: ExperimentConfig, repetition: int = 0) -> float:
    """Test accuracy of one model trained on the pooled (unpoisoned) training split
    for ``rounds * epochs`` epochs."""
    cfg.validate()
    data = cfg.data.load()
    train, test = train_test_split(data, cfg.data.test_fraction, derive_seed(cfg.master_seed, repetition, _SPLIT))
    tcfg = replace(cfg.train, epochs=cfg.train.epochs * cfg.rounds, seed=derive_seed(cfg.master_seed, repetition, _TRAIN))
    w = train_local(train, WeightVector.zeros(data.n_features), tcfg)
    return evaluate(w, test).accuracy
