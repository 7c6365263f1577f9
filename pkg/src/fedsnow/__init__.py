"""Simulator for hierarchical federated learning defended by novelty vetting,
Snowball consensus and ledger-recorded trust."""

from .aggregation import WeightedSet, fedavg_by_samples, mean_of_accepted, weighted_average
from .consensus import ConsensusParams, ConsensusResult, run_consensus
from .ledger import OpinionCollector, verify_chain
from .model import AttackConfig, Dataset, TrainConfig, WeightVector, evaluate, train_local
from .novelty import LofModel, lof_fit, lof_score, vet_weights
from .orchestrator import ExperimentConfig, ExperimentResult, RoundReport, run_experiment
from .trust import GenerationPath, OpinionMatrix, compute_influence, generate_global_model, trust_scores
from .vault import Cid, ContentStore, KeyPair, decrypt, encrypt_for, generate_keypair

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "Cid", "ConsensusParams", "ConsensusResult", "ContentStore", "Dataset",
    "ExperimentConfig", "ExperimentResult", "GenerationPath", "KeyPair", "LofModel", "OpinionCollector",
    "OpinionMatrix", "RoundReport", "TrainConfig", "WeightVector", "WeightedSet", "compute_influence",
    "decrypt", "encrypt_for", "evaluate", "fedavg_by_samples", "generate_global_model", "generate_keypair",
    "lof_fit", "lof_score", "mean_of_accepted", "run_consensus", "run_experiment", "train_local",
    "trust_scores", "verify_chain", "vet_weights", "weighted_average",
]
