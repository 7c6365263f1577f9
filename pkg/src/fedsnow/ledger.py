"""In-process model of the opinion-collector contract.

The contract keeps a registry of validators that paid a surety, an opinion
store keyed by validator index, and a hash-chained log of every successful
state-changing call. Access control:

=============  ===========  ==========================  =====
operation      coordinator  validator                   other
=============  ===========  ==========================  =====
add_validator  denied       DuplicateValidatorError     allowed (payment > fee)
setup          allowed      denied                      denied
set_opinion    allowed      allowed                     denied
get_opinion    allowed      denied                      denied
=============  ===========  ==========================  =====

Only the coordinator may write the consensus row (key ``"C"``).
"""

from __future__ import annotations

import copy
import hashlib
import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import IO, Iterable, Sequence, Union

from .errors import AccessDenied, ConfigError, DuplicateValidatorError, StateError

DEFAULT_SURETY_FEE = 0.005
GENESIS_HASH = "0" * 64
CONSENSUS_KEY = "C"

StoreKey = Union[int, str]


class Role(str, Enum):
    COORDINATOR = "coordinator"
    VALIDATOR = "validator"
    OTHER = "other"


@dataclass
class Account:
    address: str
    balance: float = 0.0
    role: Role = Role.OTHER


@dataclass(frozen=True)
class TxEntry:
    payload: bytes
    prev_hash: str
    hash: str


@dataclass
class LedgerState:
    coordinator: str
    valid_validators: list[str] = field(default_factory=list)
    store: dict[StoreKey, tuple[int, ...]] | None = None
    capacity: int = 0
    surety_fee: float = DEFAULT_SURETY_FEE
    escrow: dict[str, float] = field(default_factory=dict)
    tx_log: list[TxEntry] = field(default_factory=list)


def chain_hash(payload: bytes, prev_hash: str) -> str:
    return hashlib.sha256(payload + bytes.fromhex(prev_hash)).hexdigest()


def canonical_payload(record: dict) -> bytes:
    return json.dumps(record, sort_keys=True, separators=(",", ":")).encode("utf-8")


def verify_chain(log: LedgerState | Sequence[TxEntry]) -> bool:
    entries = log.tx_log if isinstance(log, LedgerState) else log
    prev = GENESIS_HASH
    for entry in entries:
        if entry.prev_hash != prev:
            return False
        try:
            if chain_hash(entry.payload, entry.prev_hash) != entry.hash:
                return False
        except ValueError:
            return False
        prev = entry.hash
    return True


def _binary_vector(opinion: Iterable[int]) -> tuple[int, ...]:
    out = []
    for v in opinion:
        if v not in (0, 1) or isinstance(v, float):
            raise ConfigError(f"opinion entries must be 0 or 1, got {v!r}")
        out.append(int(v))
    return tuple(out)


class OpinionCollector:
    def __init__(self, coordinator: str, surety_fee: float = DEFAULT_SURETY_FEE) -> None:
        if not surety_fee > 0:
            raise ConfigError(f"surety_fee must be positive, got {surety_fee}")
        self._state = LedgerState(coordinator=coordinator, surety_fee=surety_fee)
        self._accounts: dict[str, Account] = {coordinator: Account(coordinator, 0.0, Role.COORDINATOR)}
        self._lock = threading.RLock()

    # -- accounts -------------------------------------------------------
    def open_account(self, address: str, balance: float = 0.0) -> Account:
        with self._lock:
            if address in self._accounts:
                raise ConfigError(f"account {address!r} already exists")
            if balance < 0:
                raise ConfigError("balance must be nonnegative")
            acct = Account(address, float(balance))
            self._accounts[address] = acct
            return copy.copy(acct)

    def account(self, address: str) -> Account:
        with self._lock:
            return copy.copy(self._accounts.get(address, Account(address)))

    def role_of(self, address: str) -> Role:
        acct = self._accounts.get(address)
        return acct.role if acct else Role.OTHER

    # -- contract functions --------------------------------------------
    def add_validator(self, caller: str, payment: float) -> bool:
        with self._lock:
            role = self.role_of(caller)
            if role is Role.COORDINATOR:
                raise AccessDenied("the coordinator cannot register as a validator")
            if role is Role.VALIDATOR:
                raise DuplicateValidatorError(f"{caller!r} is already a validator")
            acct = self._accounts.get(caller)
            if acct is None or payment > acct.balance or not payment > self._state.surety_fee:
                return False
            acct.balance -= payment
            acct.role = Role.VALIDATOR
            self._state.valid_validators.append(caller)
            self._state.escrow[caller] = self._state.escrow.get(caller, 0.0) + payment
            self._append({"op": "add_validator", "caller": caller, "payment": payment})
            return True

    def setup(self, caller: str, n_validators: int) -> bool:
        with self._lock:
            self._require(caller, Role.COORDINATOR)
            if n_validators < 0:
                raise ConfigError("n_validators must be nonnegative")
            self._state.store = {}
            self._state.capacity = int(n_validators)
            self._append({"op": "setup", "caller": caller, "n_validators": int(n_validators)})
            return True

    def set_opinion(self, caller: str, key: StoreKey, opinion: Sequence[int]) -> bool:
        with self._lock:
            role = self._require(caller, Role.COORDINATOR, Role.VALIDATOR)
            if self._state.store is None:
                raise StateError("opinion store not initialized; coordinator must call setup first")
            if key == CONSENSUS_KEY:
                if role is not Role.COORDINATOR:
                    raise AccessDenied("only the coordinator records the consensus row")
            elif isinstance(key, bool) or not isinstance(key, int):
                raise StateError(f"opinion key must be a validator index or {CONSENSUS_KEY!r}, got {key!r}")
            elif not 0 <= key < min(self._state.capacity, len(self._state.valid_validators)):
                raise StateError(f"key {key} does not name a registered validator slot")
            vec = _binary_vector(opinion)
            self._state.store[key] = vec
            self._append({"op": "set_opinion", "caller": caller, "key": key, "opinion": list(vec)})
            return True

    def get_opinion(self, caller: str) -> dict[StoreKey, tuple[int, ...]]:
        with self._lock:
            self._require(caller, Role.COORDINATOR)
            return dict(self._state.store or {})

    # -- audit -----------------------------------------------------------
    @property
    def state(self) -> LedgerState:
        with self._lock:
            return copy.deepcopy(self._state)

    @property
    def tx_log(self) -> list[TxEntry]:
        with self._lock:
            return list(self._state.tx_log)

    @property
    def root_hash(self) -> str:
        with self._lock:
            return self._state.tx_log[-1].hash if self._state.tx_log else GENESIS_HASH

    def verify(self) -> bool:
        return verify_chain(self.tx_log)

    def _require(self, caller: str, *allowed: Role) -> Role:
        role = self.role_of(caller)
        if role not in allowed:
            names = " or ".join(r.value for r in allowed)
            raise AccessDenied(f"{caller!r} ({role.value}) is not {names}")
        return role

    def _append(self, record: dict) -> None:
        log = self._state.tx_log
        record = {"seq": len(log), **record}
        payload = canonical_payload(record)
        prev = log[-1].hash if log else GENESIS_HASH
        log.append(TxEntry(payload, prev, chain_hash(payload, prev)))


def dump_jsonl(entries: Sequence[TxEntry], out: IO[str] | str | Path, **extra: object) -> None:
    """One JSON object per entry; ``extra`` fields (e.g. a ledger id) are prepended to each."""
    if isinstance(out, (str, Path)):
        with open(out, "w", encoding="utf-8") as fh:
            dump_jsonl(entries, fh, **extra)
        return
    for e in entries:
        rec = {**extra, "payload": json.loads(e.payload), "prev_hash": e.prev_hash, "hash": e.hash}
        out.write(json.dumps(rec) + "\n")


def load_jsonl(source: IO[str] | str | Path) -> list[TxEntry]:
    """Parse a ledger dump back into entries; payload bytes are re-canonicalized."""
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            return load_jsonl(fh)
    entries = []
    for line in source:
        if line.strip():
            rec = json.loads(line)
            entries.append(TxEntry(canonical_payload(rec["payload"]), rec["prev_hash"], rec["hash"]))
    return entries
