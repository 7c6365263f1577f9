"""Encrypted, content-addressed transfer of weight vectors.

Models the "encrypt to the recipient, upload, share the CID" path between
roles. Encryption is ECIES-style: an ephemeral X25519 key agreement feeds
HKDF-SHA256, and the payload is sealed with AES-256-GCM, so any tampering
or a wrong secret key fails authentication. CIDs are SHA-256 digests of the
ciphertext.

Ciphertext layout: ``version (1) | ephemeral public key (32) | nonce (12) | sealed``.
"""

from __future__ import annotations

import hashlib
import hmac
import math
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import DecryptError, EncodingError, IntegrityError, NotFoundError
from .model import WeightVector

WEIGHTS_MAGIC = b"WV"
WEIGHTS_VERSION = 1
CIPHER_VERSION = 1
CID_CODEC = 1
_HKDF_INFO = b"fedsnow/vault/v1"
_HEADER = struct.Struct("<2sBI")  # magic, version, coefficient count
_TRAILER = struct.Struct("<dQ")  # intercept, sample_count

RandomBytes = Callable[[int], bytes]


# -- serialization ------------------------------------------------------------

def serialize_weights(w: WeightVector) -> bytes:
    if not w.is_finite():
        raise EncodingError("weight vector contains NaN or infinite entries")
    return (
        _HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, w.dim)
        + w.coefficients.astype("<f8").tobytes()
        + _TRAILER.pack(w.intercept, w.sample_count)
    )


def deserialize_weights(data: bytes) -> WeightVector:
    if len(data) < _HEADER.size + _TRAILER.size:
        raise EncodingError("payload too short for a weight vector")
    magic, version, dim = _HEADER.unpack_from(data)
    if magic != WEIGHTS_MAGIC or version != WEIGHTS_VERSION:
        raise EncodingError(f"unknown weight encoding {magic!r} v{version}")
    if len(data) != _HEADER.size + 8 * dim + _TRAILER.size:
        raise EncodingError(f"payload length {len(data)} does not match {dim} coefficients")
    coef = np.frombuffer(data, dtype="<f8", count=dim, offset=_HEADER.size).astype(np.float64)
    intercept, count = _TRAILER.unpack_from(data, _HEADER.size + 8 * dim)
    if not (np.isfinite(coef).all() and math.isfinite(intercept)):
        raise EncodingError("decoded weight vector is not finite")
    return WeightVector(coef, intercept, count)


# -- keys and hybrid encryption ---------------------------------------------------

@dataclass(frozen=True)
class KeyPair:
    public_part: bytes
    secret_part: bytes


def seeded_random_bytes(seed: int) -> RandomBytes:
    """Deterministic byte source for reproducible simulations (not for real secrecy)."""
    rng = np.random.default_rng(seed)
    return lambda n: rng.bytes(n)


def _private_from_bytes(raw: bytes) -> X25519PrivateKey:
    return X25519PrivateKey.from_private_bytes(raw)


def _raw_public(key: X25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def generate_keypair(random_bytes: RandomBytes | None = None) -> KeyPair:
    rb = random_bytes or os.urandom
    secret = _private_from_bytes(rb(32))
    raw_secret = secret.private_bytes(
        serialization.Encoding.Raw, serialization.PrivateFormat.Raw, serialization.NoEncryption()
    )
    return KeyPair(_raw_public(secret), raw_secret)


def _derive_key(shared: bytes, eph_public: bytes, recipient_public: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(), length=32, salt=eph_public + recipient_public, info=_HKDF_INFO
    ).derive(shared)


def encrypt_for(recipient_public: bytes, plaintext: bytes, random_bytes: RandomBytes | None = None) -> bytes:
    rb = random_bytes or os.urandom
    try:
        recipient = X25519PublicKey.from_public_bytes(recipient_public)
    except ValueError as exc:
        raise EncodingError(f"invalid recipient public key: {exc}") from exc
    eph = _private_from_bytes(rb(32))
    eph_public = _raw_public(eph)
    key = _derive_key(eph.exchange(recipient), eph_public, recipient_public)
    nonce = rb(12)
    header = bytes([CIPHER_VERSION]) + eph_public + nonce
    return header + AESGCM(key).encrypt(nonce, plaintext, header)


def decrypt(secret: bytes | KeyPair, ciphertext: bytes) -> bytes:
    raw_secret = secret.secret_part if isinstance(secret, KeyPair) else secret
    if len(ciphertext) < 1 + 32 + 12 + 16 or ciphertext[0] != CIPHER_VERSION:
        raise DecryptError("malformed ciphertext")
    header, sealed = ciphertext[:45], ciphertext[45:]
    eph_public, nonce = header[1:33], header[33:45]
    try:
        me = _private_from_bytes(raw_secret)
        shared = me.exchange(X25519PublicKey.from_public_bytes(eph_public))
        key = _derive_key(shared, eph_public, _raw_public(me))
        return AESGCM(key).decrypt(nonce, sealed, header)
    except (InvalidTag, ValueError) as exc:
        raise DecryptError("authentication failed: wrong key or corrupted ciphertext") from exc


# -- content-addressed store ----------------------------------------------------

@dataclass(frozen=True)
class Cid:
    digest: bytes
    codec_tag: int = CID_CODEC

    @classmethod
    def of(cls, content: bytes) -> "Cid":
        return cls(hashlib.sha256(content).digest())

    @classmethod
    def parse(cls, text: str) -> "Cid":
        tag, _, hexdigest = text.partition("-")
        return cls(bytes.fromhex(hexdigest), int(tag[1:]))

    @property
    def hex(self) -> str:
        return self.digest.hex()

    def __str__(self) -> str:
        return f"v{self.codec_tag}-{self.hex}"


class ContentStore:
    """Content-addressed blob store with pinning and garbage collection.

    With ``root`` set, blobs live on disk as ``<root>/<hex digest>``; otherwise
    they are held in memory. Every read re-hashes the blob.
    """

    def __init__(self, root: str | Path | None = None) -> None:
        self._root = Path(root) if root is not None else None
        if self._root is not None:
            self._root.mkdir(parents=True, exist_ok=True)
        self._blobs: dict[bytes, bytes] = {}
        self._pins: set[bytes] = set()
        self._lock = threading.Lock()

    def _path(self, digest: bytes) -> Path:
        assert self._root is not None
        return self._root / digest.hex()

    def _contains(self, digest: bytes) -> bool:
        if self._root is None:
            return digest in self._blobs
        return self._path(digest).exists()

    def __len__(self) -> int:
        if self._root is None:
            return len(self._blobs)
        return sum(1 for _ in self._root.iterdir())

    def __contains__(self, cid: Cid) -> bool:
        return self._contains(cid.digest)

    def put(self, content: bytes) -> Cid:
        cid = Cid.of(content)
        with self._lock:
            if not self._contains(cid.digest):
                if self._root is None:
                    self._blobs[cid.digest] = bytes(content)
                else:
                    self._path(cid.digest).write_bytes(content)
        return cid

    def get(self, cid: Cid) -> bytes:
        if not self._contains(cid.digest):
            raise NotFoundError(f"no content stored under {cid}")
        data = self._blobs[cid.digest] if self._root is None else self._path(cid.digest).read_bytes()
        if not hmac.compare_digest(hashlib.sha256(data).digest(), cid.digest):
            raise IntegrityError(f"stored bytes for {cid} no longer match their digest")
        return data

    def pin(self, cid: Cid) -> None:
        with self._lock:
            if not self._contains(cid.digest):
                raise NotFoundError(f"cannot pin unknown {cid}")
            self._pins.add(cid.digest)

    def unpin(self, cid: Cid) -> None:
        with self._lock:
            self._pins.discard(cid.digest)

    def gc(self) -> int:
        """Evict every unpinned blob; returns the number evicted."""
        with self._lock:
            if self._root is None:
                victims = [d for d in self._blobs if d not in self._pins]
                for d in victims:
                    del self._blobs[d]
            else:
                victims = [bytes.fromhex(p.name) for p in self._root.iterdir()]
                victims = [d for d in victims if d not in self._pins]
                for d in victims:
                    self._path(d).unlink()
            return len(victims)

    def _overwrite(self, cid: Cid, data: bytes) -> None:
        """Replace stored bytes without re-addressing them (tamper simulation)."""
        if self._root is None:
            self._blobs[cid.digest] = data
        else:
            self._path(cid.digest).write_bytes(data)


def send_weights(
    store: ContentStore, recipient_public: bytes, w: WeightVector, random_bytes: RandomBytes | None = None
) -> Cid:
    """Serialize, encrypt to the recipient, upload; returns the CID to announce."""
    return store.put(encrypt_for(recipient_public, serialize_weights(w), random_bytes))


def receive_weights(store: ContentStore, cid: Cid, keys: KeyPair) -> WeightVector:
    return deserialize_weights(decrypt(keys, store.get(cid)))
