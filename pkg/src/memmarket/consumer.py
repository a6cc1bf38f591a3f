"""Consumer-side secure KV layer and memory purchasing strategy.

In full mode every value is encrypted with AES-128-CBC under a per-client key
and a fresh IV (prepended to the ciphertext), the stored blob is hashed with
SHA-256 truncated to 16 bytes, and the lookup key is replaced by a 64-bit
counter. Only the counter, hash and producer index are kept locally.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import itertools
import logging
import os
import threading
import zlib
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np
from cryptography.hazmat.primitives import padding
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from sortedcontainers import SortedDict

from .units import GB, SLAB_SIZE, InvalidArgument

log = logging.getLogger(__name__)

IV_SIZE = 16
HASH_SIZE = 16
KEY_SIZE = 8


class SecurityMode(enum.Enum):
    FULL = "full"
    INTEGRITY_ONLY = "integrity"
    PLAIN = "plain"


class IntegrityViolation(Exception):
    """The producer returned a value whose hash does not match."""


class NoCapacity(Exception):
    pass


class RateLimited(Exception):
    def __init__(self, retry_after_ms: int = 0):
        super().__init__(f"rate limited, retry after {retry_after_ms} ms")
        self.retry_after_ms = retry_after_ms


class LeaseExpired(Exception):
    pass


@dataclass(frozen=True)
class MetadataEntry:
    k_p: Optional[bytes]
    h: bytes
    p_i: int

    @property
    def overhead_bytes(self) -> int:
        # the producer index lives in a small shared table and is not counted
        return (len(self.k_p) if self.k_p else 0) + len(self.h)

    def pack(self) -> bytes:
        return (self.k_p or b"") + self.h + self.p_i.to_bytes(2, "big")


def integrity_hash(blob: bytes) -> bytes:
    return hashlib.sha256(blob).digest()[:HASH_SIZE]


def encrypt(secret: bytes, plaintext: bytes, iv: Optional[bytes] = None) -> bytes:
    iv = os.urandom(IV_SIZE) if iv is None else iv
    padder = padding.PKCS7(128).padder()
    padded = padder.update(plaintext) + padder.finalize()
    enc = Cipher(algorithms.AES(secret), modes.CBC(iv)).encryptor()
    return iv + enc.update(padded) + enc.finalize()


def decrypt(secret: bytes, blob: bytes) -> bytes:
    iv, body = blob[:IV_SIZE], blob[IV_SIZE:]
    dec = Cipher(algorithms.AES(secret), modes.CBC(iv)).decryptor()
    padded = dec.update(body) + dec.finalize()
    unpadder = padding.PKCS7(128).unpadder()
    return unpadder.update(padded) + unpadder.finalize()


class SecureKVClient:
    """KV cache client over one or more leased producer stores.

    ``producers`` is the producer table: objects with ``put(key, value)``,
    ``get(key) -> bytes | None`` and ``delete(key)``. A table slot may be
    ``None`` once its lease is gone.
    """

    def __init__(self, producers: Sequence, secret_key: Optional[bytes] = None,
                 mode: SecurityMode = SecurityMode.FULL):
        self.producers = list(producers)
        self.mode = mode
        self.secret_key = secret_key if secret_key is not None else os.urandom(16)
        if len(self.secret_key) != 16:
            raise InvalidArgument("AES-128 needs a 16-byte key")
        self._index: SortedDict = SortedDict()
        self._counter = itertools.count(1)
        self._lock = threading.RLock()
        self.integrity_failures = 0

    def _slot(self, key: bytes) -> int:
        live = [i for i, p in enumerate(self.producers) if p is not None]
        if not live:
            raise NoCapacity("no producer store leased")
        return live[zlib.crc32(key) % len(live)]

    def _next_kp(self) -> bytes:
        with self._lock:
            return next(self._counter).to_bytes(KEY_SIZE, "big")

    def put(self, key: bytes, value: bytes) -> None:
        p_i = self._slot(key)
        producer = self.producers[p_i]
        if self.mode is SecurityMode.PLAIN:
            producer.put(key, value)
            return
        if self.mode is SecurityMode.FULL:
            k_p = self._next_kp()
            blob = encrypt(self.secret_key, value)
            remote_key = k_p
        else:
            k_p, blob, remote_key = None, value, key
        entry = MetadataEntry(k_p, integrity_hash(blob), p_i)
        producer.put(remote_key, blob)
        with self._lock:
            old = self._index.get(key)
            self._index[key] = entry
        if old is not None and old.k_p is not None and old.k_p != k_p:
            self._remote_delete(old, old.k_p)

    def get(self, key: bytes) -> Optional[bytes]:
        """Value for ``key``, or None when it is not cached (locally or remotely)."""
        if self.mode is SecurityMode.PLAIN:
            producer = self.producers[self._slot(key)]
            return producer.get(key)
        with self._lock:
            entry = self._index.get(key)
        if entry is None:
            return None
        producer = self.producers[entry.p_i] if entry.p_i < len(self.producers) else None
        if producer is None:
            self._drop(key, entry)
            return None
        blob = producer.get(entry.k_p if entry.k_p is not None else key)
        if blob is None:
            self._drop(key, entry)
            return None
        if integrity_hash(blob) != entry.h:
            self.integrity_failures += 1
            self._drop(key, entry)
            self._remote_delete(entry, entry.k_p if entry.k_p is not None else key)
            raise IntegrityViolation(f"hash mismatch for key {key!r}")
        if self.mode is SecurityMode.FULL:
            return decrypt(self.secret_key, blob)
        return blob

    def delete(self, key: bytes) -> None:
        if self.mode is SecurityMode.PLAIN:
            self._remote_delete_slot(self._slot(key), key)
            return
        with self._lock:
            entry = self._index.pop(key, None)
        if entry is None:
            return
        self._remote_delete(entry, entry.k_p if entry.k_p is not None else key)

    def _drop(self, key: bytes, entry: MetadataEntry) -> None:
        with self._lock:
            if self._index.get(key) == entry:
                del self._index[key]

    def _remote_delete(self, entry: MetadataEntry, remote_key: bytes) -> None:
        self._remote_delete_slot(entry.p_i, remote_key)

    def _remote_delete_slot(self, p_i: int, remote_key: bytes) -> None:
        producer = self.producers[p_i] if p_i < len(self.producers) else None
        if producer is None:
            return
        try:
            producer.delete(remote_key)
        except (OSError, ConnectionError, LeaseExpired) as exc:
            log.warning("remote delete to producer %d failed: %s", p_i, exc)

    def keys(self, start: Optional[bytes] = None, stop: Optional[bytes] = None) -> Iterator[bytes]:
        """Locally known keys in order, optionally restricted to ``[start, stop)``."""
        with self._lock:
            ks = list(self._index.irange(start, stop, inclusive=(True, False)))
        return iter(ks)

    def __len__(self):
        return len(self._index)

    def metadata_overhead(self) -> int:
        with self._lock:
            return sum(e.overhead_bytes for e in self._index.values())


# -- purchasing strategy -------------------------------------------------


class MissRatioCurve:
    """Piecewise-linear, non-increasing miss ratio as a function of cache GB."""

    def __init__(self, cache_gb: Sequence[float], miss_ratio: Sequence[float]):
        gb = np.asarray(cache_gb, dtype=float)
        mr = np.asarray(miss_ratio, dtype=float)
        if gb.ndim != 1 or len(gb) != len(mr) or len(gb) == 0:
            raise InvalidArgument("MRC needs matching, non-empty knot arrays")
        if np.any(np.diff(gb) <= 0):
            raise InvalidArgument("MRC cache sizes must be strictly increasing")
        if np.any(np.diff(mr) > 0):
            raise InvalidArgument("MRC must be non-increasing")
        if np.any((mr < 0) | (mr > 1)):
            raise InvalidArgument("miss ratios must lie in [0, 1]")
        self.cache_gb = gb
        self.miss_ratio = mr

    @property
    def max_gb(self) -> float:
        return float(self.cache_gb[-1])

    def __call__(self, gb):
        return np.interp(gb, self.cache_gb, self.miss_ratio)

    @classmethod
    def from_csv(cls, path) -> "MissRatioCurve":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([float(r["cache_gb"]) for r in rows], [float(r["miss_ratio"]) for r in rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cache_gb", "miss_ratio"])
            for g, m in zip(self.cache_gb, self.miss_ratio):
                w.writerow([repr(float(g)), repr(float(m))])


def price_per_hit(mrc: MissRatioCurve, current_gb: float, vm_cost_per_hour: int,
                  request_rate: float) -> float:
    hits_per_hour = request_rate * 3600 * (1 - float(mrc(current_gb)))
    if hits_per_hour <= 0:
        return 0.0
    return vm_cost_per_hour / hits_per_hour


def value_of_memory(mrc: MissRatioCurve, current_gb: float, extra_gb: float,
                    vm_cost_per_hour: int, request_rate: float,
                    remote_hit_discount: float) -> int:
    """Hourly value in micro-cents of ``extra_gb`` more cache, priced per hit."""
    pph = price_per_hit(mrc, current_gb, vm_cost_per_hour, request_rate)
    extra_hits = request_rate * 3600 * (float(mrc(current_gb)) - float(mrc(current_gb + extra_gb)))
    return int(np.floor(remote_hit_discount * pph * extra_hits))


@dataclass(frozen=True)
class ConsumerProfile:
    mrc: MissRatioCurve
    vm_cost_per_hour: int
    request_rate: float
    current_gb: float
    remote_hit_discount: float = 1.0

    def marginal_values(self, increment_gb: float) -> np.ndarray:
        """Hourly value of each successive increment, with price-per-hit fixed at the current size."""
        n = max(0, int(np.ceil((self.mrc.max_gb - self.current_gb) / increment_gb - 1e-12)))
        if n == 0:
            return np.zeros(0)
        pph = price_per_hit(self.mrc, self.current_gb, self.vm_cost_per_hour, self.request_rate)
        edges = self.current_gb + increment_gb * np.arange(n + 1)
        dmiss = -np.diff(self.mrc(edges))
        return self.remote_hit_discount * pph * self.request_rate * 3600 * dmiss

    def thresholds(self, increment_gb: float) -> np.ndarray:
        """Running minimum of increment values over the leading positive run.

        Increment ``k`` is bought at price ``p`` iff its entry is at least
        ``p * increment_gb``.
        """
        mv = self.marginal_values(increment_gb)
        positive = mv > 0
        run = int(np.argmin(positive)) if not positive.all() else len(mv)
        return np.minimum.accumulate(mv[:run])


def purchase_decision(profile: ConsumerProfile, market_price: float,
                      increment_gb: float = SLAB_SIZE / GB) -> float:
    """GB of remote memory worth leasing at ``market_price`` (micro-cents per GB-hour)."""
    mv = profile.marginal_values(increment_gb)
    g = 0
    for v in mv:
        if v <= 0 or v < market_price * increment_gb:
            break
        g += 1
    return g * increment_gb


class DemandCurve:
    """Aggregate step demand of a consumer population, evaluated by binary search."""

    def __init__(self, profiles: Sequence[ConsumerProfile], increment_gb: float = SLAB_SIZE / GB):
        self.increment_gb = increment_gb
        parts = [p.thresholds(increment_gb) for p in profiles]
        self._thr = np.sort(np.concatenate(parts)) if parts else np.zeros(0)

    def __call__(self, price):
        price = np.asarray(price, dtype=float)
        count = len(self._thr) - np.searchsorted(self._thr, price * self.increment_gb, side="left")
        return count * self.increment_gb
