"""Producer-side key-value stores serving leased memory.

Each lease gets its own capacity-bounded store. When a store is full it
evicts with a sampled LRU: draw a few random entries, drop the least
recently used of them, repeat. A token bucket caps the bytes a consumer may
move per second, and the manager spreads reclamation across stores in
proportion to their occupancy.
"""

from __future__ import annotations

import random
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from .consumer import LeaseExpired, RateLimited
from .units import PAGE_SIZE, SLAB_SIZE, InvalidArgument, InvalidState

DEFAULT_SAMPLE_SIZE = 5

STORE_STATS_HEADER = "store_id,occupancy,resident,evictions"


class TokenBucket:
    """Byte-rate limiter. Tokens are kept in milli-bytes so refill is exact."""

    def __init__(self, rate: int, burst: int, now: int = 0):
        if rate <= 0 or burst <= 0:
            raise InvalidArgument("token bucket rate and burst must be positive")
        self.rate = rate
        self.burst = burst
        self._milli = burst * 1000
        self.last_refill = now

    @property
    def tokens(self) -> float:
        return self._milli / 1000

    def _refill(self, now: int) -> None:
        if now > self.last_refill:
            # bytes/s * ms = milli-bytes
            self._milli = min(self.burst * 1000, self._milli + self.rate * (now - self.last_refill))
            self.last_refill = now

    def admit(self, io_size: int, now: int) -> bool:
        self._refill(now)
        need = io_size * 1000
        if need > self._milli:
            return False
        self._milli -= need
        return True

    def retry_after(self, io_size: int, now: int) -> Optional[int]:
        """Milliseconds until ``io_size`` would be admitted; None if it never can."""
        if io_size > self.burst:
            return None
        self._refill(now)
        short = io_size * 1000 - self._milli
        return 0 if short <= 0 else -(-short // self.rate)


@dataclass
class StoreEntry:
    key: bytes
    value: bytes
    last_access: int
    logical_size: int
    # position in the store's recency order; breaks ties between equal timestamps
    stamp: int
    offset: int
    resident_size: int


class ProducerStore:
    """Capacity-bounded KV store for one consumer.

    Occupancy counts ``len(key) + len(value) + value_overhead`` per entry.
    Residency is modelled with a bump allocator over 4 KiB pages: a page
    stays resident while any live entry touches it, so deletes can leave
    partially used pages behind until :meth:`defragment` compacts the arena.
    """

    def __init__(self, capacity: int, sample_size: int = DEFAULT_SAMPLE_SIZE,
                 value_overhead: int = 0, seed: Optional[int] = None, store_id: str = ""):
        if capacity <= 0:
            raise InvalidArgument("store capacity must be positive")
        if sample_size < 1:
            raise InvalidArgument("sample size must be at least 1")
        self.capacity = capacity
        self.sample_size = sample_size
        self.value_overhead = value_overhead
        self.store_id = store_id
        self.rng = random.Random(seed)
        self.entries: dict[bytes, StoreEntry] = {}
        self._keys: list[bytes] = []
        self._pos: dict[bytes, int] = {}
        self._clock = 0
        self._brk = 0
        self._pages: Counter = Counter()
        self.occupancy = 0
        self.evictions = 0

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def entry_size(self, key: bytes, value: bytes) -> int:
        return len(key) + len(value) + self.value_overhead

    # -- residency model --------------------------------------------------

    def _page_span(self, offset: int, size: int) -> range:
        if size == 0:
            return range(0)
        return range(offset // PAGE_SIZE, (offset + size - 1) // PAGE_SIZE + 1)

    def _alloc(self, size: int) -> int:
        off = self._brk
        self._brk += size
        for pg in self._page_span(off, size):
            self._pages[pg] += 1
        return off

    def _free(self, e: StoreEntry) -> None:
        for pg in self._page_span(e.offset, e.logical_size):
            self._pages[pg] -= 1
            if self._pages[pg] == 0:
                del self._pages[pg]

    @property
    def resident(self) -> int:
        return len(self._pages) * PAGE_SIZE

    def defragment(self) -> int:
        """Repack live entries contiguously; returns resident bytes released."""
        before = self.resident
        self._pages.clear()
        self._brk = 0
        for e in sorted(self.entries.values(), key=lambda x: x.offset):
            e.offset = self._alloc(e.logical_size)
            e.resident_size = len(self._page_span(e.offset, e.logical_size)) * PAGE_SIZE
        return before - self.resident

    # -- key bookkeeping --------------------------------------------------

    def _touch(self, e: StoreEntry, now: int) -> None:
        self._clock += 1
        e.stamp = self._clock
        e.last_access = now

    def _remove(self, key: bytes) -> StoreEntry:
        e = self.entries.pop(key)
        i = self._pos.pop(key)
        last = self._keys.pop()
        if last != key:
            self._keys[i] = last
            self._pos[last] = i
        self.occupancy -= e.logical_size
        self._free(e)
        return e

    def _pick_victim(self, exclude: Optional[bytes]) -> Optional[bytes]:
        pool = self._keys
        if exclude is not None and exclude in self._pos:
            if len(pool) == 1:
                return None
            k = min(self.sample_size, len(pool) - 1)
            # sample from everything but ``exclude`` without copying the list
            idx = self.rng.sample(range(len(pool) - 1), k)
            skip = self._pos[exclude]
            cand = [pool[i if i < skip else i + 1] for i in idx]
        else:
            if not pool:
                return None
            cand = self.rng.sample(pool, min(self.sample_size, len(pool)))
        return min(cand, key=lambda k: self.entries[k].stamp)

    def evict_one(self, exclude: Optional[bytes] = None) -> Optional[StoreEntry]:
        key = self._pick_victim(exclude)
        if key is None:
            return None
        self.evictions += 1
        return self._remove(key)

    # -- KV interface -----------------------------------------------------

    def put(self, key: bytes, value: bytes, now: int = 0) -> list[bytes]:
        """Insert or overwrite; returns the keys evicted to make room."""
        size = self.entry_size(key, value)
        if size > self.capacity:
            raise InvalidArgument(f"entry of {size} bytes exceeds store capacity {self.capacity}")
        if key in self.entries:
            self._remove(key)
        e = StoreEntry(key, bytes(value), now, size, 0, self._alloc(size), 0)
        e.resident_size = len(self._page_span(e.offset, size)) * PAGE_SIZE
        self._touch(e, now)
        self.entries[key] = e
        self._pos[key] = len(self._keys)
        self._keys.append(key)
        self.occupancy += size
        evicted = []
        while self.occupancy > self.capacity:
            victim = self.evict_one(exclude=key)
            evicted.append(victim.key)
        return evicted

    def get(self, key: bytes, now: int = 0) -> Optional[bytes]:
        e = self.entries.get(key)
        if e is None:
            return None
        self._touch(e, now)
        return e.value

    def delete(self, key: bytes) -> bool:
        if key not in self.entries:
            return False
        self._remove(key)
        return True

    def evict_bytes(self, nbytes: int) -> tuple[list[bytes], int]:
        """Evict by sampled LRU until at least ``nbytes`` are freed or the store is empty."""
        keys, freed = [], 0
        while freed < nbytes:
            victim = self.evict_one()
            if victim is None:
                break
            keys.append(victim.key)
            freed += victim.logical_size
        return keys, freed

    def shrink(self, capacity: int) -> list[bytes]:
        """Lower the capacity, evicting until occupancy fits."""
        if capacity < 0:
            raise InvalidArgument("negative capacity")
        self.capacity = capacity
        evicted = []
        while self.occupancy > self.capacity:
            evicted.append(self.evict_one().key)
        return evicted

    def stats_row(self) -> str:
        return f"{self.store_id},{self.occupancy},{self.resident},{self.evictions}"


def proportional_split(total: int, sizes: list[int]) -> list[int]:
    """Split ``total`` in proportion to ``sizes`` with largest-remainder rounding."""
    denom = sum(sizes)
    if total < 0:
        raise InvalidArgument("negative total")
    if denom == 0:
        if total:
            raise InvalidArgument("cannot split a positive total over empty sizes")
        return [0] * len(sizes)
    base = [total * s // denom for s in sizes]
    rem = [total * s % denom for s in sizes]
    short = total - sum(base)
    for i in sorted(range(len(sizes)), key=lambda i: (-rem[i], i))[:short]:
        base[i] += 1
    return base


@dataclass
class LeasedStore:
    lease_id: int
    slabs: int
    store: ProducerStore
    bucket: TokenBucket
    expires_at: Optional[int]
    token: str = ""
    ops: int = 0


@dataclass(frozen=True)
class Revocation:
    lease_id: int
    slabs: int
    evicted_keys: tuple
    evicted_bytes: int


@dataclass
class ReclaimResult:
    targets: dict[int, int] = field(default_factory=dict)
    evicted_bytes: dict[int, int] = field(default_factory=dict)
    revocations: list[Revocation] = field(default_factory=list)

    @property
    def total_evicted(self) -> int:
        return sum(self.evicted_bytes.values())


class StoreManager:
    """The producer's pool of harvested slabs and the stores carved from it.

    ``spawn``, ``terminate``, ``expire`` and ``reclaim`` are serialized
    against each other with one lock; the stores themselves are owned by
    whichever connection serves their lease.
    """

    def __init__(self, pool_slabs: int, slab_size: int = SLAB_SIZE,
                 sample_size: int = DEFAULT_SAMPLE_SIZE, value_overhead: int = 0,
                 seed: Optional[int] = None):
        if pool_slabs < 0 or slab_size <= 0:
            raise InvalidArgument("bad pool geometry")
        self.pool_slabs = pool_slabs
        self.slab_size = slab_size
        self.sample_size = sample_size
        self.value_overhead = value_overhead
        self._seed = random.Random(seed)
        self.leases: dict[int, LeasedStore] = {}
        self.lock = threading.RLock()

    @property
    def used_slabs(self) -> int:
        return sum(ls.slabs for ls in self.leases.values())

    @property
    def free_slabs(self) -> int:
        return self.pool_slabs - self.used_slabs

    def spawn(self, lease_id: int, slabs: int, expires_at: Optional[int] = None,
              rate: int = 100 * 2**20, burst: Optional[int] = None, now: int = 0,
              token: str = "") -> LeasedStore:
        with self.lock:
            if lease_id in self.leases:
                raise InvalidState(f"lease {lease_id} already has a store")
            if slabs < 1 or slabs > self.free_slabs:
                raise InvalidState(f"cannot carve {slabs} slabs from {self.free_slabs} free")
            store = ProducerStore(slabs * self.slab_size, self.sample_size, self.value_overhead,
                                  seed=self._seed.getrandbits(64), store_id=str(lease_id))
            bucket = TokenBucket(rate, burst if burst is not None else rate, now)
            ls = LeasedStore(lease_id, slabs, store, bucket, expires_at, token)
            self.leases[lease_id] = ls
            return ls

    def get(self, lease_id: int) -> Optional[LeasedStore]:
        return self.leases.get(lease_id)

    def terminate(self, lease_id: int) -> LeasedStore:
        with self.lock:
            ls = self.leases.pop(lease_id, None)
            if ls is None:
                raise InvalidState(f"no store for lease {lease_id}")
            return ls

    def extend(self, lease_id: int, expires_at: int) -> None:
        with self.lock:
            self.leases[lease_id].expires_at = expires_at

    def expire(self, now: int) -> list[int]:
        """Terminate every store whose lease has ended."""
        with self.lock:
            done = [lid for lid, ls in self.leases.items()
                    if ls.expires_at is not None and ls.expires_at <= now]
            for lid in done:
                del self.leases[lid]
            return done

    def revoke(self, lease_id: int, slabs: int) -> Revocation:
        """Take ``slabs`` back from a lease, evicting whatever no longer fits."""
        with self.lock:
            ls = self.leases[lease_id]
            slabs = min(slabs, ls.slabs)
            before = ls.store.occupancy
            keys = ls.store.shrink((ls.slabs - slabs) * self.slab_size)
            ls.slabs -= slabs
            if ls.slabs == 0:
                del self.leases[lease_id]
            return Revocation(lease_id, slabs, tuple(keys), before - ls.store.occupancy)

    def reclaim(self, total_bytes: int) -> ReclaimResult:
        """Evict ``total_bytes`` across stores in proportion to their occupancy.

        Slabs whose contents were entirely evicted are handed back to the
        pool and reported as revocations.
        """
        with self.lock:
            ids = sorted(self.leases)
            sizes = [self.leases[i].store.occupancy for i in ids]
            if total_bytes > sum(sizes):
                raise InvalidArgument(f"cannot reclaim {total_bytes} of {sum(sizes)} occupied bytes")
            res = ReclaimResult()
            for lid, target in zip(ids, proportional_split(total_bytes, sizes)):
                ls = self.leases[lid]
                res.targets[lid] = target
                if target == 0:
                    res.evicted_bytes[lid] = 0
                    continue
                used_before = -(-ls.store.occupancy // self.slab_size)
                keys, freed = ls.store.evict_bytes(target)
                res.evicted_bytes[lid] = freed
                emptied = used_before - (-(-ls.store.occupancy // self.slab_size))
                if emptied:
                    ls.slabs -= emptied
                    ls.store.capacity = ls.slabs * self.slab_size
                    res.revocations.append(Revocation(lid, emptied, tuple(keys), freed))
                    if ls.slabs == 0:
                        del self.leases[lid]
            return res

    def stats_rows(self) -> list[str]:
        return [self.leases[i].store.stats_row() for i in sorted(self.leases)]


class LocalStoreHandle:
    """In-process producer endpoint with rate limiting, shaped like a remote one."""

    def __init__(self, leased: LeasedStore, clock=lambda: 0):
        self.leased = leased
        self.clock = clock

    def _admit(self, size: int) -> None:
        now = self.clock()
        exp = self.leased.expires_at
        if exp is not None and now >= exp:
            raise LeaseExpired(f"lease {self.leased.lease_id} expired")
        if not self.leased.bucket.admit(size, now):
            wait = self.leased.bucket.retry_after(size, now)
            raise RateLimited(wait if wait is not None else -1)

    def put(self, key: bytes, value: bytes) -> None:
        self._admit(len(key) + len(value))
        self.leased.store.put(key, value, self.clock())

    def get(self, key: bytes) -> Optional[bytes]:
        self._admit(len(key))
        return self.leased.store.get(key, self.clock())

    def delete(self, key: bytes) -> None:
        self._admit(len(key))
        self.leased.store.delete(key)
