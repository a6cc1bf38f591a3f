"""Shared unit conventions and value types.

Prices are integer micro-cents (1e-6 cent) per GB-hour, where GB means 1e9
bytes. Slab and page sizes are binary (MiB / KiB). Time is integer
milliseconds since the epoch of whichever clock is injected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

KiB = 1024
MiB = 1024 * KiB
GiB = 1024 * MiB

# pricing unit; deliberately decimal
GB = 10**9

PAGE_SIZE = 4 * KiB
SLAB_SIZE = 64 * MiB

MS_PER_SECOND = 1000
MS_PER_MINUTE = 60 * MS_PER_SECOND
MS_PER_HOUR = 60 * MS_PER_MINUTE
MS_PER_DAY = 24 * MS_PER_HOUR

# 0.002 cent in micro-cents
DEFAULT_PRICE_STEP = 2000

MIN_LEASE_DURATION = 1 * MS_PER_SECOND


class InvalidArgument(ValueError):
    pass


class InvalidState(RuntimeError):
    pass


def slabs_needed(nbytes: int, slab_size: int = SLAB_SIZE) -> int:
    """Number of slabs required to hold ``nbytes`` (ceiling division)."""
    if slab_size <= 0:
        raise InvalidArgument("slab_size must be positive")
    if nbytes < 0:
        raise InvalidArgument("byte count must be non-negative")
    return -(-nbytes // slab_size)


def lease_overlaps(a: tuple[int, int], b: tuple[int, int]) -> bool:
    """True iff the half-open intervals share a span of nonzero length."""
    (a0, a1), (b0, b1) = a, b
    if a0 > a1 or b0 > b1:
        raise InvalidArgument("interval start after end")
    return max(a0, b0) < min(a1, b1)


def money_for(price: int, nbytes: int, duration_ms: int) -> int:
    """Cost in micro-cents of holding ``nbytes`` for ``duration_ms`` at ``price``.

    ``price`` is micro-cents per GB-hour. The result is floored once, at the
    end, so every intermediate product stays exact.
    """
    if price < 0 or nbytes < 0 or duration_ms < 0:
        raise InvalidArgument("negative money term")
    return (price * nbytes * duration_ms) // (GB * MS_PER_HOUR)


def gb_hours(nbytes: int, duration_ms: int) -> Fraction:
    return Fraction(nbytes * duration_ms, GB * MS_PER_HOUR)


def bytes_to_gb(nbytes: int) -> float:
    return nbytes / GB


def gb_to_bytes(gb: float) -> int:
    return int(round(gb * GB))


@dataclass(frozen=True)
class PlacementWeights:
    w_slabs: float = 1.0
    w_avail: float = 1.0
    w_bw: float = 1.0
    w_cpu: float = 1.0
    w_lat: float = 1.0
    w_rep: float = 1.0

    def __post_init__(self):
        ws = self.as_tuple()
        if any(w < 0 for w in ws):
            raise InvalidArgument("placement weights must be non-negative")
        if not any(w > 0 for w in ws):
            raise InvalidArgument("at least one placement weight must be positive")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.w_slabs, self.w_avail, self.w_bw, self.w_cpu, self.w_lat, self.w_rep)


@dataclass(frozen=True)
class LeaseTerms:
    slabs: int
    duration: int
    min_slabs: int = 1
    max_unit_price: Optional[int] = None
    weights: PlacementWeights = field(default_factory=PlacementWeights)
    bandwidth_limit: int = 100 * MiB
    latency_bound: Optional[int] = None

    def validate(self, min_duration: int = MIN_LEASE_DURATION) -> None:
        if self.slabs < 1:
            raise InvalidArgument("lease must request at least one slab")
        if not 1 <= self.min_slabs <= self.slabs:
            raise InvalidArgument("min_slabs must lie in [1, slabs]")
        if self.duration < min_duration:
            raise InvalidArgument(f"lease duration below minimum {min_duration} ms")
        if self.max_unit_price is not None and self.max_unit_price < 0:
            raise InvalidArgument("negative budget")


@dataclass(frozen=True)
class Slab:
    producer_id: int
    slab_index: int
    size: int = SLAB_SIZE
    lease_id: Optional[int] = None
