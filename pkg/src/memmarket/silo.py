"""In-memory victim cache for harvested pages.

Swapped-out pages land in the silo first. A page that is touched again while
still in the silo is mapped straight back with no backing-store read; a page
left alone for longer than the cooling period is written out. Prefetch pulls
the most recently swapped-out pages back in from the backing store.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Hashable

from sortedcontainers import SortedList

from .units import MS_PER_MINUTE, PAGE_SIZE, InvalidArgument, InvalidState


class Location(enum.Enum):
    SILO = "silo"
    DISK = "disk"


class Where(enum.Enum):
    SILO = "silo"
    DISK = "disk"
    NOT_TRACKED = "not_tracked"


@dataclass(frozen=True)
class BackingKind:
    name: str
    read_latency_us: int
    write_latency_us: int
    # fraction of a page's size that stays resident in RAM once written out
    capacity_factor: float = 0.0

    def __post_init__(self):
        if self.read_latency_us <= 0 or self.write_latency_us <= 0:
            raise InvalidArgument("backing latencies must be positive")
        if not 0.0 <= self.capacity_factor <= 1.0:
            raise InvalidArgument("capacity_factor must lie in [0, 1]")


SSD = BackingKind("ssd", read_latency_us=100, write_latency_us=100)
HDD = BackingKind("hdd", read_latency_us=5000, write_latency_us=5000)


def zram(capacity_factor: float = 0.5) -> BackingKind:
    if not 0.0 < capacity_factor <= 1.0:
        raise InvalidArgument("zram capacity_factor must lie in (0, 1]")
    return BackingKind("zram", read_latency_us=3, write_latency_us=3,
                       capacity_factor=capacity_factor)


@dataclass(frozen=True)
class SiloConfig:
    cooling_period: int = 5 * MS_PER_MINUTE
    backing: BackingKind = SSD
    page_size: int = PAGE_SIZE


@dataclass
class SiloPage:
    page_id: Hashable
    size: int
    swapped_out_at: int
    location: Location
    # when the page (re)entered the silo; the cooling timer runs from here
    silo_since: int
    seq: int


@dataclass(frozen=True)
class AccessResult:
    where: Where
    latency_us: int


@dataclass(frozen=True)
class SiloSnapshot:
    silo_bytes: int
    disk_bytes: int
    disk_reads: int
    disk_writes: int
    read_latency_us: int

    def csv_row(self) -> str:
        return f"{self.silo_bytes},{self.disk_bytes},{self.disk_reads},{self.disk_writes}"


SNAPSHOT_HEADER = "silo_bytes,disk_bytes,disk_reads,disk_writes"


@dataclass
class Silo:
    cfg: SiloConfig = field(default_factory=SiloConfig)

    def __post_init__(self):
        self.pages: dict[Hashable, SiloPage] = {}
        self._in_silo = SortedList(key=lambda p: (p.silo_since, p.seq))
        self._on_disk = SortedList(key=lambda p: (p.swapped_out_at, p.seq))
        self._seq = itertools.count()
        self.swap_outs = 0
        self.mapped_back = 0
        self.disk_reads = 0
        self.disk_writes = 0
        self.read_latency_us = 0
        self._last_tick = None

    # occupancy ----------------------------------------------------------

    @property
    def silo_pages(self) -> int:
        return len(self._in_silo)

    @property
    def disk_pages(self) -> int:
        return len(self._on_disk)

    @property
    def silo_bytes(self) -> int:
        return self.silo_pages * self.cfg.page_size

    @property
    def disk_bytes(self) -> int:
        return self.disk_pages * self.cfg.page_size

    def compressed_footprint(self) -> int:
        """RAM still held by written-out pages (nonzero only for compressed RAM backing)."""
        return int(self.disk_bytes * self.cfg.backing.capacity_factor)

    def harvestable_bytes(self, harvested: int) -> int:
        """Harvested bytes that can actually be offered after the silo's own RAM use."""
        return max(0, harvested - self.silo_bytes - self.compressed_footprint())

    def snapshot(self) -> SiloSnapshot:
        return SiloSnapshot(self.silo_bytes, self.disk_bytes, self.disk_reads,
                            self.disk_writes, self.read_latency_us)

    def locate(self, page_id: Hashable) -> Where:
        page = self.pages.get(page_id)
        if page is None:
            return Where.NOT_TRACKED
        return Where.SILO if page.location is Location.SILO else Where.DISK

    # operations ---------------------------------------------------------

    def swap_out(self, page_id: Hashable, now: int) -> None:
        if page_id in self.pages:
            raise InvalidState(f"page {page_id!r} already swapped out")
        page = SiloPage(page_id, self.cfg.page_size, now, Location.SILO, now, next(self._seq))
        self.pages[page_id] = page
        self._in_silo.add(page)
        self.swap_outs += 1

    def access(self, page_id: Hashable, now: int) -> AccessResult:
        page = self.pages.pop(page_id, None)
        if page is None:
            return AccessResult(Where.NOT_TRACKED, 0)
        self.mapped_back += 1
        if page.location is Location.SILO:
            self._in_silo.remove(page)
            return AccessResult(Where.SILO, 0)
        self._on_disk.remove(page)
        latency = self.cfg.backing.read_latency_us
        self.disk_reads += 1
        self.read_latency_us += latency
        return AccessResult(Where.DISK, latency)

    def tick(self, now: int) -> int:
        """Write out every silo page older than the cooling period."""
        if self._last_tick is not None and now < self._last_tick:
            raise InvalidArgument("tick called with non-monotone time")
        self._last_tick = now
        evicted = 0
        cutoff = now - self.cfg.cooling_period
        while self._in_silo and self._in_silo[0].silo_since < cutoff:
            page = self._in_silo.pop(0)
            page.location = Location.DISK
            self._on_disk.add(page)
            self.disk_writes += 1
            evicted += 1
        return evicted

    def prefetch(self, nbytes: int, now: int | None = None) -> int:
        """Restore up to ``nbytes`` of the most recently swapped-out disk pages."""
        want = nbytes // self.cfg.page_size
        restored = 0
        while restored < want and self._on_disk:
            page = self._on_disk.pop(-1)
            page.location = Location.SILO
            if now is not None:
                page.silo_since = now
            elif self._last_tick is not None:
                page.silo_since = self._last_tick
            self._in_silo.add(page)
            self.disk_reads += 1
            self.read_latency_us += self.cfg.backing.read_latency_us
            restored += 1
        return restored

    def conserved(self) -> bool:
        return self.silo_pages + self.disk_pages + self.mapped_back == self.swap_outs
