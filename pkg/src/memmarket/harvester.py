"""Producer-side harvesting control loop.

Each epoch the harvester looks at two performance windows: a *baseline* fed
only by samples taken while the application saw no page-ins, and a *recent*
window fed by every sample. When the recent tail is worse than the baseline
tail by more than a threshold it backs off (recovery); otherwise it tightens
the memory limit by one chunk, at most once per cooling period.
"""

from __future__ import annotations

import enum
import itertools
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional

from sortedcontainers import SortedList

from .units import MS_PER_HOUR, MS_PER_MINUTE, MS_PER_SECOND, SLAB_SIZE, GiB, InvalidArgument

ABS_EPSILON = 1e-9


class Orientation(enum.Enum):
    HIGHER_IS_BETTER = "higher"
    LOWER_IS_BETTER = "lower"


class NoData(LookupError):
    """Raised when a percentile is requested from an empty window."""


@dataclass(frozen=True)
class HarvesterConfig:
    chunk_size: int = SLAB_SIZE
    cooling_period: int = 5 * MS_PER_MINUTE
    window_size: int = 6 * MS_PER_HOUR
    p99_threshold: float = 0.01
    epoch: int = MS_PER_SECOND
    severe_epochs: int = 3
    recovery_period: int = 60 * MS_PER_SECOND
    orientation: Orientation = Orientation.LOWER_IS_BETTER
    # limit the harvester starts from, i.e. the VM's memory
    memory_bytes: int = 16 * GiB

    def __post_init__(self):
        for name in ("chunk_size", "cooling_period", "window_size", "epoch",
                     "severe_epochs", "recovery_period", "memory_bytes"):
            if getattr(self, name) <= 0:
                raise InvalidArgument(f"{name} must be positive")
        if not 0 < self.p99_threshold < 1:
            raise InvalidArgument("p99_threshold must lie in (0, 1)")


@dataclass(frozen=True)
class PerfSample:
    at: int
    metric: float
    had_page_in: bool = False


class PerfWindow:
    """Time-bounded ordered multiset of metric samples.

    Inserts and rank queries are O(log n); expiry pops from a FIFO of
    arrival times, so samples must arrive in timestamp order.
    """

    def __init__(self, window_size: int):
        self.window_size = window_size
        self._sorted = SortedList()
        self._arrivals: deque[tuple[int, float, int]] = deque()
        self._seq = itertools.count()

    def __len__(self):
        return len(self._sorted)

    def insert(self, metric: float, at: int) -> None:
        if self._arrivals and at < self._arrivals[-1][0]:
            raise InvalidArgument("samples must be inserted in time order")
        seq = next(self._seq)
        self._sorted.add((metric, seq))
        self._arrivals.append((at, metric, seq))

    def expire(self, now: int) -> int:
        """Drop samples older than ``now - window_size``; returns how many."""
        cutoff = now - self.window_size
        dropped = 0
        while self._arrivals and self._arrivals[0][0] < cutoff:
            _, metric, seq = self._arrivals.popleft()
            self._sorted.remove((metric, seq))
            dropped += 1
        return dropped

    def oldest(self) -> Optional[int]:
        return self._arrivals[0][0] if self._arrivals else None

    def newest(self) -> Optional[int]:
        return self._arrivals[-1][0] if self._arrivals else None

    def values(self) -> list[float]:
        return [m for m, _ in self._sorted]

    def worst(self, orientation: Orientation) -> float:
        if not self._sorted:
            raise NoData("empty window")
        if orientation is Orientation.LOWER_IS_BETTER:
            return self._sorted[-1][0]
        return self._sorted[0][0]

    def percentile_worst(self, q: Fraction, orientation: Orientation) -> float:
        """The value ``w`` such that a fraction ``q`` of samples are no worse.

        Rank is ``ceil(q * n)`` (1-indexed) counting from the best end,
        without interpolation.
        """
        n = len(self._sorted)
        if n == 0:
            raise NoData("empty window")
        q = Fraction(q)
        rank = -(-q.numerator * n // q.denominator)
        rank = min(max(rank, 1), n)
        if orientation is Orientation.LOWER_IS_BETTER:
            return self._sorted[rank - 1][0]
        return self._sorted[n - rank][0]


def p99(window: PerfWindow, orientation: Orientation) -> float:
    return window.percentile_worst(Fraction(99, 100), orientation)


def is_worse(a: float, b: float, orientation: Orientation) -> bool:
    """True if metric ``a`` is strictly worse than ``b``."""
    if orientation is Orientation.LOWER_IS_BETTER:
        return a > b
    return a < b


def detect_drop(baseline_p99: float, recent_p99: float, threshold: float,
                orientation: Orientation) -> bool:
    if baseline_p99 == 0:
        if orientation is Orientation.LOWER_IS_BETTER:
            return recent_p99 > ABS_EPSILON
        return recent_p99 < -ABS_EPSILON
    if orientation is Orientation.LOWER_IS_BETTER:
        return recent_p99 > baseline_p99 * (1 + threshold)
    return recent_p99 < baseline_p99 * (1 - threshold)


def record_sample(baseline: PerfWindow, recent: PerfWindow, s: PerfSample) -> None:
    seen = [t for t in (baseline.newest(), recent.newest()) if t is not None]
    if seen and s.at < max(seen):
        raise InvalidArgument(f"non-monotone sample time {s.at} < {max(seen)}")
    recent.insert(s.metric, s.at)
    if not s.had_page_in:
        baseline.insert(s.metric, s.at)
    baseline.expire(s.at)
    recent.expire(s.at)


class Mode(enum.Enum):
    HARVESTING = "harvesting"
    RECOVERY = "recovery"


class ActionKind(enum.Enum):
    HARVEST = "harvest"
    RECOVER = "recover"
    HOLD = "hold"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    at: int
    amount: int = 0           # bytes harvested (HARVEST) or handed back (RECOVER)
    until: Optional[int] = None
    prefetch: int = 0         # bytes to prefetch from the backing store

    def label(self) -> str:
        s = self.kind.value
        return s + "+prefetch" if self.prefetch else s


@dataclass
class HarvestState:
    limit: Optional[int]
    mode: Mode = Mode.HARVESTING
    recovery_until: Optional[int] = None
    last_decrease: Optional[int] = None
    consecutive_severe: int = 0
    hold_until: int = -1
    resume_limit: Optional[int] = None
    last_step: Optional[int] = None


def detect_severe(recent_sample: Optional[float], baseline: PerfWindow,
                  state: HarvestState, cfg: HarvesterConfig) -> bool:
    """Update the severe-drop streak and report whether it reached ``severe_epochs``."""
    if recent_sample is None or len(baseline) == 0:
        state.consecutive_severe = 0
        return False
    if is_worse(recent_sample, baseline.worst(cfg.orientation), cfg.orientation):
        state.consecutive_severe += 1
    else:
        state.consecutive_severe = 0
    return state.consecutive_severe >= cfg.severe_epochs


def step(state: HarvestState, cfg: HarvesterConfig, baseline: PerfWindow,
         recent: PerfWindow, latest: Optional[float], silo_occupancy_grew: bool,
         now: int) -> Action:
    if state.last_step is not None and now < state.last_step:
        raise InvalidArgument("step called with non-monotone time")
    state.last_step = now

    prefetch = cfg.chunk_size if detect_severe(latest, baseline, state, cfg) else 0

    if state.mode is Mode.RECOVERY:
        if now < state.recovery_until:
            return Action(ActionKind.HOLD, now, prefetch=prefetch)
        state.mode = Mode.HARVESTING
        state.limit = state.resume_limit
        state.recovery_until = None

    if len(baseline) and len(recent):
        dropped = detect_drop(p99(baseline, cfg.orientation), p99(recent, cfg.orientation),
                              cfg.p99_threshold, cfg.orientation)
    else:
        dropped = False

    if dropped:
        current = state.limit if state.limit is not None else cfg.memory_bytes
        released = min(cfg.chunk_size, cfg.memory_bytes - current)
        state.resume_limit = current + released
        state.limit = None
        state.mode = Mode.RECOVERY
        state.recovery_until = now + cfg.recovery_period
        return Action(ActionKind.RECOVER, now, amount=released,
                      until=state.recovery_until, prefetch=prefetch)

    cooling = state.last_decrease is not None and now - state.last_decrease < cfg.cooling_period
    if cooling or now < state.hold_until:
        return Action(ActionKind.HOLD, now, prefetch=prefetch)
    if silo_occupancy_grew:
        # pages just landed in the silo; their impact is unknown until they cool
        state.hold_until = now + cfg.cooling_period
        return Action(ActionKind.HOLD, now, prefetch=prefetch)
    if state.limit is None:
        state.limit = cfg.memory_bytes
    if state.limit < cfg.chunk_size:
        return Action(ActionKind.HOLD, now, prefetch=prefetch)
    state.limit -= cfg.chunk_size
    state.last_decrease = now
    return Action(ActionKind.HARVEST, now, amount=cfg.chunk_size, prefetch=prefetch)


def harvest_stats(actions: Iterable[Action], memory_bytes: int) -> dict:
    """Net bytes harvested from the application and that amount as a fraction of memory."""
    total = 0
    for a in actions:
        if a.kind is ActionKind.HARVEST:
            total += a.amount
        elif a.kind is ActionKind.RECOVER:
            total -= a.amount
    return {"total_harvested": total,
            "idle_fraction": total / memory_bytes if memory_bytes else 0.0}


@dataclass
class Harvester:
    """One producer's harvesting loop: windows, state and action history."""

    cfg: HarvesterConfig = field(default_factory=HarvesterConfig)

    def __post_init__(self):
        self.baseline = PerfWindow(self.cfg.window_size)
        self.recent = PerfWindow(self.cfg.window_size)
        self.state = HarvestState(limit=self.cfg.memory_bytes)
        self.actions: list[Action] = []
        self._latest: Optional[float] = None
        self._last_sample_at: Optional[int] = None

    def record(self, sample: PerfSample) -> None:
        if self._last_sample_at is not None and sample.at < self._last_sample_at:
            raise InvalidArgument(f"non-monotone sample time {sample.at}")
        self._last_sample_at = sample.at
        record_sample(self.baseline, self.recent, sample)
        self._latest = sample.metric

    def step(self, now: int, silo_occupancy_grew: bool = False) -> Action:
        action = step(self.state, self.cfg, self.baseline, self.recent, self._latest,
                      silo_occupancy_grew, now)
        self.actions.append(action)
        return action

    def stats(self) -> dict:
        return harvest_stats(self.actions, self.cfg.memory_bytes)

    def log_line(self, action: Action) -> str:
        limit = "" if self.state.limit is None else str(self.state.limit)
        return f"{action.at},{self.state.mode.value},{limit},{action.label()}"


ACTION_LOG_HEADER = "epoch_ms,mode,limit_bytes,action"
