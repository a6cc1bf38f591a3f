"""Market price engine.

The price starts at a fraction of the spot instance price normalised per
GB-hour and then moves by at most one step per tick toward whichever of
``p - step``, ``p``, ``p + step`` scores best on the chosen objective. The
normalised spot price is a hard ceiling.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from fractions import Fraction
from math import floor
from typing import Callable, Iterable, Optional, Sequence

from .consumer import ConsumerProfile, purchase_decision
from .units import DEFAULT_PRICE_STEP, GB, SLAB_SIZE, InvalidArgument


@dataclass(frozen=True)
class SpotPricePoint:
    at: int
    price_per_instance_hour: int
    instance_mem_gb: float

    def __post_init__(self):
        if self.price_per_instance_hour < 0:
            raise InvalidArgument("negative spot price")


class StrategyKind(enum.Enum):
    FIXED_FRACTION = "fixed"
    MAX_REVENUE = "revenue"
    MAX_VOLUME = "volume"


@dataclass(frozen=True)
class PricingStrategy:
    kind: StrategyKind = StrategyKind.MAX_REVENUE
    fraction: Fraction = Fraction(1, 4)
    step: int = DEFAULT_PRICE_STEP

    def __post_init__(self):
        if not 0 < Fraction(self.fraction) <= 1:
            raise InvalidArgument("fraction must lie in (0, 1]")
        if self.step <= 0:
            raise InvalidArgument("price step must be positive")

    @classmethod
    def parse(cls, text: str, step: int = DEFAULT_PRICE_STEP) -> "PricingStrategy":
        """``fixed``, ``fixed:0.5``, ``revenue`` or ``volume``."""
        name, _, arg = text.partition(":")
        kind = StrategyKind(name)
        if kind is StrategyKind.FIXED_FRACTION and arg:
            return cls(kind, Fraction(arg), step)
        return cls(kind, step=step)

    @property
    def label(self) -> str:
        if self.kind is StrategyKind.FIXED_FRACTION:
            return f"fixed:{self.fraction}"
        return self.kind.value


@dataclass(frozen=True)
class MarketObservation:
    price: int
    matched_gb_hours: float
    revenue: int

    @classmethod
    def at(cls, price: int, matched_gb_hours: float) -> "MarketObservation":
        return cls(price, matched_gb_hours, floor(price * matched_gb_hours))


def _per_gb_hour(spot: SpotPricePoint, fraction: Fraction) -> int:
    if spot.instance_mem_gb <= 0:
        raise InvalidArgument("spot instance memory must be positive")
    return floor(Fraction(spot.price_per_instance_hour) * Fraction(fraction)
                 / Fraction(spot.instance_mem_gb))


def initial_price(spot: SpotPricePoint, fraction: Fraction = Fraction(1, 4)) -> int:
    return _per_gb_hour(spot, fraction)


def ceiling(spot: SpotPricePoint) -> int:
    return _per_gb_hour(spot, Fraction(1))


def clamp(price: int, cap: int) -> int:
    return max(0, min(price, cap))


def objective(obs: MarketObservation, kind: StrategyKind) -> float:
    if kind is StrategyKind.MAX_VOLUME:
        return obs.matched_gb_hours
    return obs.revenue


def candidates(current: int, step: int, cap: int) -> list[int]:
    return sorted({clamp(current - step, cap), clamp(current, cap), clamp(current + step, cap)})


def step_price(current: int, evaluate: Callable[[int], MarketObservation],
               strategy: PricingStrategy, spot: SpotPricePoint) -> int:
    """Next market price; ties go to the lower candidate."""
    cap = ceiling(spot)
    if strategy.kind is StrategyKind.FIXED_FRACTION:
        return clamp(_per_gb_hour(spot, strategy.fraction), cap)
    best, best_val = None, None
    for p in candidates(current, strategy.step, cap):
        val = objective(evaluate(p), strategy.kind)
        if best_val is None or val > best_val:
            best, best_val = p, val
    return best


def consumer_demand(population: Iterable[ConsumerProfile], price: float,
                    increment_gb: float = SLAB_SIZE / GB) -> float:
    return sum(purchase_decision(c, price, increment_gb) for c in population)


def supply_limited_evaluator(demand: Callable[[float], float], supply_gb: float,
                             hours: float = 1.0) -> Callable[[int], MarketObservation]:
    """Observation at a price when matched volume is ``min(demand, supply)``."""
    def evaluate(price: int) -> MarketObservation:
        return MarketObservation.at(price, min(float(demand(price)), supply_gb) * hours)
    return evaluate


def grid_argmax(evaluate: Callable[[int], MarketObservation], grid: Sequence[int],
                kind: StrategyKind = StrategyKind.MAX_REVENUE) -> int:
    """Brute-force best price over ``grid``; ties go to the lower price."""
    best, best_val = None, None
    for p in sorted(grid):
        val = objective(evaluate(p), kind)
        if best_val is None or val > best_val:
            best, best_val = p, val
    return best


class PriceEngine:
    """The single mutable market-price cell owned by the broker loop."""

    def __init__(self, strategy: PricingStrategy, spot: SpotPricePoint,
                 price: Optional[int] = None):
        self.strategy = strategy
        self.spot = spot
        self.price = initial_price(spot, strategy.fraction) if price is None else price
        self.price = clamp(self.price, ceiling(spot))
        self.history: list[int] = [self.price]
        self._probe: list[tuple[int, float]] = []
        # live mode posts an exploration candidate instead of the settled price
        self.posted: Optional[int] = None

    def update_spot(self, spot: SpotPricePoint) -> None:
        self.spot = spot
        self.price = clamp(self.price, ceiling(spot))

    def quote(self) -> int:
        p = self.price if self.posted is None else self.posted
        return clamp(p, ceiling(self.spot))

    def step(self, evaluate: Callable[[int], MarketObservation]) -> int:
        self.price = step_price(self.price, evaluate, self.strategy, self.spot)
        self.history.append(self.price)
        return self.price

    def explore_quote(self, tick: int) -> int:
        """Live mode: the candidate to post this tick (rotates through the three)."""
        if self.strategy.kind is StrategyKind.FIXED_FRACTION:
            return step_price(self.price, lambda p: MarketObservation.at(p, 0), self.strategy, self.spot)
        cands = candidates(self.price, self.strategy.step, ceiling(self.spot))
        return cands[tick % len(cands)]

    def observe(self, obs: MarketObservation) -> Optional[int]:
        """Record a realised tick; once every candidate has been seen, move the price."""
        if self.strategy.kind is StrategyKind.FIXED_FRACTION:
            self.price = step_price(self.price, None, self.strategy, self.spot)
            return self.price
        cands = candidates(self.price, self.strategy.step, ceiling(self.spot))
        self._probe.append((obs.price, objective(obs, self.strategy.kind)))
        seen = {p: v for p, v in self._probe if p in cands}
        if len(seen) < len(cands):
            return None
        best = max(cands, key=lambda p: (seen[p], -p))
        self.price = best
        self.history.append(best)
        self._probe.clear()
        return best


def load_spot_csv(path) -> list[SpotPricePoint]:
    with open(path, newline="") as fh:
        return [SpotPricePoint(int(r["timestamp_ms"]), int(r["price_micro_cents_per_hour"]),
                               float(r["mem_gb"])) for r in csv.DictReader(fh)]


def write_spot_csv(path, points: Iterable[SpotPricePoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp_ms", "price_micro_cents_per_hour", "mem_gb"])
        for pt in points:
            w.writerow([pt.at, pt.price_per_instance_hour, pt.instance_mem_gb])


def spot_at(series: Sequence[SpotPricePoint], t: int) -> SpotPricePoint:
    """Latest point at or before ``t`` (the first point if ``t`` precedes the series)."""
    lo, hi = 0, len(series)
    while lo < hi:
        mid = (lo + hi) // 2
        if series[mid].at <= t:
            lo = mid + 1
        else:
            hi = mid
    return series[max(lo - 1, 0)]
