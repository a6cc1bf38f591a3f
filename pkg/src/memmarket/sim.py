"""Deterministic trace-driven market simulation.

Each tick producers run their harvester and silo against a synthetic
hot/cold page workload, report free memory to the broker, and lose leased
slabs if their real availability falls short. Consumers turn excess demand
(inelastic) and cache demand from miss-ratio curves (elastic) into slab
requests, the broker places them, and the price engine takes one step.
Everything is a pure function of (trace, config, seed).
"""

from __future__ import annotations

import csv
import json
import subprocess
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .broker import Broker, BrokerConfig, Queued, Role
from .consumer import ConsumerProfile, DemandCurve, MissRatioCurve
from .harvester import Harvester, HarvesterConfig, PerfSample
from .predictor import AvailabilityPredictor, TimeSeries
from .pricing import (MarketObservation, PriceEngine, PricingStrategy, SpotPricePoint,
                      ceiling, load_spot_csv, spot_at)
from .silo import Silo, SiloConfig
from .units import (GB, MS_PER_HOUR, MS_PER_MINUTE, GiB, InvalidArgument, LeaseTerms, money_for)

TRACE_HEADER = ["timestamp_ms", "machine_id", "mem_capacity_gb", "mem_used_gb",
                "cpu_used_frac", "bw_used_frac"]

METRIC_FIELDS = ["tick", "timestamp_ms", "price", "oracle_price", "ceiling", "trading_volume_gb",
                 "producer_revenue", "cluster_utilization", "baseline_utilization",
                 "mean_consumer_hit_ratio", "satisfied_request_fraction", "revoked_slab_fraction",
                 "supply_gb", "demand_gb"]


# -- traces -------------------------------------------------------------------------


@dataclass
class ClusterTrace:
    """Per-machine memory series on a shared tick grid.

    ``used`` is memory *demanded* by the machine's own workload and may
    exceed ``capacity``; that excess is what consumers try to lease.
    """

    times: np.ndarray            # (T,)
    machine_ids: list
    capacity: np.ndarray         # (M,)
    used: np.ndarray             # (M, T)
    cpu: np.ndarray              # (M, T)
    bw: np.ndarray               # (M, T)

    def __post_init__(self):
        if len(self.times) == 0 or len(self.machine_ids) == 0:
            raise InvalidArgument("empty trace")
        if np.any(np.diff(self.times) <= 0):
            raise InvalidArgument("trace timestamps must increase")

    @property
    def tick(self) -> int:
        return int(self.times[1] - self.times[0]) if len(self.times) > 1 else 5 * MS_PER_MINUTE

    @classmethod
    def from_rows(cls, rows: Iterable[Sequence], unit_gb: float = 1.0) -> "ClusterTrace":
        rows = [(int(r[0]), str(r[1]), float(r[2]), float(r[3]), float(r[4]), float(r[5]))
                for r in rows]
        if not rows:
            raise InvalidArgument("empty trace")
        times = sorted({r[0] for r in rows})
        ids = list(dict.fromkeys(r[1] for r in rows))   # order of first appearance
        ti = {t: i for i, t in enumerate(times)}
        mi = {m: i for i, m in enumerate(ids)}
        M, T = len(ids), len(times)
        cap = np.zeros(M)
        used, cpu, bw = np.full((M, T), np.nan), np.zeros((M, T)), np.zeros((M, T))
        last_t = {}
        for t, m, c, u, cp, b in rows:
            if m in last_t and t <= last_t[m]:
                raise InvalidArgument(f"non-monotone timestamps for machine {m}")
            last_t[m] = t
            i, j = mi[m], ti[t]
            cap[i] = c * unit_gb
            used[i, j] = u * unit_gb
            cpu[i, j], bw[i, j] = cp, b
        if np.isnan(used).any():
            raise InvalidArgument("every machine needs a row at every timestamp")
        return cls(np.asarray(times, dtype=np.int64), ids, cap, used, cpu, bw)

    @classmethod
    def load_csv(cls, path, unit_gb: float = 1.0) -> "ClusterTrace":
        """Read a trace; ``unit_gb`` rescales normalised units (e.g. 5.0 for 5 GB units)."""
        with open(path, newline="") as fh:
            r = csv.DictReader(fh)
            missing = set(TRACE_HEADER) - set(r.fieldnames or [])
            if missing:
                raise InvalidArgument(f"trace is missing columns {sorted(missing)}")
            return cls.from_rows(((d["timestamp_ms"], d["machine_id"], d["mem_capacity_gb"],
                                   d["mem_used_gb"], d["cpu_used_frac"], d["bw_used_frac"])
                                  for d in r), unit_gb)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_HEADER)
            for j, t in enumerate(self.times):
                for i, m in enumerate(self.machine_ids):
                    w.writerow([int(t), m, f"{self.capacity[i]:.6g}", f"{self.used[i, j]:.6g}",
                                f"{self.cpu[i, j]:.4g}", f"{self.bw[i, j]:.4g}"])


def synthetic_trace(n_producers: int = 20, n_consumers: int = 50, n_idle: int = 5,
                    hours: float = 48, tick: int = 5 * MS_PER_MINUTE, seed: int = 0,
                    consumer_capacity_gb: float = 512.0,
                    producer_capacities_gb: Sequence[float] = (64, 128, 256)) -> ClusterTrace:
    """Diurnal cluster: medium-pressure producers, bursty consumers, a few idle machines."""
    rng = np.random.default_rng(seed)
    T = int(hours * MS_PER_HOUR // tick)
    times = np.arange(T, dtype=np.int64) * tick
    phase_t = 2 * np.pi * times / (24 * MS_PER_HOUR)
    caps, used, ids = [], [], []

    for i in range(n_producers):
        c = float(rng.choice(producer_capacities_gb))
        lo = rng.uniform(0.45, 0.6)
        amp = rng.uniform(0.03, 0.12)
        shift = rng.uniform(0, 2 * np.pi)
        u = lo + amp * (1 + np.sin(phase_t + shift)) + rng.normal(0, 0.005, T)
        caps.append(c)
        used.append(np.clip(u, 0.4, 0.95) * c)
        ids.append(f"p{i}")

    for i in range(n_consumers):
        c = consumer_capacity_gb
        base = rng.uniform(0.9, 0.98)
        amp = rng.uniform(0.05, 0.1)
        shift = rng.uniform(-0.5, 0.5)
        u = base + amp * np.sin(phase_t + shift) + rng.normal(0, 0.01, T)
        # occasional hour-long bursts
        for _ in range(rng.poisson(2)):
            s = rng.integers(0, T)
            u[s:s + int(MS_PER_HOUR // tick)] += rng.uniform(0.05, 0.15)
        caps.append(c)
        used.append(np.maximum(u, 0.05) * c)
        ids.append(f"c{i}")

    for i in range(n_idle):
        c = float(rng.choice([32, 64]))
        caps.append(c)
        used.append(np.clip(0.1 + rng.normal(0, 0.01, T), 0.01, 0.2) * c)
        ids.append(f"i{i}")

    M = len(ids)
    return ClusterTrace(times, ids, np.asarray(caps), np.vstack(used),
                        rng.uniform(0.1, 0.6, (M, T)), rng.uniform(0.05, 0.5, (M, T)))


def classify_machines(trace: ClusterTrace, producer_floor: float = 0.4) -> tuple[list[int], list[int]]:
    """Producers never drop below ``producer_floor`` of capacity; consumers exceed it at some tick."""
    frac = trace.used / trace.capacity[:, None]
    consumers = [i for i in range(len(trace.machine_ids)) if np.any(frac[i] > 1.0)]
    cons = set(consumers)
    producers = [i for i in range(len(trace.machine_ids))
                 if i not in cons and np.min(frac[i]) >= producer_floor]
    return producers, consumers


# -- consumers' cache curves and spot prices ----------------------------------------


def synthetic_mrcs(n: int, seed: int = 0, max_gb: int = 64) -> list[MissRatioCurve]:
    rng = np.random.default_rng(seed + 7919)
    out = []
    gb = np.arange(0, max_gb + 1, dtype=float)
    for _ in range(n):
        m_inf = rng.uniform(0.02, 0.3)
        scale = rng.uniform(3, 16)
        sat = rng.uniform(0.5, 1.0) * max_gb
        mr = m_inf + (1 - m_inf) * np.exp(-np.minimum(gb, sat) / scale)
        out.append(MissRatioCurve(gb, mr))
    return out


def load_mrc_dir(path) -> list[MissRatioCurve]:
    files = sorted(Path(path).glob("*.csv"))
    if not files:
        raise InvalidArgument(f"no MRC CSV files in {path}")
    return [MissRatioCurve.from_csv(f) for f in files]


def consumer_profiles(mrcs: Sequence[MissRatioCurve], n: int, seed: int = 0) -> list[ConsumerProfile]:
    """Give each consumer a random curve and a local cache serving 80% of its best hit ratio."""
    rng = np.random.default_rng(seed + 104729)
    out = []
    for _ in range(n):
        mrc = mrcs[int(rng.integers(len(mrcs)))]
        hit = 1 - mrc.miss_ratio
        target = 0.8 * hit[-1]
        k = int(np.argmax(hit >= target))
        out.append(ConsumerProfile(mrc, int(rng.uniform(5e6, 4e7)), float(rng.uniform(1e3, 2e4)),
                                   float(mrc.cache_gb[k]), float(rng.uniform(0.5, 1.0))))
    return out


def synthetic_spot_series(times: np.ndarray, seed: int = 0, base: int = 3_500_000,
                          mem_gb: float = 15.25) -> list[SpotPricePoint]:
    """Hourly spot prices for a 15.25 GB instance with a mild daily cycle."""
    rng = np.random.default_rng(seed + 31337)
    hours = np.arange(int(times[-1] // MS_PER_HOUR) + 1)
    p = base * (1 + 0.08 * np.sin(2 * np.pi * hours / 24) + rng.normal(0, 0.02, len(hours)))
    return [SpotPricePoint(int(h * MS_PER_HOUR), int(v), mem_gb) for h, v in zip(hours, p)]


# -- configuration and metrics ------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    tick: int = 5 * MS_PER_MINUTE
    consumer_capacity_gb: float = 512.0
    min_lease: int = 10 * MS_PER_MINUTE
    producer_floor: float = 0.4
    strategy: PricingStrategy = PricingStrategy()
    spot_series: Optional[str] = None
    mrc_dir: Optional[str] = None
    n_mrcs: int = 36
    slab_size: int = GiB
    unit_gb: float = 1.0
    # harvester and silo model
    harvest: bool = True
    harvest_epoch: int = MS_PER_MINUTE
    hot_fraction: float = 0.7
    base_latency_ms: float = 1.0
    latency_noise: float = 0.002
    silo_hit_penalty: float = 0.02
    disk_hit_penalty: float = 0.5
    # market model
    market: bool = True
    elastic_demand: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.label
        return d


@dataclass
class SimMetrics:
    rows: list = field(default_factory=list)
    revoked_slabs: int = 0
    allocated_slabs: int = 0
    requests: int = 0
    satisfied: int = 0

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})

    def summary(self) -> dict:
        if not self.rows:
            return {}
        price, oracle = self.column("price"), self.column("oracle_price")
        ok = oracle > 0
        dev = float(np.mean(np.abs(price[ok] - oracle[ok]) / oracle[ok])) if ok.any() else 0.0
        return {
            "ticks": len(self.rows),
            "total_revenue": int(sum(r["producer_revenue"] for r in self.rows)),
            "mean_volume_gb": float(self.column("trading_volume_gb").mean()),
            "mean_utilization": float(self.column("cluster_utilization").mean()),
            "mean_baseline_utilization": float(self.column("baseline_utilization").mean()),
            "mean_price": float(price.mean()),
            "mean_oracle_deviation": dev,
            "satisfied_request_fraction": self.satisfied / self.requests if self.requests else 1.0,
            "revoked_slab_fraction": (self.revoked_slabs / self.allocated_slabs
                                      if self.allocated_slabs else 0.0),
            "mean_consumer_hit_ratio": float(self.column("mean_consumer_hit_ratio").mean()),
        }


# -- producer side: harvester + silo per machine ----------------------------------------------


@dataclass
class SupplyTrace:
    """What each producer could offer (GB) and how much RAM its own workload held, per tick."""

    avail_gb: np.ndarray      # (P, T)
    resident_gb: np.ndarray   # (P, T) application RSS plus silo
    harvest_log: list         # per producer: list of action labels
    predicted_gb: Optional[np.ndarray] = None   # (P, T) forecast minimum over one lease


def predict_supply(avail_gb: np.ndarray, times: np.ndarray, step: int, lease: int) -> np.ndarray:
    """Run each producer's availability predictor over its reports, as the broker would."""
    out = np.zeros_like(avail_gb)
    for k in range(avail_gb.shape[0]):
        pred = AvailabilityPredictor()
        keep = pred.fit_window // step + 1
        for j in range(avail_gb.shape[1]):
            lo = max(0, j + 1 - keep)
            hist = TimeSeries(int(times[lo]), step, tuple(float(v) for v in avail_gb[k, lo:j + 1]))
            out[k, j] = pred.predict_min_free(hist, lease, int(times[j]))
    return out


class ProducerModel:
    """One producer's harvester and silo under a hot/cold page workload.

    Pages are ``slab_size`` bytes and indexed hottest first. Pages above the
    memory limit are swapped out; touching a swapped-out hot page is a
    page-in, cheap from the silo and expensive from disk.
    """

    def __init__(self, capacity_gb: float, cfg: SimConfig, rng: np.random.Generator, start_used_gb: float):
        self.cfg = cfg
        self.page = cfg.slab_size
        self.cap_bytes = int(capacity_gb * GB)
        self.harvester = Harvester(HarvesterConfig(
            chunk_size=self.page, cooling_period=5 * MS_PER_MINUTE, window_size=6 * MS_PER_HOUR,
            epoch=cfg.harvest_epoch, memory_bytes=self.cap_bytes))
        # unallocated memory is offered immediately, so the limit starts at current usage
        self.harvester.state.limit = min(self.cap_bytes,
                                         -(-int(start_used_gb * GB) // self.page) * self.page)
        self.silo = Silo(SiloConfig(cooling_period=5 * MS_PER_MINUTE, page_size=self.page))
        self.rng = rng
        self.out: set[int] = set()

    def limit_pages(self, n_used: int) -> int:
        lim = self.harvester.state.limit
        return n_used if lim is None else lim // self.page

    def epoch(self, now: int, used_gb: float) -> None:
        cfg = self.cfg
        n_used = -(-int(used_gb * GB) // self.page)
        n_hot = -(-int(used_gb * cfg.hot_fraction * GB) // self.page)
        n_lim = self.limit_pages(n_used)
        silo_hits = disk_hits = 0
        # pages that no longer exist or fit under the limit come back (hot) or are dropped
        for i in sorted(self.out):
            if i >= n_used or (i < n_lim and i < n_hot):
                r = self.silo.access(i, now)
                self.out.discard(i)
                if i < n_used:
                    silo_hits += r.where.value == "silo"
                    disk_hits += r.where.value == "disk"
        before = self.silo.silo_bytes
        for i in range(n_lim, n_used):
            if i not in self.out:
                self.silo.swap_out(i, now)
                self.out.add(i)
        # hot pages stuck above the limit are touched and pushed straight back out
        for i in range(n_lim, min(n_hot, n_used)):
            r = self.silo.access(i, now)
            silo_hits += r.where.value == "silo"
            disk_hits += r.where.value == "disk"
            self.silo.swap_out(i, now)
        self.silo.tick(now)
        metric = cfg.base_latency_ms * (1 + self.rng.normal(0, cfg.latency_noise)
                                        + cfg.silo_hit_penalty * silo_hits
                                        + cfg.disk_hit_penalty * disk_hits)
        self.harvester.record(PerfSample(now, float(metric), silo_hits + disk_hits > 0))
        action = self.harvester.step(now, self.silo.silo_bytes > before)
        if action.prefetch:
            # prefetched pages sit in the silo; the ids stay tracked as swapped out
            self.silo.prefetch(action.prefetch, now)

    def resident_bytes(self, used_gb: float) -> int:
        used = int(used_gb * GB)
        lim = self.harvester.state.limit
        app = used if lim is None else min(used, lim)
        return min(self.cap_bytes, app + self.silo.silo_bytes + self.silo.compressed_footprint())

    def available_gb(self, used_gb: float) -> float:
        return max(0, self.cap_bytes - self.resident_bytes(used_gb)) / GB


def simulate_supply(trace: ClusterTrace, producers: Sequence[int], cfg: SimConfig) -> SupplyTrace:
    """Producer availability series; independent of market outcomes, so shared across strategies."""
    T = len(trace.times)
    avail = np.zeros((len(producers), T))
    resident = np.zeros((len(producers), T))
    logs = []
    sub = max(1, trace.tick // cfg.harvest_epoch) if cfg.harvest else 0
    for k, m in enumerate(producers):
        cap = float(trace.capacity[m])
        if not cfg.harvest:
            used = np.minimum(trace.used[m], cap)
            avail[k] = cap - used
            resident[k] = used
            logs.append([])
            continue
        model = ProducerModel(cap, cfg, np.random.default_rng([cfg.seed, k]), float(trace.used[m, 0]))
        for j, t in enumerate(trace.times):
            u = float(min(trace.used[m, j], cap))
            for s in range(sub):
                model.epoch(int(t) + s * cfg.harvest_epoch, u)
            avail[k, j] = model.available_gb(u)
            resident[k, j] = model.resident_bytes(u) / GB
        logs.append([a.label() for a in model.harvester.actions])
    return SupplyTrace(avail, resident, logs)


def _with_predictions(supply: SupplyTrace, trace: ClusterTrace, cfg: SimConfig) -> SupplyTrace:
    if supply.predicted_gb is None:
        supply.predicted_gb = predict_supply(supply.avail_gb, trace.times, trace.tick, cfg.min_lease)
    return supply


# -- the market loop -----------------------------------------------------------------------


def _price_grid(cap: int, step: int) -> np.ndarray:
    grid = np.arange(0, cap + 1, step, dtype=np.int64)
    if grid[-1] != cap:
        grid = np.append(grid, cap)
    return grid


def oracle_price(demand_gb, supply_gb: float, cap: int, step: int, hours: float) -> int:
    """Revenue-maximising price on the grid ``0, step, 2*step, ..., cap`` (ties to the lower)."""
    grid = _price_grid(cap, step)
    d = np.asarray(demand_gb(grid), dtype=float)
    rev = np.floor(grid * np.minimum(d, supply_gb) * hours)
    return int(grid[int(np.argmax(rev))])


class MarketSim:
    def __init__(self, trace: ClusterTrace, cfg: SimConfig, supply: Optional[SupplyTrace] = None):
        self.trace = trace
        self.cfg = cfg
        self.producers, self.consumers = classify_machines(trace, cfg.producer_floor)
        supply = supply if supply is not None else simulate_supply(trace, self.producers, cfg)
        self.supply = _with_predictions(supply, trace, cfg)
        if cfg.spot_series:
            self.spot = load_spot_csv(cfg.spot_series)
        else:
            self.spot = synthetic_spot_series(trace.times, cfg.seed)
        if cfg.elastic_demand and self.consumers:
            mrcs = (load_mrc_dir(cfg.mrc_dir) if cfg.mrc_dir
                    else synthetic_mrcs(cfg.n_mrcs, cfg.seed))
            self.profiles = consumer_profiles(mrcs, len(self.consumers), cfg.seed)
        else:
            self.profiles = []
        self.slab_gb = cfg.slab_size / GB
        self.thresholds = [p.thresholds(self.slab_gb) for p in self.profiles]
        self.demand_curve = DemandCurve(self.profiles, self.slab_gb)
        self.engine = PriceEngine(cfg.strategy, spot_at(self.spot, int(trace.times[0])))
        self.broker = Broker(BrokerConfig(slab_size=cfg.slab_size, report_step=trace.tick,
                                          min_lease=cfg.min_lease),
                             pricing=self.engine, predictor_factory=AvailabilityPredictor)
        self.pid = {}
        for k, m in enumerate(self.producers):
            cap_slabs = int(trace.capacity[m] * GB) // cfg.slab_size
            self.pid[k] = self.broker.register(Role.PRODUCER, trace.machine_ids[m], offered_slabs=cap_slabs)
        self.cid = {}
        for k, m in enumerate(self.consumers):
            self.cid[k] = self.broker.register(Role.CONSUMER, trace.machine_ids[m])
        # forecasts depend only on the supply series, so they are computed once and shared
        row = {pid: k for k, pid in self.pid.items()}
        pred = self.supply.predicted_gb
        col = {int(t): j for j, t in enumerate(trace.times)}
        self.broker.availability_fn = lambda e, lease_ms, now: float(pred[row[e.producer_id], col[now]])
        self.metrics = SimMetrics()
        self._satisfied: set[int] = set()

    # demand helpers

    def excess_slabs(self, j: int) -> np.ndarray:
        m = [self.consumers[k] for k in range(len(self.consumers))]
        ex = np.maximum(0.0, self.trace.used[m, j] - self.trace.capacity[m])
        return np.ceil(ex * GB / self.cfg.slab_size - 1e-9).astype(int)

    def elastic_slabs(self, price: float) -> np.ndarray:
        x = price * self.slab_gb
        return np.array([int(np.count_nonzero(t >= x)) for t in self.thresholds], dtype=int)

    def demand_gb(self, inelastic_gb: float):
        def d(price):
            if not self.cfg.market:
                return np.zeros_like(np.asarray(price, dtype=float))
            return inelastic_gb + (self.demand_curve(price) if self.cfg.elastic_demand else 0.0)
        return d

    def offered_gb(self, now: int) -> float:
        b = self.broker
        total = 0
        for e in b.producers.values():
            gb = b.predicted_free_gb(e, self.cfg.min_lease, now)
            total += min(int(gb * GB) // self.cfg.slab_size, e.offered_slabs)
        return total * self.slab_gb

    # one tick

    def _held(self) -> dict[int, int]:
        held = {}
        for lease in self.broker.leases.values():
            held[lease.consumer_id] = held.get(lease.consumer_id, 0) + lease.held_slabs
        for req in self.broker.queue:
            held[req.consumer_id] = held.get(req.consumer_id, 0) + req.remaining_slabs
        return held

    def _revoke(self, k: int, avail_gb: float, now: int) -> None:
        b = self.broker
        e = b.producers[self.pid[k]]
        allowed = int(avail_gb * GB) // self.cfg.slab_size
        excess = len(e.slabs_in_use) - allowed
        # newest leases are reclaimed first
        for lid in sorted(set(e.slabs_in_use.values()), reverse=True):
            if excess <= 0:
                break
            n = b.record_eviction(lid, e.producer_id, excess, now)
            excess -= n
            self.metrics.revoked_slabs += n

    def _note(self, assignments) -> None:
        for a in assignments:
            self.metrics.allocated_slabs += a.total_slabs
            if a.request_id not in self._satisfied:
                self._satisfied.add(a.request_id)
                self.metrics.satisfied += 1

    def step(self, j: int) -> None:
        cfg, b = self.cfg, self.broker
        now = int(self.trace.times[j])
        self.engine.update_spot(spot_at(self.spot, now))
        for k in range(len(self.producers)):
            b.report_usage(self.pid[k], float(self.supply.avail_gb[k, j]), now)
            if cfg.market:
                self._revoke(k, float(self.supply.avail_gb[k, j]), now)
        _, made = b.tick(now)
        self._note(made)

        price = b.current_price()
        excess = self.excess_slabs(j)
        elastic = self.elastic_slabs(price) if self.profiles else np.zeros(len(self.consumers), int)
        if cfg.market:
            held = self._held()
            for k in range(len(self.consumers)):
                cid = self.cid[k]
                want = int(excess[k] + elastic[k]) - held.get(cid, 0)
                if want <= 0:
                    continue
                self.metrics.requests += 1
                out = b.allocate(cid, LeaseTerms(want, cfg.min_lease, 1, None), now)
                if not isinstance(out, Queued):
                    self._note([out])

        supply = self.offered_gb(now)
        hours = cfg.tick / MS_PER_HOUR
        demand = self.demand_gb(float(excess.sum()) * self.slab_gb)
        cap = ceiling(self.engine.spot)
        p_star = oracle_price(demand, supply, cap, self.engine.strategy.step, hours)

        leased_slabs = b.leased_slabs()
        revenue = sum(money_for(l.unit_price, l.held_slabs * cfg.slab_size, cfg.tick)
                      for l in b.leases.values())
        self.metrics.rows.append(self._row(j, now, price, p_star, cap, leased_slabs, revenue,
                                           supply, float(demand(price))))

        def evaluate(p: int) -> MarketObservation:
            return MarketObservation.at(p, min(float(demand(p)), supply) * hours)

        self.engine.step(evaluate)

    def _row(self, j, now, price, p_star, cap, leased_slabs, revenue, supply, demand) -> dict:
        tr = self.trace
        leased_gb = leased_slabs * self.slab_gb
        base_used = np.minimum(tr.used[:, j], tr.capacity)
        resident = base_used.copy()
        for k, m in enumerate(self.producers):
            resident[m] = self.supply.resident_gb[k, j]
        total = float(tr.capacity.sum())
        hits = []
        held = {}
        for lease in self.broker.leases.values():
            held[lease.consumer_id] = held.get(lease.consumer_id, 0) + lease.held_slabs
        excess = self.excess_slabs(j)
        for k, prof in enumerate(self.profiles):
            cache_slabs = max(0, held.get(self.cid[k], 0) - int(excess[k]))
            hits.append(1 - float(prof.mrc(prof.current_gb + cache_slabs * self.slab_gb)))
        m = self.metrics
        return {
            "tick": j, "timestamp_ms": now, "price": int(price), "oracle_price": int(p_star),
            "ceiling": int(cap), "trading_volume_gb": leased_gb, "producer_revenue": int(revenue),
            "cluster_utilization": float((resident.sum() + leased_gb) / total),
            "baseline_utilization": float(base_used.sum() / total),
            "mean_consumer_hit_ratio": float(np.mean(hits)) if hits else 0.0,
            "satisfied_request_fraction": m.satisfied / m.requests if m.requests else 1.0,
            "revoked_slab_fraction": m.revoked_slabs / m.allocated_slabs if m.allocated_slabs else 0.0,
            "supply_gb": supply, "demand_gb": demand,
        }

    def run(self) -> SimMetrics:
        for j in range(len(self.trace.times)):
            self.step(j)
            if j % 50 == 0:
                self.broker.check_invariants()
        return self.metrics


def run(trace: ClusterTrace, cfg: SimConfig, supply: Optional[SupplyTrace] = None) -> SimMetrics:
    return MarketSim(trace, cfg, supply).run()


def compare_strategies(trace: ClusterTrace, strategies: Sequence[PricingStrategy], cfg: SimConfig,
                       out_csv=None) -> dict[str, SimMetrics]:
    """Run every strategy on the same trace and seed; optionally write a side-by-side CSV."""
    producers, _ = classify_machines(trace, cfg.producer_floor)
    supply = simulate_supply(trace, producers, cfg)
    results = {s.label: run(trace, replace(cfg, strategy=s), supply) for s in strategies}
    if out_csv is not None:
        cols = ["price", "trading_volume_gb", "producer_revenue", "cluster_utilization"]
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tick", "timestamp_ms"] + [f"{lab}:{c}" for lab in results for c in cols])
            first = next(iter(results.values()))
            for j, r0 in enumerate(first.rows):
                row = [j, r0["timestamp_ms"]]
                for met in results.values():
                    row += [met.rows[j][c] for c in cols]
                w.writerow(row)
    return results


def price_oracle(trace: ClusterTrace, cfg: SimConfig, supply: Optional[SupplyTrace] = None) -> np.ndarray:
    """Per-tick revenue-optimal price on the step grid, under the run's demand and supply model."""
    return run(trace, cfg, supply).column("oracle_price").astype(np.int64)


def git_revision(cwd=None) -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=cwd, capture_output=True,
                             text=True, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(path, cfg: SimConfig, outputs: dict, extra: Optional[dict] = None) -> dict:
    man = {"config": cfg.to_dict(), "seed": cfg.seed, "git_revision": git_revision(),
           "outputs": outputs}
    if extra:
        man.update(extra)
    with open(path, "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True, default=str)
    return man
