"""Broker: producer ledger, greedy placement, lease lifecycle and billing.

The broker is a plain single-threaded state machine. Every call takes the
current time explicitly; the network front-end and the simulator both feed
it one command at a time, so placement is deterministic.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import secrets
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from math import floor
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .predictor import ArimaModel, AvailabilityPredictor, TimeSeries
from .pricing import PriceEngine
from .units import (GB, MIN_LEASE_DURATION, MS_PER_MINUTE, MS_PER_SECOND, SLAB_SIZE,
                    InvalidArgument, InvalidState, LeaseTerms, PlacementWeights, money_for)

log = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1


class UnknownParty(LookupError):
    pass


class Role(enum.Enum):
    PRODUCER = "producer"
    CONSUMER = "consumer"


@dataclass
class ProducerLedgerEntry:
    producer_id: int
    endpoint: str
    offered_slabs: int = 0
    token: str = ""
    history: list = field(default_factory=list)
    history_start: Optional[int] = None
    last_report: Optional[int] = None
    available_bw: float = 0.0
    available_cpu: float = 0.0
    latency_to: dict = field(default_factory=dict)
    # slab-milliseconds leased and honored, for reputation
    leased_slab_ms: int = 0
    honored_slab_ms: int = 0
    # slab index -> lease id
    slabs_in_use: dict = field(default_factory=dict)
    predictor: AvailabilityPredictor = field(default_factory=AvailabilityPredictor)

    @property
    def reputation(self) -> float:
        if self.leased_slab_ms == 0:
            return 1.0
        return self.honored_slab_ms / self.leased_slab_ms

    def series(self, step: int) -> TimeSeries:
        return TimeSeries(self.history_start or 0, step, tuple(self.history))

    def trim(self, keep: int, step: int) -> None:
        """Drop reports older than the newest ``keep``; the predictor never looks further back."""
        extra = len(self.history) - keep
        if extra > 0:
            del self.history[:extra]
            self.history_start += extra * step


@dataclass
class ConsumerEntry:
    consumer_id: int
    endpoint: str


@dataclass(frozen=True)
class Candidate:
    producer_id: int
    slabs: int
    predicted_gb: float
    bw: float
    cpu: float
    latency: float
    reputation: float


def _norm(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.full(len(values), 0.5)
    return (values - lo) / (hi - lo)


def placement_costs(cands: Sequence[Candidate], weights: PlacementWeights) -> list[float]:
    """Weighted placement cost per candidate; lower is better.

    Goodness metrics contribute ``1 - norm(g)``, latency contributes
    ``norm(latency)``, with min-max normalisation over ``cands``.
    """
    if not cands:
        return []
    cols = np.array([[c.slabs, c.predicted_gb, c.bw, c.cpu, c.reputation, c.latency]
                     for c in cands], dtype=float)
    w = weights
    cost = (w.w_slabs * (1 - _norm(cols[:, 0])) + w.w_avail * (1 - _norm(cols[:, 1]))
            + w.w_bw * (1 - _norm(cols[:, 2])) + w.w_cpu * (1 - _norm(cols[:, 3]))
            + w.w_rep * (1 - _norm(cols[:, 4])) + w.w_lat * _norm(cols[:, 5]))
    return [float(x) for x in cost]


@dataclass(frozen=True)
class Assignment:
    lease_id: int
    consumer_id: int
    placements: tuple  # ((producer_id, (slab_index, ...)), ...)
    start: int
    end: int
    unit_price: int
    request_id: int = 0

    @property
    def total_slabs(self) -> int:
        return sum(len(ix) for _, ix in self.placements)

    def slabs_by_producer(self) -> dict[int, int]:
        return {pid: len(ix) for pid, ix in self.placements}


@dataclass(frozen=True)
class Queued:
    request_id: int
    remaining_slabs: int


@dataclass
class PendingRequest:
    request_id: int
    consumer_id: int
    terms: LeaseTerms
    remaining_slabs: int
    min_slabs: int
    enqueued_at: int
    timeout: int

    @property
    def deadline(self) -> int:
        return self.enqueued_at + self.timeout


@dataclass
class Lease:
    lease_id: int
    consumer_id: int
    holdings: dict  # producer_id -> list of slab indices currently held
    initial: dict   # producer_id -> slab count at period start
    start: int
    end: int
    unit_price: int
    terms: LeaseTerms
    request_id: int = 0
    token: str = ""
    evictions: list = field(default_factory=list)  # (producer_id, slabs, at)

    @property
    def duration(self) -> int:
        return self.end - self.start

    @property
    def held_slabs(self) -> int:
        return sum(len(v) for v in self.holdings.values())

    def assignment(self) -> Assignment:
        return Assignment(self.lease_id, self.consumer_id,
                          tuple((pid, tuple(ix)) for pid, ix in sorted(self.holdings.items())),
                          self.start, self.end, self.unit_price, self.request_id)


@dataclass(frozen=True)
class Bill:
    lease_id: int
    consumer_id: int
    unit_price: int
    start: int
    end: int
    total_slab_ms: int
    served_slab_ms: int
    full: int
    charge: int
    unserved: int
    rebate: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def bill_lease(lease: Lease, slab_size: int = SLAB_SIZE, rebate_rate: Fraction = Fraction(1),
               price: Optional[int] = None) -> Bill:
    """Charge only for slab-time actually served and rebate the evicted remainder.

    ``full`` prices every slab for the whole period; ``unserved`` is defined
    as ``full - charge`` so the two always add back up exactly.
    """
    price = lease.unit_price if price is None else price
    total = sum(lease.initial.values()) * lease.duration
    evicted = sum(n * (lease.end - at) for _, n, at in lease.evictions)
    served = total - evicted
    full = money_for(price, slab_size, total)
    charge = money_for(price, slab_size, served)
    unserved = full - charge
    rebate = floor(Fraction(rebate_rate) * unserved)
    return Bill(lease.lease_id, lease.consumer_id, price, lease.start, lease.end,
                total, served, full, charge, unserved, rebate)


@dataclass(frozen=True)
class BrokerConfig:
    slab_size: int = SLAB_SIZE
    queue_timeout: int = 10 * MS_PER_MINUTE
    rebate_rate: Fraction = Fraction(1)
    renew_grace: int = 60 * MS_PER_SECOND
    report_step: int = 5 * MS_PER_MINUTE
    min_lease: int = MIN_LEASE_DURATION
    registration_token: Optional[str] = None
    fixed_price: int = 0


Outcome = Union[Assignment, Queued]


class Broker:
    def __init__(self, config: BrokerConfig = BrokerConfig(),
                 pricing: Optional[PriceEngine] = None,
                 predictor_factory: Callable[[], AvailabilityPredictor] = AvailabilityPredictor):
        self.cfg = config
        self.pricing = pricing
        self.predictor_factory = predictor_factory
        self.producers: dict[int, ProducerLedgerEntry] = {}
        self.consumers: dict[int, ConsumerEntry] = {}
        self.leases: dict[int, Lease] = {}
        self.queue: deque[PendingRequest] = deque()
        self.bills: list[Bill] = []
        self.events: list[dict] = []
        self._next = {"producer": 1, "consumer": 1, "lease": 1, "request": 1}
        # optional override: (entry, lease_ms, now) -> predicted minimum free GB
        self.availability_fn: Optional[Callable[[ProducerLedgerEntry, int, int], float]] = None
        self._pred_cache: dict = {}

    def _new_id(self, kind: str) -> int:
        n = self._next[kind]
        self._next[kind] = n + 1
        return n

    # -- registration -------------------------------------------------------

    def _check_token(self, token: Optional[str]) -> None:
        if self.cfg.registration_token is not None and token != self.cfg.registration_token:
            raise InvalidArgument("bad registration token")

    def register(self, role: Role, endpoint: str, token: Optional[str] = None,
                 offered_slabs: int = 0) -> int:
        self._check_token(token)
        if not endpoint or not isinstance(endpoint, str):
            raise InvalidArgument("endpoint must be a non-empty string")
        table = self.producers if role is Role.PRODUCER else self.consumers
        if any(e.endpoint == endpoint for e in table.values()):
            raise InvalidArgument(f"endpoint {endpoint} already registered")
        pid = self._new_id(role.value)
        if role is Role.PRODUCER:
            if offered_slabs < 0:
                raise InvalidArgument("negative slab offer")
            self.producers[pid] = ProducerLedgerEntry(pid, endpoint, offered_slabs,
                                                      secrets.token_hex(8),
                                                      predictor=self.predictor_factory())
        else:
            self.consumers[pid] = ConsumerEntry(pid, endpoint)
        self.events.append({"event": "register", "role": role.value, "id": pid})
        return pid

    def deregister(self, role: Role, party_id: int, now: int) -> None:
        if role is Role.CONSUMER:
            if self.consumers.pop(party_id, None) is None:
                raise UnknownParty(f"consumer {party_id}")
            return
        entry = self.producer(party_id)
        # leaving early counts as evicting every slab still leased out
        for lid in sorted(set(entry.slabs_in_use.values())):
            lease = self.leases[lid]
            n = len(lease.holdings.get(party_id, []))
            if n:
                self.record_eviction(lid, party_id, n, now)
        del self.producers[party_id]
        self.events.append({"event": "deregister", "role": "producer", "id": party_id})

    def producer(self, pid: int) -> ProducerLedgerEntry:
        try:
            return self.producers[pid]
        except KeyError:
            raise UnknownParty(f"producer {pid}") from None

    def set_offer(self, pid: int, slabs: int) -> None:
        if slabs < 0:
            raise InvalidArgument("negative slab offer")
        self.producer(pid).offered_slabs = slabs

    def set_latency(self, pid: int, consumer_id: int, latency_ms: float) -> None:
        self.producer(pid).latency_to[consumer_id] = latency_ms

    # -- usage and availability ---------------------------------------------

    def report_usage(self, pid: int, free_gb: float, at: int, bw: float = 0.0,
                     cpu: float = 0.0) -> None:
        e = self.producer(pid)
        if e.last_report is not None and at <= e.last_report:
            raise InvalidArgument(f"non-monotone report time {at}")
        if not np.isfinite(free_gb) or free_gb < 0:
            raise InvalidArgument("free memory must be finite and non-negative")
        if e.history_start is None:
            e.history_start = at
        e.history.append(float(free_gb))
        e.trim(e.predictor.fit_window // self.cfg.report_step + 1, self.cfg.report_step)
        e.last_report = at
        e.available_bw = bw
        e.available_cpu = cpu
        if len(e.history) > 1 and self.availability_fn is None:
            e.predictor.maybe_retune(e.series(self.cfg.report_step), at)

    def predicted_free_gb(self, e: ProducerLedgerEntry, lease_ms: int, now: int) -> float:
        if self.availability_fn is not None:
            return self.availability_fn(e, lease_ms, now)
        if not e.history:
            return 0.0
        steps = max(1, -(-lease_ms // self.cfg.report_step))
        key = (e.producer_id, e.last_report, len(e.history), steps, e.predictor.last_tune)
        got = self._pred_cache.get(key)
        if got is None:
            got = e.predictor.predict_min_free(e.series(self.cfg.report_step), lease_ms, now)
            self._pred_cache[key] = got
        return got

    def available_slabs(self, pid: int, lease_ms: int, now: int) -> int:
        e = self.producer(pid)
        gb = self.predicted_free_gb(e, lease_ms, now)
        cap = min(int(gb * GB) // self.cfg.slab_size, e.offered_slabs)
        return max(0, cap - len(e.slabs_in_use))

    def current_price(self) -> int:
        return self.pricing.quote() if self.pricing is not None else self.cfg.fixed_price

    # -- placement ------------------------------------------------------------

    def candidates(self, consumer_id: int, terms: LeaseTerms, now: int) -> list[Candidate]:
        price = self.current_price()
        if terms.max_unit_price is not None and price > terms.max_unit_price:
            return []
        out = []
        for pid in sorted(self.producers):
            e = self.producers[pid]
            lat = e.latency_to.get(consumer_id, 0.0)
            if terms.latency_bound is not None and lat > terms.latency_bound:
                continue
            n = self.available_slabs(pid, terms.duration, now)
            if n < 1:
                continue
            out.append(Candidate(pid, n, self.predicted_free_gb(e, terms.duration, now),
                                 e.available_bw, e.available_cpu, lat, e.reputation))
        return out

    def plan(self, consumer_id: int, terms: LeaseTerms, want: int, now: int) -> list[tuple[int, int]]:
        """Greedy split of ``want`` slabs over candidates in ascending cost order."""
        cands = self.candidates(consumer_id, terms, now)
        costs = placement_costs(cands, terms.weights)
        order = sorted(range(len(cands)), key=lambda i: (costs[i], cands[i].producer_id))
        taken = []
        for i in order:
            if want == 0:
                break
            k = min(want, cands[i].slabs)
            taken.append((cands[i].producer_id, k))
            want -= k
        return taken

    def _commit(self, consumer_id: int, terms: LeaseTerms, plan: list[tuple[int, int]],
                now: int, request_id: int) -> Assignment:
        lid = self._new_id("lease")
        holdings, initial = {}, {}
        for pid, k in plan:
            e = self.producers[pid]
            free = [i for i in range(e.offered_slabs) if i not in e.slabs_in_use][:k]
            if len(free) < k:
                raise InvalidState(f"producer {pid} has no free slab indices")
            for i in free:
                e.slabs_in_use[i] = lid
            holdings[pid] = free
            initial[pid] = k
            e.leased_slab_ms += k * terms.duration
            e.honored_slab_ms += k * terms.duration
        lease = Lease(lid, consumer_id, holdings, initial, now, now + terms.duration,
                      self.current_price(), terms, request_id, secrets.token_hex(8))
        self.leases[lid] = lease
        a = lease.assignment()
        self.events.append({"event": "assign", "lease": lid, "consumer": consumer_id,
                            "at": now, "placements": [[p, len(ix)] for p, ix in a.placements]})
        return a

    def allocate(self, consumer_id: int, terms: LeaseTerms, now: int) -> Outcome:
        terms.validate(self.cfg.min_lease)
        if consumer_id not in self.consumers:
            raise UnknownParty(f"consumer {consumer_id}")
        rid = self._new_id("request")
        plan = self.plan(consumer_id, terms, terms.slabs, now)
        got = sum(k for _, k in plan)
        if got < terms.min_slabs:
            self.queue.append(PendingRequest(rid, consumer_id, terms, terms.slabs,
                                             terms.min_slabs, now, self.cfg.queue_timeout))
            self.events.append({"event": "queue", "request": rid, "remaining": terms.slabs, "at": now})
            return Queued(rid, terms.slabs)
        a = self._commit(consumer_id, terms, plan, now, rid)
        if got < terms.slabs:
            self.queue.append(PendingRequest(rid, consumer_id, terms, terms.slabs - got, 1,
                                             now, self.cfg.queue_timeout))
            self.events.append({"event": "queue", "request": rid, "remaining": terms.slabs - got,
                                "at": now})
        return a

    def tick_queue(self, now: int) -> list[Assignment]:
        """Retry pending requests in FIFO order; later ones may go ahead of stuck ones."""
        out = []
        keep: deque[PendingRequest] = deque()
        while self.queue:
            req = self.queue.popleft()
            if now >= req.deadline or req.consumer_id not in self.consumers:
                self.events.append({"event": "drop", "request": req.request_id, "at": now})
                continue
            plan = self.plan(req.consumer_id, req.terms, req.remaining_slabs, now)
            got = sum(k for _, k in plan)
            if got >= req.min_slabs and got > 0:
                out.append(self._commit(req.consumer_id, req.terms, plan, now, req.request_id))
                req.remaining_slabs -= got
                req.min_slabs = 1
            if req.remaining_slabs > 0:
                keep.append(req)
        self.queue = keep
        return out

    # -- lease lifecycle ----------------------------------------------------

    def lease(self, lease_id: int) -> Lease:
        try:
            return self.leases[lease_id]
        except KeyError:
            raise UnknownParty(f"lease {lease_id}") from None

    def record_eviction(self, lease_id: int, producer_id: int, slabs: int, at: int) -> int:
        """Producer took ``slabs`` back early; returns how many were actually released."""
        lease = self.lease(lease_id)
        held = lease.holdings.get(producer_id, [])
        n = min(slabs, len(held))
        if n <= 0:
            return 0
        at = min(max(at, lease.start), lease.end)
        e = self.producers.get(producer_id)
        for _ in range(n):
            idx = held.pop()
            if e is not None:
                e.slabs_in_use.pop(idx, None)
        if e is not None:
            e.honored_slab_ms -= n * (lease.end - at)
        lease.evictions.append((producer_id, n, at))
        self.events.append({"event": "evict", "lease": lease_id, "producer": producer_id,
                            "slabs": n, "at": at})
        return n

    def _release(self, lease: Lease) -> None:
        for pid, ix in lease.holdings.items():
            e = self.producers.get(pid)
            if e is None:
                continue
            for i in ix:
                e.slabs_in_use.pop(i, None)

    def _close_period(self, lease: Lease) -> Bill:
        b = bill_lease(lease, self.cfg.slab_size, self.cfg.rebate_rate)
        self.bills.append(b)
        self.events.append({"event": "bill", **b.as_dict()})
        return b

    def expire_leases(self, now: int) -> list[Bill]:
        out = []
        for lid in sorted(self.leases):
            lease = self.leases[lid]
            if lease.end <= now:
                out.append(self._close_period(lease))
                self._release(lease)
                del self.leases[lid]
        return out

    def renew(self, lease_id: int, now: int) -> Optional[Assignment]:
        """Extend a lease at the current price; None means it expired instead."""
        lease = self.lease(lease_id)
        if not lease.end - self.cfg.renew_grace <= now <= lease.end:
            raise InvalidState(f"lease {lease_id} is outside its renewal window")
        ok = lease.held_slabs > 0
        for pid, ix in lease.holdings.items():
            if not ix:
                continue
            if pid not in self.producers:
                ok = False
                break
            e = self.producers[pid]
            gb = self.predicted_free_gb(e, lease.terms.duration, now)
            if min(int(gb * GB) // self.cfg.slab_size, e.offered_slabs) < len(e.slabs_in_use):
                ok = False
                break
        self._close_period(lease)
        if not ok:
            self._release(lease)
            del self.leases[lease_id]
            self.events.append({"event": "renew_failed", "lease": lease_id, "at": now})
            return None
        lease.holdings = {p: ix for p, ix in lease.holdings.items() if ix}
        lease.initial = {p: len(ix) for p, ix in lease.holdings.items()}
        lease.start = lease.end
        lease.end = lease.start + lease.terms.duration
        lease.unit_price = self.current_price()
        lease.evictions = []
        for pid, k in lease.initial.items():
            e = self.producers[pid]
            e.leased_slab_ms += k * lease.duration
            e.honored_slab_ms += k * lease.duration
        self.events.append({"event": "renew", "lease": lease_id, "at": now,
                            "end": lease.end, "price": lease.unit_price})
        return lease.assignment()

    def tick(self, now: int) -> tuple[list[Bill], list[Assignment]]:
        bills = self.expire_leases(now)
        return bills, self.tick_queue(now)

    def leased_slabs(self) -> int:
        return sum(len(e.slabs_in_use) for e in self.producers.values())

    def check_invariants(self) -> None:
        seen = set()
        for lease in self.leases.values():
            for pid, ix in lease.holdings.items():
                for i in ix:
                    if (pid, i) in seen:
                        raise InvalidState(f"slab {pid}:{i} leased twice")
                    seen.add((pid, i))
                    e = self.producers.get(pid)
                    if e is not None and e.slabs_in_use.get(i) != lease.lease_id:
                        raise InvalidState(f"ledger disagrees on slab {pid}:{i}")
        for e in self.producers.values():
            if not 0.0 <= e.reputation <= 1.0:
                raise InvalidState(f"reputation out of range for producer {e.producer_id}")

    # -- persistence -----------------------------------------------------------

    def snapshot(self, now: Optional[int] = None) -> dict:
        def terms_dict(t: LeaseTerms) -> dict:
            return {"slabs": t.slabs, "duration": t.duration, "min_slabs": t.min_slabs,
                    "max_unit_price": t.max_unit_price, "weights": list(t.weights.as_tuple()),
                    "bandwidth_limit": t.bandwidth_limit, "latency_bound": t.latency_bound}

        return {
            "version": SNAPSHOT_VERSION,
            "now": now,
            "price": self.current_price(),
            "next_ids": dict(self._next),
            "producers": [{
                "id": e.producer_id, "endpoint": e.endpoint, "offered_slabs": e.offered_slabs,
                "token": e.token, "history_start": e.history_start, "history": e.history,
                "last_report": e.last_report, "bw": e.available_bw, "cpu": e.available_cpu,
                "latency_to": {str(k): v for k, v in e.latency_to.items()},
                "leased_slab_ms": e.leased_slab_ms, "honored_slab_ms": e.honored_slab_ms,
                "reputation": e.reputation,
                "model": json.loads(e.predictor.model.to_json()) if e.predictor.model else None,
                "last_tune": e.predictor.last_tune,
            } for e in self.producers.values()],
            "consumers": [{"id": c.consumer_id, "endpoint": c.endpoint}
                          for c in self.consumers.values()],
            "leases": [{
                "id": l.lease_id, "consumer": l.consumer_id, "start": l.start, "end": l.end,
                "unit_price": l.unit_price, "request": l.request_id, "token": l.token,
                "holdings": {str(p): ix for p, ix in l.holdings.items()},
                "initial": {str(p): n for p, n in l.initial.items()},
                "evictions": [list(ev) for ev in l.evictions], "terms": terms_dict(l.terms),
            } for l in self.leases.values()],
            "pending": [{
                "request": r.request_id, "consumer": r.consumer_id, "terms": terms_dict(r.terms),
                "remaining": r.remaining_slabs, "min_slabs": r.min_slabs,
                "enqueued_at": r.enqueued_at, "timeout": r.timeout,
            } for r in self.queue],
            "bills": [b.as_dict() for b in self.bills],
        }

    def save(self, path, now: Optional[int] = None) -> None:
        """Write the snapshot atomically (write to a temp file, then rename)."""
        tmp = f"{path}.tmp"
        with open(tmp, "w") as fh:
            json.dump(self.snapshot(now), fh, indent=1, sort_keys=True)
        os.replace(tmp, path)

    @classmethod
    def restore(cls, snap: dict, config: BrokerConfig = BrokerConfig(),
                pricing: Optional[PriceEngine] = None) -> "Broker":
        if snap.get("version") != SNAPSHOT_VERSION:
            raise InvalidArgument(f"unsupported snapshot version {snap.get('version')}")

        def terms_of(d: dict) -> LeaseTerms:
            return LeaseTerms(d["slabs"], d["duration"], d["min_slabs"], d["max_unit_price"],
                              PlacementWeights(*d["weights"]), d["bandwidth_limit"],
                              d["latency_bound"])

        b = cls(config, pricing)
        b._next = {k: int(v) for k, v in snap["next_ids"].items()}
        for p in snap["producers"]:
            pred = b.predictor_factory()
            if p["model"] is not None:
                pred.model = ArimaModel.from_json(json.dumps(p["model"]))
            pred.last_tune = p["last_tune"]
            b.producers[p["id"]] = ProducerLedgerEntry(
                p["id"], p["endpoint"], p["offered_slabs"], p["token"], list(p["history"]),
                p["history_start"], p["last_report"], p["bw"], p["cpu"],
                {int(k): v for k, v in p["latency_to"].items()},
                p["leased_slab_ms"], p["honored_slab_ms"], {}, pred)
        for c in snap["consumers"]:
            b.consumers[c["id"]] = ConsumerEntry(c["id"], c["endpoint"])
        for d in snap["leases"]:
            lease = Lease(d["id"], d["consumer"], {int(k): list(v) for k, v in d["holdings"].items()},
                          {int(k): v for k, v in d["initial"].items()}, d["start"], d["end"],
                          d["unit_price"], terms_of(d["terms"]), d["request"], d["token"],
                          [tuple(ev) for ev in d["evictions"]])
            b.leases[lease.lease_id] = lease
            for pid, ix in lease.holdings.items():
                if pid in b.producers:
                    for i in ix:
                        b.producers[pid].slabs_in_use[i] = lease.lease_id
        for r in snap["pending"]:
            b.queue.append(PendingRequest(r["request"], r["consumer"], terms_of(r["terms"]),
                                          r["remaining"], r["min_slabs"], r["enqueued_at"],
                                          r["timeout"]))
        b.bills = [Bill(**d) for d in snap["bills"]]
        return b
