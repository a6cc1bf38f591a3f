"""Random workload generators and brute-force oracles shared by the test modules."""

import random
from collections import OrderedDict
from fractions import Fraction

from memmarket.harvester import (ActionKind, Harvester, HarvesterConfig, Orientation, PerfSample,
                                 PerfWindow, p99)
from memmarket.silo import Silo, SiloConfig, Where
from memmarket.store import ProducerStore


# -- percentiles ------------------------------------------------------------

def sorted_p99(values, orientation):
    """Value such that 99% of samples are no worse: sort best-first, take rank ceil(0.99 n)."""
    best_first = sorted(values, reverse=orientation is Orientation.HIGHER_IS_BETTER)
    q = Fraction(99, 100) * len(best_first)
    rank = -(-q.numerator // q.denominator)
    return best_first[max(rank, 1) - 1]


def check_p99_window(seed):
    rng = random.Random(seed)
    orient = rng.choice(list(Orientation))
    w = PerfWindow(window_size=rng.randint(10, 500))
    live = []
    t = 0
    for _ in range(rng.randint(1, 400)):
        t += rng.randint(0, 5)
        v = rng.choice([rng.random(), float(rng.randint(0, 5))])
        w.insert(v, t)
        live.append((t, v))
        w.expire(t)
        live = [(a, x) for a, x in live if a >= t - w.window_size]
    assert sorted(w.values()) == sorted(x for _, x in live)
    return p99(w, orient) == sorted_p99([x for _, x in live], orient)


# -- harvester --------------------------------------------------------------

def drop_oracle(base, rec, thr, orient):
    b, r = sorted_p99(base, orient), sorted_p99(rec, orient)
    if b == 0:
        return r > 1e-9 if orient is Orientation.LOWER_IS_BETTER else r < -1e-9
    return r > b * (1 + thr) if orient is Orientation.LOWER_IS_BETTER else r < b * (1 - thr)


def check_harvester_sequence(seed, epochs=120):
    """Drive a harvester with random samples and check every control-loop invariant.

    Returns a list of violation strings (empty when all hold).
    """
    rng = random.Random(seed)
    orient = rng.choice(list(Orientation))
    cfg = HarvesterConfig(chunk_size=1, cooling_period=rng.randint(1, 20) * 10,
                          window_size=rng.randint(5, 80) * 10, p99_threshold=rng.choice([0.01, 0.1, 0.5]),
                          epoch=10, severe_epochs=3, recovery_period=rng.randint(1, 15) * 10,
                          orientation=orient, memory_bytes=rng.randint(5, 60))
    h = Harvester(cfg)
    errors = []
    samples = []          # (at, metric, had_page_in) ever recorded
    latest, last_at = None, None
    streak = 0
    last_harvest = None
    recovery_until = None
    bad_prob = rng.random() * 0.5
    t = 0
    for _ in range(epochs):
        for _ in range(rng.randint(0, 3)):
            t += rng.randint(0, 4)
            bad = rng.random() < bad_prob
            m = rng.choice([1.0, 2.0, 3.0, 10.0, 50.0] if bad else [1.0, 1.0, 1.2, 2.0])
            if orient is Orientation.HIGHER_IS_BETTER:
                m = 100.0 - m
            pin = rng.random() < (0.7 if bad else 0.1)
            h.record(PerfSample(t, m, pin))
            samples.append((t, m, pin))
            latest, last_at = m, t
        t += cfg.epoch
        grew = rng.random() < 0.2
        in_recovery = recovery_until is not None and t < recovery_until
        # the cutoff only moves forward, so expired samples can be forgotten
        samples = live = [(a, m, p) for a, m, p in samples if a >= last_at - cfg.window_size] if samples else []
        base = [m for _, m, p in live if not p]
        rec = [m for _, m, _ in live]

        # severe-drop streak from scratch
        if latest is None or not base:
            streak = 0
        else:
            worst = max(base) if orient is Orientation.LOWER_IS_BETTER else min(base)
            worse = latest > worst if orient is Orientation.LOWER_IS_BETTER else latest < worst
            streak = streak + 1 if worse else 0

        a = h.step(t, grew)
        if bool(a.prefetch) != (streak >= cfg.severe_epochs):
            errors.append(f"t={t}: prefetch={a.prefetch} but streak={streak}")
        if in_recovery:
            if a.kind is not ActionKind.HOLD:
                errors.append(f"t={t}: {a.kind} during recovery")
            if h.state.limit is not None:
                errors.append(f"t={t}: limit {h.state.limit} enforced during recovery")
            continue
        expect_drop = bool(base) and bool(rec) and drop_oracle(base, rec, cfg.p99_threshold, orient)
        if (a.kind is ActionKind.RECOVER) != expect_drop:
            errors.append(f"t={t}: action {a.kind} but drop oracle says {expect_drop}")
        if a.kind is ActionKind.RECOVER:
            if a.until != t + cfg.recovery_period:
                errors.append(f"t={t}: recovery until {a.until}")
            recovery_until = a.until
        if a.kind is ActionKind.HARVEST:
            if last_harvest is not None and t - last_harvest < cfg.cooling_period:
                errors.append(f"t={t}: harvest {t - last_harvest} ms after the previous one")
            last_harvest = t
        if h.state.limit is not None and not 0 <= h.state.limit <= cfg.memory_bytes:
            errors.append(f"t={t}: limit {h.state.limit} out of range")
    return errors


# -- silo -------------------------------------------------------------------

def check_silo_schedule(seed, ops=60, cooling=None):
    """Random swap-out/access/tick/prefetch schedule against a dict model.

    With ``cooling`` unset the cooling period is a small random number of
    ms; otherwise time advances in random fractions of the given period.
    """
    rng = random.Random(seed)
    if cooling is None:
        cool, unit = rng.randint(1, 50), 1
    else:
        cool, unit = cooling, max(1, cooling // rng.randint(1, 50))
    silo = Silo(SiloConfig(cooling_period=cool, page_size=1))
    entered = {}
    since = {}            # page -> time it (re)entered the silo, for pages in the silo
    disk = []             # disk pages in swap-out order
    swapped_at = {}
    last_tick = None
    now = 0
    next_id = 0
    errors = []
    for _ in range(ops):
        now += rng.randint(0, 10) * unit
        r = rng.random()
        if r < 0.35:
            silo.swap_out(next_id, now)
            entered[next_id] = now
            since[next_id] = now
            swapped_at[next_id] = (now, next_id)
            next_id += 1
        elif r < 0.7 and next_id:
            pid = rng.randrange(next_id)
            res = silo.access(pid, now)
            if pid in entered and now - entered.pop(pid) <= cool and res.where is Where.DISK:
                errors.append(f"page {pid} read from disk within the cooling period")
            if pid in since:
                if res.where is not Where.SILO:
                    errors.append(f"page {pid} within cooling served from {res.where}")
                del since[pid]
            elif pid in disk:
                if res.where is not Where.DISK:
                    errors.append(f"disk page {pid} served from {res.where}")
                disk.remove(pid)
            elif res.where is not Where.NOT_TRACKED:
                errors.append(f"untracked page {pid} served from {res.where}")
        elif r < 0.9:
            silo.tick(now)
            last_tick = now
            cold = sorted((p for p, s in since.items() if s < now - cool), key=lambda p: swapped_at[p])
            for p in cold:
                del since[p]
            disk = sorted(disk + cold, key=lambda p: swapped_at[p])
        else:
            k = rng.randint(0, 4)
            expect = disk[len(disk) - min(k, len(disk)):]
            got = silo.prefetch(k, now)
            if got != len(expect):
                errors.append(f"prefetch restored {got}, expected {len(expect)}")
            for p in expect:
                since[p] = now
                entered[p] = now
            disk = disk[:len(disk) - len(expect)]
            if {p for p in silo.pages if silo.locate(p) is Where.DISK} != set(disk):
                errors.append("prefetch restored the wrong pages")
        if not silo.conserved():
            errors.append("conservation broken")
        if silo.silo_pages != len(since) or silo.disk_pages != len(disk):
            errors.append(f"occupancy {silo.silo_pages}/{silo.disk_pages} vs model {len(since)}/{len(disk)}")
        # no page younger than the cooling period may sit on disk
        if last_tick is not None and any(silo.pages[p].silo_since >= last_tick - cool for p in disk
                                         if silo.pages[p].swapped_out_at == silo.pages[p].silo_since):
            errors.append("page written out before cooling")
    return errors


# -- store ------------------------------------------------------------------

class LruOracle:
    """Byte-bounded exact LRU: the reference for a store that samples every entry."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.d = OrderedDict()

    def size(self):
        return sum(len(k) + len(v) for k, v in self.d.items())

    def put(self, k, v):
        self.d.pop(k, None)
        self.d[k] = v
        evicted = []
        while self.size() > self.capacity:
            victim = next(iter(self.d))
            del self.d[victim]
            evicted.append(victim)
        return evicted

    def get(self, k):
        if k in self.d:
            self.d.move_to_end(k)
            return self.d[k]
        return None

    def delete(self, k):
        return self.d.pop(k, None) is not None


def check_lru_workload(seed, n_ops=200):
    rng = random.Random(seed)
    n_keys = rng.randint(1, 64)
    keys = [b"k%02d" % i for i in range(n_keys)]
    cap = rng.randint(40, 600)
    store = ProducerStore(cap, sample_size=n_keys, seed=seed)
    oracle = LruOracle(cap)
    for t in range(n_ops):
        k = rng.choice(keys)
        r = rng.random()
        if r < 0.5:
            v = rng.randbytes(rng.randint(0, 30))
            if store.put(k, v, t) != oracle.put(k, v):
                return False
        elif r < 0.9:
            if store.get(k, t) != oracle.get(k):
                return False
        elif store.delete(k) != oracle.delete(k):
            return False
        if set(store.entries) != set(oracle.d) or store.occupancy > cap:
            return False
    return True


# -- pricing ----------------------------------------------------------------

def unimodal_case(seed, step=2000):
    """A spot point plus a strictly unimodal revenue curve peaking on the reachable price grid."""
    from memmarket.pricing import MarketObservation, SpotPricePoint, initial_price, ceiling
    rng = random.Random(seed)
    spot = SpotPricePoint(0, rng.randint(2_000_000, 20_000_000), rng.choice([4.0, 8.0, 15.25, 32.0]))
    start, cap = initial_price(spot), ceiling(spot)
    grid = [p for p in range(start % step, cap + 1, step)]
    lo = max(0, start - 90 * step)
    hi = min(cap, start + 90 * step)
    peak = rng.choice([p for p in grid if lo <= p <= hi])
    left, right = rng.uniform(1, 50), rng.uniform(1, 50)
    scale = rng.uniform(1e3, 1e6)

    def evaluate(p):
        d = (peak - p) / step
        r = scale - (left * d if d > 0 else -right * d) - 0.01 * d * d
        return MarketObservation(p, max(r, 0) / max(p, 1), int(r * 1000))

    return spot, grid, evaluate


def check_unimodal_convergence(seed, steps=100):
    """Return None when hill-climbing reaches and holds the grid argmax, else a message."""
    from memmarket.pricing import PriceEngine, PricingStrategy, StrategyKind, ceiling, grid_argmax
    spot, grid, evaluate = unimodal_case(seed)
    target = grid_argmax(evaluate, grid)
    engine = PriceEngine(PricingStrategy(StrategyKind.MAX_REVENUE), spot)
    arrived = None
    for i in range(1, 200):
        p = engine.step(evaluate)
        if p > ceiling(spot):
            return f"price {p} above ceiling"
        close = abs(p - target) <= engine.strategy.step
        if close and arrived is None:
            arrived = i
        elif not close and arrived is not None:
            return f"left the optimum at step {i}"
    if arrived is None or arrived > steps:
        return f"reached optimum at step {arrived}"
    return None


# -- placement --------------------------------------------------------------

def oracle_costs(rows, weights):
    """Min-max normalised weighted cost computed column by column in plain Python."""
    def norm(col):
        lo, hi = min(col), max(col)
        return [0.5] * len(col) if hi == lo else [(v - lo) / (hi - lo) for v in col]
    cols = list(zip(*rows))
    n = [norm(list(c)) for c in cols]
    w = weights
    # row layout: slabs, predicted GB, bandwidth, cpu, reputation, latency
    return [w.w_slabs * (1 - n[0][i]) + w.w_avail * (1 - n[1][i]) + w.w_bw * (1 - n[2][i])
            + w.w_cpu * (1 - n[3][i]) + w.w_rep * (1 - n[4][i]) + w.w_lat * n[5][i]
            for i in range(len(rows))]


def exhaustive_best(avail, costs, want):
    """Cheapest way to take ``min(want, sum(avail))`` slabs, by enumerating every split."""
    import itertools
    total = min(want, sum(avail))
    best = None
    for split in itertools.product(*[range(a + 1) for a in avail]):
        if sum(split) != total:
            continue
        c = sum(k * cost for k, cost in zip(split, costs))
        best = c if best is None else min(best, c)
    return total, (best if best is not None else 0.0)


def check_placement_instance(seed):
    """Random broker instance; returns (violations, list of (greedy_cost, optimum))."""
    from memmarket.broker import Assignment, Broker, BrokerConfig, Role
    from memmarket.units import GB, LeaseTerms, PlacementWeights
    rng = random.Random(seed)
    b = Broker(BrokerConfig(slab_size=GB, min_lease=1))
    free = {}
    pids = []
    for i in range(rng.randint(1, 5)):
        pid = b.register(Role.PRODUCER, f"p{i}", offered_slabs=rng.randint(0, 6))
        b.report_usage(pid, 0.0, 1, bw=rng.choice([0.0, 1.0, 5.0]), cpu=rng.choice([0.0, 0.5, 1.0]))
        e = b.producers[pid]
        e.leased_slab_ms = rng.randint(1, 100)
        e.honored_slab_ms = rng.randint(0, e.leased_slab_ms)
        free[pid] = rng.uniform(0, 7)
        pids.append(pid)
    cid = b.register(Role.CONSUMER, "c0")
    for pid in pids:
        b.set_latency(pid, cid, rng.choice([0.1, 0.5, 2.0]))
    b.availability_fn = lambda e, lease_ms, now: free[e.producer_id]

    used = {pid: set() for pid in pids}
    errors, ratios = [], []
    for r in range(rng.randint(1, 4)):
        want = rng.randint(1, 6)
        terms = LeaseTerms(want, 1000, rng.randint(1, want),
                           weights=PlacementWeights(*[rng.choice([0, 0.5, 1, 2]) for _ in range(5)], 1))
        # the oracle's own view of the market before the request
        rows, avail = [], []
        for pid in pids:
            e = b.producers[pid]
            a = min(int(free[pid]), e.offered_slabs) - len(used[pid])
            if a >= 1:
                rows.append((a, free[pid], e.available_bw, e.available_cpu, e.reputation,
                             e.latency_to[cid]))
                avail.append(a)
        live = [pid for pid in pids if min(int(free[pid]), b.producers[pid].offered_slabs) - len(used[pid]) >= 1]
        costs = oracle_costs(rows, terms.weights) if rows else []
        out = b.allocate(cid, terms, now=r)
        if not isinstance(out, Assignment):
            if sum(avail) >= terms.min_slabs:
                errors.append(f"request {r} queued although {sum(avail)} slabs were free")
            continue
        got = out.slabs_by_producer()
        if out.total_slabs < terms.min_slabs:
            errors.append(f"request {r} got {out.total_slabs} < min {terms.min_slabs}")
        for pid, ix in out.placements:
            for i in ix:
                if i in used[pid] or not 0 <= i < b.producers[pid].offered_slabs:
                    errors.append(f"slab {pid}:{i} double-leased or out of range")
                used[pid].add(i)
        total, opt = exhaustive_best(avail, costs, want)
        if out.total_slabs != total:
            errors.append(f"request {r} took {out.total_slabs} of {total} available")
        greedy = sum(got.get(pid, 0) * c for pid, c in zip(live, costs))
        ratios.append((greedy, opt))
        if greedy > 2 * opt + 1e-9:
            errors.append(f"request {r} cost {greedy} > 2 x optimum {opt}")
    try:
        b.check_invariants()
    except Exception as exc:   # noqa: BLE001
        errors.append(str(exc))
    return errors, ratios


# -- simulator --------------------------------------------------------------

FIXTURES = __import__("pathlib").Path(__file__).parent / "fixtures"


def run_toy_fixture(name="toy_trace.json"):
    """Run the hand-walked toy market and diff it against the expected outcome."""
    import json
    from memmarket.sim import ClusterTrace, MarketSim, SimConfig
    fx = json.loads((FIXTURES / name).read_text())
    trace = ClusterTrace.from_rows(fx["rows"])
    sim = MarketSim(trace, SimConfig(harvest=False, elastic_demand=False))
    indices = {}
    commit = sim.broker._commit

    def spy(*a, **kw):
        out = commit(*a, **kw)
        indices[str(out.lease_id)] = [i for _, ix in out.placements for i in ix]
        return out

    sim.broker._commit = spy
    leased = []
    for j in range(len(trace.times)):
        sim.step(j)
        leased.append(sim.broker.leased_slabs())
    keys = {"assign": ("event", "lease", "consumer", "at", "placements"),
            "queue": ("event", "request", "remaining", "at"),
            "bill": ("event", "lease_id", "total_slab_ms", "served_slab_ms")}
    events = [{k: e[k] for k in keys[e["event"]]} for e in sim.broker.events if e["event"] in keys]
    diffs = []
    for what, got, want in [("events", events, fx["expected_events"]),
                            ("slab indices", indices, fx["expected_slab_indices"]),
                            ("requests", sim.metrics.requests, fx["expected_requests"]),
                            ("satisfied", sim.metrics.satisfied, fx["expected_satisfied"]),
                            ("leased per tick", leased, fx["expected_leased_slabs_per_tick"])]:
        if got != want:
            diffs.append(f"{what}: got {got}, expected {want}")
    return diffs


# -- wire -------------------------------------------------------------------

def fuzz_stream(nbytes, seed):
    """Feed random bytes (with valid frames mixed in) to decoders; returns frames decoded.

    Only ProtocolError may escape the decoder; anything else propagates.
    """
    from memmarket.wire import Frame, FrameDecoder, ProtocolError, encode
    rng = random.Random(seed)
    seen, fed = 0, 0
    dec = FrameDecoder()
    while fed < nbytes:
        if rng.random() < 0.3:
            chunk = encode(Frame(rng.randrange(256), rng.randbytes(rng.randrange(64))))
        else:
            chunk = rng.randbytes(rng.randrange(1, 4096))
        fed += len(chunk)
        try:
            seen += len(dec.feed(chunk))
        except ProtocolError:
            dec = FrameDecoder()
    return seen
