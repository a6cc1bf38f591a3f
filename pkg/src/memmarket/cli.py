"""Command line entry points.

    memmarket broker serve   --port 7000 --state broker.json
    memmarket producer serve --broker 127.0.0.1:7000 --slabs 8
    memmarket consumer bench --broker 127.0.0.1:7000 --slabs 2 --ops 1000
    memmarket sim run|compare|oracle|trace ...

Every command accepts ``--config FILE`` with ``key = value`` lines; keys are
flag names without the leading dashes. Flags given on the command line win.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import random
import signal
import sys
import time
from fractions import Fraction
from pathlib import Path
from typing import Optional

from . import wire
from .broker import Broker, BrokerConfig
from .consumer import LeaseExpired, RateLimited, SecureKVClient, SecurityMode
from .net import (AsyncBrokerLink, BrokerClient, BrokerService, MonotonicClock, ProducerService,
                  RemoteStore, WallClock, parse_addr)
from .pricing import PriceEngine, PricingStrategy, SpotPricePoint, load_spot_csv
from .store import StoreManager
from .units import MS_PER_HOUR, SLAB_SIZE, InvalidArgument

log = logging.getLogger("memmarket")

DEFAULT_SPOT = SpotPricePoint(0, 3_500_000, 15.25)


def read_config(path) -> list[str]:
    """Turn ``key = value`` lines into ``--key value`` arguments."""
    args = []
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InvalidArgument(f"{path}:{n}: expected key = value")
        key, value = key.strip().replace("_", "-"), value.strip()
        if value.lower() in ("true", "yes", "on"):
            args.append(f"--{key}")
        elif value.lower() not in ("false", "no", "off"):
            args += [f"--{key}", value]
    return args


def _emit(line: str) -> None:
    print(line, flush=True)


# -- broker ------------------------------------------------------------------------


def _price_engine(args) -> Optional[PriceEngine]:
    if args.price is not None:
        return None
    spot = load_spot_csv(args.spot_csv)[-1] if args.spot_csv else DEFAULT_SPOT
    return PriceEngine(PricingStrategy.parse(args.strategy), spot)


def cmd_broker_serve(args) -> int:
    cfg = BrokerConfig(slab_size=args.slab_size, queue_timeout=args.queue_timeout_ms,
                       rebate_rate=Fraction(args.rebate_rate), renew_grace=args.renew_grace_ms,
                       report_step=args.report_ms, min_lease=args.min_lease_ms,
                       registration_token=args.token, fixed_price=args.price or 0)
    engine = _price_engine(args)
    if args.state and os.path.exists(args.state):
        with open(args.state) as fh:
            broker = Broker.restore(json.load(fh), cfg, engine)
        log.info("restored broker state from %s", args.state)
    else:
        broker = Broker(cfg, engine)
    svc = BrokerService(broker, WallClock(), tick_ms=args.tick_ms, state_path=args.state,
                        price_tick_ms=args.price_tick_ms)

    async def main():
        await svc.start(args.host, args.port)
        _emit(f"BROKER LISTENING {args.host}:{svc.bound_port()}")
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        await stop.wait()
        svc.tick()

    asyncio.run(main())
    return 0


# -- producer ----------------------------------------------------------------------


def cmd_producer_serve(args) -> int:
    bhost, bport = parse_addr(args.broker)
    manager = StoreManager(args.slabs, args.slab_size, sample_size=args.sample_size, seed=args.seed)
    svc = ProducerService(manager, args.endpoint or "", AsyncBrokerLink(bhost, bport),
                          MonotonicClock(), report_ms=args.report_ms, token=args.token)

    async def reclaim(reason: str):
        notices = await svc.reclaim()
        _emit("RECLAIMED " + json.dumps({"reason": reason, "notices": notices}, sort_keys=True))

    async def reclaim_later(delay_ms: int):
        while not manager.leases:
            await asyncio.sleep(0.05)
        await asyncio.sleep(delay_ms / 1000)
        await reclaim("timer")

    async def main():
        await svc.start(args.host, args.port)
        _emit(f"PRODUCER {svc.producer_id} LISTENING {svc.endpoint}")
        loop = asyncio.get_running_loop()
        stop = asyncio.Event()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        loop.add_signal_handler(signal.SIGUSR1, lambda: asyncio.ensure_future(reclaim("signal")))
        if args.reclaim_after_ms is not None:
            asyncio.ensure_future(reclaim_later(args.reclaim_after_ms))
        await stop.wait()

    asyncio.run(main())
    return 0


# -- consumer ----------------------------------------------------------------------


def _retrying(fn, *a, attempts: int = 50):
    for _ in range(attempts):
        try:
            return fn(*a)
        except RateLimited as exc:
            time.sleep(max(exc.retry_after_ms, 1) / 1000)
    raise RateLimited(0)


def cmd_consumer_bench(args) -> int:
    host, port = parse_addr(args.broker)
    broker = BrokerClient(host, port)
    cid = broker.register_consumer(args.endpoint or f"bench-{os.getpid()}", args.token)
    a = broker.request(cid, args.slabs, args.duration_ms, min_slabs=args.min_slabs,
                       wait_s=args.wait_s)
    got_at = time.monotonic()
    mode = SecurityMode(args.mode)
    # full mode stores under 8-byte substitute keys; the others send the caller's keys
    key_mode = wire.KeyMode.FIXED if mode is SecurityMode.FULL else wire.KeyMode.PREFIXED
    stores = [RemoteStore(*parse_addr(p["endpoint"]), a["lease_id"], a["token"], key_mode)
              for p in a["producers"]]
    client = SecureKVClient(stores, mode=mode)
    rng = random.Random(args.seed)
    ref = {}
    t0 = time.perf_counter()
    for i in range(args.ops):
        key = f"key-{i:08d}".encode()
        value = rng.randbytes(args.value_size)
        _retrying(client.put, key, value)
        ref[key] = value
    t_put = time.perf_counter() - t0
    mismatches = 0
    t0 = time.perf_counter()
    for key, value in ref.items():
        if _retrying(client.get, key) != value:
            mismatches += 1
    t_get = time.perf_counter() - t0
    summary = {
        "consumer_id": cid, "lease_id": a["lease_id"], "price": a["price"],
        "slabs": sum(p["slabs"] for p in a["producers"]),
        "producers": [p["endpoint"] for p in a["producers"]],
        "ops": args.ops, "mismatches": mismatches, "integrity_failures": client.integrity_failures,
        "put_ms": round(t_put * 1000, 3), "get_ms": round(t_get * 1000, 3), "mode": args.mode,
    }
    _emit(("VERIFIED " if mismatches == 0 else "MISMATCH ") + json.dumps(
        {"ops": args.ops, "mismatches": mismatches, "lease_id": a["lease_id"]}))

    if args.wait_expiry:
        left = a["expires_in_ms"] / 1000 - (time.monotonic() - got_at)
        time.sleep(max(0.0, left) + args.expiry_slack_ms / 1000)
        expired = 0
        for s in stores:
            try:
                s.get(bytes(8))
            except LeaseExpired:
                expired += 1
        summary["lease_expired"] = expired == len(stores)
        _emit("LEASE_EXPIRED" if summary["lease_expired"] else "LEASE_STILL_ACTIVE")
    for s in stores:
        s.close()
    broker.close()
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=2, sort_keys=True))
    _emit(json.dumps(summary, sort_keys=True))
    return 0 if mismatches == 0 else 1


# -- simulation ----------------------------------------------------------------------


def _sim_config(args):
    from .sim import SimConfig
    return SimConfig(seed=args.seed, consumer_capacity_gb=args.consumer_capacity_gb,
                     strategy=PricingStrategy.parse(args.strategy), spot_series=args.spot_csv,
                     mrc_dir=args.mrc_dir, unit_gb=args.unit_gb, harvest=not args.no_harvest)


def _sim_trace(args):
    from .sim import ClusterTrace, synthetic_trace
    if args.trace:
        return ClusterTrace.load_csv(args.trace, args.unit_gb)
    return synthetic_trace(args.producers, args.consumers, args.idle, args.hours, seed=args.seed,
                           consumer_capacity_gb=args.consumer_capacity_gb)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_sim_run(args) -> int:
    from .sim import run, write_manifest
    cfg = _sim_config(args)
    trace = _sim_trace(args)
    out = _out_dir(args)
    metrics = run(trace, cfg)
    metrics.to_csv(out / "metrics.csv")
    summary = metrics.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    write_manifest(out / "manifest.json", cfg, {"metrics": "metrics.csv", "summary": "summary.json"},
                   {"trace": args.trace or "synthetic"})
    _emit(json.dumps(summary, sort_keys=True))
    return 0


def cmd_sim_compare(args) -> int:
    from .sim import compare_strategies, write_manifest
    cfg = _sim_config(args)
    trace = _sim_trace(args)
    out = _out_dir(args)
    strategies = [PricingStrategy.parse(s) for s in args.strategies.split(",")]
    results = compare_strategies(trace, strategies, cfg, out / "compare.csv")
    summary = {label: m.summary() for label, m in results.items()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    write_manifest(out / "manifest.json", cfg, {"compare": "compare.csv", "summary": "summary.json"},
                   {"trace": args.trace or "synthetic", "strategies": list(results)})
    _emit(json.dumps(summary, sort_keys=True))
    return 0


def cmd_sim_oracle(args) -> int:
    from .sim import run, write_manifest
    cfg = _sim_config(args)
    trace = _sim_trace(args)
    out = _out_dir(args)
    m = run(trace, cfg)
    with open(out / "oracle.csv", "w") as fh:
        fh.write("tick,timestamp_ms,price,oracle_price,ceiling\n")
        for r in m.rows:
            fh.write(f"{r['tick']},{r['timestamp_ms']},{r['price']},{r['oracle_price']},{r['ceiling']}\n")
    result = {"strategy": cfg.strategy.label,
              "mean_oracle_deviation": m.summary()["mean_oracle_deviation"]}
    write_manifest(out / "manifest.json", cfg, {"oracle": "oracle.csv"}, result)
    _emit(json.dumps(result, sort_keys=True))
    return 0


def cmd_sim_trace(args) -> int:
    from .sim import synthetic_trace
    trace = synthetic_trace(args.producers, args.consumers, args.idle, args.hours, seed=args.seed,
                            consumer_capacity_gb=args.consumer_capacity_gb)
    trace.to_csv(args.out)
    _emit(f"wrote {len(trace.times)} ticks x {len(trace.machine_ids)} machines to {args.out}")
    return 0


# -- argument parsing ------------------------------------------------------------------


def _sim_args(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--trace", help="cluster trace CSV (default: synthetic diurnal trace)")
    p.add_argument("--unit-gb", type=float, default=1.0,
                   help="GB per trace memory unit, e.g. 5 for normalised traces")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hours", type=float, default=48)
    p.add_argument("--producers", type=int, default=20)
    p.add_argument("--consumers", type=int, default=50)
    p.add_argument("--idle", type=int, default=5)
    p.add_argument("--consumer-capacity-gb", type=float, default=512.0)
    p.add_argument("--strategy", default="revenue", help="revenue | volume | fixed:FRACTION")
    p.add_argument("--spot-csv")
    p.add_argument("--mrc-dir")
    p.add_argument("--no-harvest", action="store_true",
                   help="offer only unallocated memory, skip the harvester model")
    p.add_argument("--out-dir", default=out_default)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="memmarket", description=__doc__.split("\n\n")[0])
    ap.add_argument("--log-level", default="WARNING")
    top = ap.add_subparsers(dest="group", required=True)

    def cfg_arg(p):
        p.add_argument("--config", help="key = value file supplying defaults")

    broker = top.add_parser("broker").add_subparsers(dest="cmd", required=True)
    p = broker.add_parser("serve", help="run the broker")
    cfg_arg(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7000)
    p.add_argument("--state", help="snapshot file, restored at start and rewritten every tick")
    p.add_argument("--strategy", default="revenue")
    p.add_argument("--spot-csv")
    p.add_argument("--price", type=int, help="fixed unit price; disables the price engine")
    p.add_argument("--token", help="registration token required from every party")
    p.add_argument("--slab-size", type=int, default=SLAB_SIZE)
    p.add_argument("--min-lease-ms", type=int, default=1000)
    p.add_argument("--queue-timeout-ms", type=int, default=10 * 60 * 1000)
    p.add_argument("--renew-grace-ms", type=int, default=60 * 1000)
    p.add_argument("--report-ms", type=int, default=1000)
    p.add_argument("--rebate-rate", default="1")
    p.add_argument("--tick-ms", type=int, default=200)
    p.add_argument("--price-tick-ms", type=int, default=MS_PER_HOUR // 12)
    p.set_defaults(func=cmd_broker_serve)

    producer = top.add_parser("producer").add_subparsers(dest="cmd", required=True)
    p = producer.add_parser("serve", help="offer slabs and serve leased KV stores")
    cfg_arg(p)
    p.add_argument("--broker", required=True, help="host:port")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--endpoint", help="address advertised to consumers (default host:port)")
    p.add_argument("--slabs", type=int, default=8)
    p.add_argument("--slab-size", type=int, default=SLAB_SIZE)
    p.add_argument("--sample-size", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report-ms", type=int, default=500)
    p.add_argument("--token")
    p.add_argument("--reclaim-after-ms", type=int,
                   help="reclaim all stored data this long after the first lease arrives")
    p.set_defaults(func=cmd_producer_serve)

    consumer = top.add_parser("consumer").add_subparsers(dest="cmd", required=True)
    p = consumer.add_parser("bench", help="lease slabs and run verified puts and gets")
    cfg_arg(p)
    p.add_argument("--broker", required=True, help="host:port")
    p.add_argument("--endpoint")
    p.add_argument("--token")
    p.add_argument("--slabs", type=int, default=2)
    p.add_argument("--min-slabs", type=int, default=1)
    p.add_argument("--duration-ms", type=int, default=15000)
    p.add_argument("--wait-s", type=float, default=10.0)
    p.add_argument("--ops", type=int, default=1000)
    p.add_argument("--value-size", type=int, default=256)
    p.add_argument("--mode", default="full", choices=[m.value for m in SecurityMode])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--wait-expiry", action="store_true",
                   help="after the benchmark, wait for the lease to end and check it is refused")
    p.add_argument("--expiry-slack-ms", type=int, default=500)
    p.add_argument("--out", help="write the JSON summary here")
    p.set_defaults(func=cmd_consumer_bench)

    sim = top.add_parser("sim").add_subparsers(dest="cmd", required=True)
    p = sim.add_parser("run", help="simulate one pricing strategy")
    cfg_arg(p)
    _sim_args(p, "sim-out")
    p.set_defaults(func=cmd_sim_run)
    p = sim.add_parser("compare", help="simulate several strategies on one trace and seed")
    cfg_arg(p)
    _sim_args(p, "sim-compare")
    p.add_argument("--strategies", default="revenue,volume,fixed:1/4")
    p.set_defaults(func=cmd_sim_compare)
    p = sim.add_parser("oracle", help="per-tick revenue-optimal price next to the market price")
    cfg_arg(p)
    _sim_args(p, "sim-oracle")
    p.set_defaults(func=cmd_sim_oracle)
    p = sim.add_parser("trace", help="write the synthetic diurnal trace as CSV")
    cfg_arg(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hours", type=float, default=48)
    p.add_argument("--producers", type=int, default=20)
    p.add_argument("--consumers", type=int, default=50)
    p.add_argument("--idle", type=int, default=5)
    p.add_argument("--consumer-capacity-gb", type=float, default=512.0)
    p.set_defaults(func=cmd_sim_trace)
    return ap


def expand_config(argv: list[str]) -> list[str]:
    """Splice ``--config FILE`` contents in place so later explicit flags override them."""
    out, i = [], 0
    while i < len(argv):
        a = argv[i]
        if a == "--config" and i + 1 < len(argv):
            out += read_config(argv[i + 1])
            i += 2
            continue
        if a.startswith("--config="):
            out += read_config(a.split("=", 1)[1])
        else:
            out.append(a)
        i += 1
    return out


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv = expand_config(argv)
    except (OSError, InvalidArgument) as exc:
        print(f"memmarket: {exc}", file=sys.stderr)
        return 2
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InvalidArgument, ConnectionError, OSError, wire.ProtocolError) as exc:
        print(f"memmarket: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
