"""Networked broker and producer services, and blocking clients for them.

Both services run on asyncio. The broker funnels every command through one
synchronous :meth:`BrokerService.handle` call, so the event loop itself is
the serialized command stream. Producers keep one decoder per connection
and answer frames strictly in arrival order, which is what makes
pipelining safe.
"""

from __future__ import annotations

import asyncio
import logging
import socket
import threading
import time
from dataclasses import dataclass
from typing import Optional

from . import wire
from .broker import Assignment, Broker, Queued, Role, UnknownParty
from .consumer import LeaseExpired, RateLimited
from .pricing import MarketObservation, StrategyKind
from .store import StoreManager
from .units import GB, MS_PER_HOUR, MiB, InvalidArgument, InvalidState, LeaseTerms, PlacementWeights
from .wire import ErrorCode, Frame, KeyMode, Opcode

log = logging.getLogger(__name__)


class MonotonicClock:
    """Milliseconds since construction."""

    def __init__(self):
        self._t0 = time.monotonic()

    def __call__(self) -> int:
        return int((time.monotonic() - self._t0) * 1000)


class WallClock:
    """Milliseconds since the Unix epoch; survives restarts, unlike MonotonicClock."""

    def __call__(self) -> int:
        return time.time_ns() // 1_000_000


async def read_frame(reader: asyncio.StreamReader) -> Optional[Frame]:
    try:
        head = await reader.readexactly(4)
    except asyncio.IncompleteReadError:
        return None
    length = int.from_bytes(head, "big")
    if length == 0 or length - 1 > wire.MAX_PAYLOAD:
        raise wire.ProtocolError(f"bad frame length {length}")
    body = await reader.readexactly(length)
    return Frame(body[0], body[1:])


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise InvalidArgument(f"address must be host:port, got {addr!r}")
    return host, int(port)


# -- broker ----------------------------------------------------------------------


def _assign_payload(broker: Broker, a: Assignment, now: int) -> dict:
    lease = broker.leases[a.lease_id]
    return {
        "lease_id": a.lease_id, "request_id": a.request_id, "price": a.unit_price,
        "start": a.start, "end": a.end, "expires_in_ms": a.end - now, "token": lease.token,
        "bandwidth_limit": lease.terms.bandwidth_limit,
        "producers": [{"producer_id": pid, "endpoint": broker.producers[pid].endpoint,
                       "slabs": len(ix)} for pid, ix in a.placements if pid in broker.producers],
    }


class BrokerService:
    def __init__(self, broker: Broker, clock=None, tick_ms: int = 200,
                 state_path: Optional[str] = None, price_tick_ms: Optional[int] = None):
        self.broker = broker
        self.clock = clock or MonotonicClock()
        self.tick_ms = tick_ms
        self.state_path = state_path
        self.price_tick_ms = price_tick_ms
        # request id -> assignments made for it but not yet picked up
        self.delivered: dict[int, list[Assignment]] = {}
        self._price_tick = 0
        self._matched_slab_ms = 0
        self._server = None

    def _err(self, code: ErrorCode, text: str) -> Frame:
        return wire.error(code, text)

    def handle(self, frame: Frame) -> Frame:
        """Apply one control command and build its reply."""
        now = self.clock()
        b = self.broker
        try:
            op = Opcode(frame.opcode)
        except ValueError:
            return self._err(ErrorCode.UNKNOWN_OPCODE, f"opcode {frame.opcode:#04x}")
        try:
            if op is Opcode.PING:
                return Frame(Opcode.OK)
            msg = wire.json_of(frame)
            if op is Opcode.REGISTER:
                pid = b.register(Role(msg["role"]), msg["endpoint"], msg.get("token"),
                                 int(msg.get("offered_slabs", 0)))
                return wire.json_frame(Opcode.OK, {"id": pid})
            if op is Opcode.DEREGISTER:
                b.deregister(Role(msg["role"]), int(msg["id"]), now)
                return wire.json_frame(Opcode.OK, {})
            if op is Opcode.REPORT:
                pid = int(msg["id"])
                if "offered_slabs" in msg:
                    b.set_offer(pid, int(msg["offered_slabs"]))
                last = b.producer(pid).last_report
                # a second report within the same millisecond only fetches leases
                if last is None or now > last:
                    b.report_usage(pid, float(msg["free_gb"]), now, float(msg.get("bw", 0.0)),
                                   float(msg.get("cpu", 0.0)))
                return wire.json_frame(Opcode.OK, {"leases": self.producer_leases(pid, now)})
            if op is Opcode.REQUEST:
                return self._request(msg, now)
            if op is Opcode.RENEW:
                a = b.renew(int(msg["lease_id"]), now)
                if a is None:
                    return Frame(Opcode.LEASE_EXPIRED)
                return wire.json_frame(Opcode.ASSIGN, _assign_payload(b, a, now))
            if op is Opcode.EVICT_NOTICE:
                n = b.record_eviction(int(msg["lease_id"]), int(msg["producer_id"]),
                                      int(msg["slabs"]), now)
                return wire.json_frame(Opcode.OK, {"released": n})
            if op is Opcode.PRICE_QUERY:
                return wire.json_frame(Opcode.OK, {"price": b.current_price()})
            return self._err(ErrorCode.UNKNOWN_OPCODE, f"{op.name} is not a broker command")
        except UnknownParty as exc:
            return self._err(ErrorCode.UNKNOWN_PARTY, str(exc))
        except (InvalidArgument, InvalidState, KeyError, ValueError, TypeError) as exc:
            return self._err(ErrorCode.REJECTED, str(exc))
        except wire.ProtocolError as exc:
            return self._err(ErrorCode.MALFORMED, str(exc))

    def _request(self, msg: dict, now: int) -> Frame:
        b = self.broker
        if "poll" in msg:
            got = self.delivered.pop(int(msg["poll"]), [])
            if not got:
                return wire.error(ErrorCode.QUEUED, str(msg["poll"]))
            return wire.json_frame(Opcode.ASSIGN, _assign_payload(b, got[0], now))
        w = msg.get("weights")
        terms = LeaseTerms(int(msg["slabs"]), int(msg["duration_ms"]), int(msg.get("min_slabs", 1)),
                           msg.get("max_unit_price"),
                           PlacementWeights(*w) if w else PlacementWeights(),
                           int(msg.get("bandwidth_limit", 100 * MiB)), msg.get("latency_bound"))
        out = b.allocate(int(msg["consumer_id"]), terms, now)
        if isinstance(out, Queued):
            return wire.error(ErrorCode.QUEUED, str(out.request_id))
        self._matched_slab_ms += out.total_slabs * (out.end - out.start)
        return wire.json_frame(Opcode.ASSIGN, _assign_payload(b, out, now))

    def producer_leases(self, pid: int, now: int) -> list[dict]:
        out = []
        for lease in self.broker.leases.values():
            ix = lease.holdings.get(pid)
            if ix:
                out.append({"lease_id": lease.lease_id, "slabs": len(ix), "token": lease.token,
                            "expires_in_ms": lease.end - now,
                            "bandwidth_limit": lease.terms.bandwidth_limit})
        return out

    def tick(self) -> None:
        now = self.clock()
        bills, made = self.broker.tick(now)
        for a in made:
            self.delivered.setdefault(a.request_id, []).append(a)
            self._matched_slab_ms += a.total_slabs * (a.end - a.start)
        for bill in bills:
            log.info("billed lease %d: charge=%d rebate=%d", bill.lease_id, bill.charge, bill.rebate)
        if self.state_path:
            self.broker.save(self.state_path, now)

    def price_tick(self) -> None:
        eng = self.broker.pricing
        if eng is None:
            return
        gbh = self._matched_slab_ms * self.broker.cfg.slab_size / GB / MS_PER_HOUR
        eng.observe(MarketObservation.at(eng.quote(), gbh))
        self._matched_slab_ms = 0
        self._price_tick += 1
        if eng.strategy.kind is not StrategyKind.FIXED_FRACTION:
            eng.posted = eng.explore_quote(self._price_tick)

    async def _conn(self, reader, writer):
        try:
            while True:
                frame = await read_frame(reader)
                if frame is None:
                    break
                writer.write(wire.encode(self.handle(frame)))
                await writer.drain()
        except (wire.ProtocolError, ConnectionError) as exc:
            log.warning("broker connection closed: %s", exc)
        finally:
            writer.close()

    async def _ticker(self):
        last_price = self.clock()
        while True:
            await asyncio.sleep(self.tick_ms / 1000)
            self.tick()
            if self.price_tick_ms and self.clock() - last_price >= self.price_tick_ms:
                self.price_tick()
                last_price = self.clock()

    async def start(self, host: str, port: int):
        self._server = await asyncio.start_server(self._conn, host, port)
        self._tick_task = asyncio.create_task(self._ticker())
        return self._server

    def bound_port(self) -> int:
        return self._server.sockets[0].getsockname()[1]


# -- producer ---------------------------------------------------------------------


class AsyncBrokerLink:
    """One request/response control connection from a producer to the broker."""

    def __init__(self, host: str, port: int):
        self.host, self.port = host, port
        self._rw = None
        self._lock = asyncio.Lock()

    async def call(self, op: Opcode, msg: dict) -> Frame:
        async with self._lock:
            if self._rw is None:
                self._rw = await asyncio.open_connection(self.host, self.port)
            reader, writer = self._rw
            writer.write(wire.encode(wire.json_frame(op, msg)))
            await writer.drain()
            reply = await read_frame(reader)
            if reply is None:
                self._rw = None
                raise ConnectionError("broker closed the connection")
            return reply


class ProducerService:
    def __init__(self, manager: StoreManager, endpoint: str,
                 broker: Optional[AsyncBrokerLink] = None, clock=None,
                 report_ms: int = 1000, token: Optional[str] = None):
        self.manager = manager
        self.endpoint = endpoint
        self.broker = broker
        self.clock = clock or MonotonicClock()
        self.report_ms = report_ms
        self.token = token
        self.producer_id: Optional[int] = None
        self.evicted: dict[int, set] = {}
        self.notices: list[dict] = []
        self._sync_lock = asyncio.Lock()
        self._server = None

    # broker side

    async def register(self) -> int:
        reply = await self.broker.call(Opcode.REGISTER, {
            "role": "producer", "endpoint": self.endpoint, "token": self.token,
            "offered_slabs": self.manager.pool_slabs})
        if reply.opcode != Opcode.OK:
            raise ConnectionError(f"registration refused: {wire.error_of(reply)}")
        self.producer_id = wire.json_of(reply)["id"]
        await self.sync()
        return self.producer_id

    async def sync(self) -> None:
        """Report usage and pick up leases the broker has placed here."""
        if self.broker is None or self.producer_id is None:
            return
        async with self._sync_lock:
            free_gb = self.manager.pool_slabs * self.manager.slab_size / GB
            reply = await self.broker.call(Opcode.REPORT, {
                "id": self.producer_id, "free_gb": free_gb,
                "offered_slabs": self.manager.pool_slabs, "bw": 1.0, "cpu": 1.0})
            if reply.opcode != Opcode.OK:
                log.warning("report rejected: %s", wire.error_of(reply))
                return
            now = self.clock()
            for info in wire.json_of(reply)["leases"]:
                lid = info["lease_id"]
                expires = now + int(info["expires_in_ms"])
                ls = self.manager.get(lid)
                if ls is None:
                    try:
                        self.manager.spawn(lid, int(info["slabs"]), expires,
                                           rate=int(info["bandwidth_limit"]), now=now,
                                           token=info["token"])
                    except InvalidState as exc:
                        log.warning("cannot host lease %d: %s", lid, exc)
                elif ls.expires_at != expires:
                    self.manager.extend(lid, expires)

    async def reclaim(self, total_bytes: Optional[int] = None) -> list[dict]:
        """Evict stored data (all of it by default) and tell the broker about freed slabs."""
        with self.manager.lock:
            occupied = sum(ls.store.occupancy for ls in self.manager.leases.values())
            res = self.manager.reclaim(occupied if total_bytes is None else min(total_bytes, occupied))
        sent = []
        for rv in res.revocations:
            self.evicted.setdefault(rv.lease_id, set()).update(rv.evicted_keys)
            notice = {"lease_id": rv.lease_id, "producer_id": self.producer_id, "slabs": rv.slabs}
            if self.broker is not None:
                reply = await self.broker.call(Opcode.EVICT_NOTICE, notice)
                notice["ack"] = wire.json_of(reply) if reply.opcode == Opcode.OK else None
            self.notices.append(notice)
            sent.append(notice)
        return sent

    async def _reporter(self):
        while True:
            await asyncio.sleep(self.report_ms / 1000)
            try:
                await self.sync()
            except (ConnectionError, OSError) as exc:
                log.warning("report failed: %s", exc)
            self.manager.expire(self.clock())

    # consumer side

    def _serve_kv(self, lid: int, mode: KeyMode, frame: Frame) -> Frame:
        ls = self.manager.get(lid)
        now = self.clock()
        if ls is None or (ls.expires_at is not None and now >= ls.expires_at):
            return Frame(Opcode.LEASE_EXPIRED)
        if frame.opcode not in (Opcode.GET, Opcode.PUT, Opcode.DELETE, Opcode.PING):
            return wire.error(ErrorCode.UNKNOWN_OPCODE, f"opcode {frame.opcode:#04x}")
        try:
            req = wire.parse_kv(frame, mode)
        except wire.ProtocolError as exc:
            return wire.error(ErrorCode.MALFORMED, str(exc))
        if req.op is Opcode.PING:
            return Frame(Opcode.OK)
        io = len(frame.payload)
        if not ls.bucket.admit(io, now):
            wait = ls.bucket.retry_after(io, now)
            if wait is None:
                return wire.error(ErrorCode.TOO_LARGE, "request exceeds bandwidth burst")
            return wire.rate_limited(wait)
        ls.ops += 1
        gone = self.evicted.setdefault(lid, set())
        if req.op is Opcode.GET:
            v = ls.store.get(req.key, now)
            if v is not None:
                return Frame(Opcode.VALUE, v)
            return Frame(Opcode.EVICTED if req.key in gone else Opcode.NOT_FOUND)
        if req.op is Opcode.PUT:
            try:
                evicted = ls.store.put(req.key, req.value, now)
            except InvalidArgument as exc:
                return wire.error(ErrorCode.TOO_LARGE, str(exc))
            gone.discard(req.key)
            gone.update(evicted)
            return Frame(Opcode.OK)
        ls.store.delete(req.key)
        gone.discard(req.key)
        return Frame(Opcode.OK)

    async def _conn(self, reader, writer):
        try:
            first = await read_frame(reader)
            if first is None:
                return
            try:
                hs = wire.parse_handshake(first)
            except wire.ProtocolError as exc:
                writer.write(wire.encode(wire.error(ErrorCode.NOT_AUTHENTICATED, str(exc))))
                return
            ls = self.manager.get(hs.lease_id)
            if ls is None:
                await self.sync()
                ls = self.manager.get(hs.lease_id)
            if ls is None or (ls.token and hs.token.decode(errors="replace") != ls.token):
                writer.write(wire.encode(wire.error(ErrorCode.BAD_LEASE, str(hs.lease_id))))
                return
            writer.write(wire.encode(Frame(Opcode.OK)))
            await writer.drain()
            while True:
                frame = await read_frame(reader)
                if frame is None:
                    return
                with self.manager.lock:
                    reply = self._serve_kv(hs.lease_id, hs.key_mode, frame)
                writer.write(wire.encode(reply))
                await writer.drain()
                if reply.opcode == Opcode.LEASE_EXPIRED:
                    return
        except (wire.ProtocolError, ConnectionError) as exc:
            log.warning("producer connection closed: %s", exc)
        finally:
            writer.close()

    async def start(self, host: str, port: int):
        self._server = await asyncio.start_server(self._conn, host, port)
        if not self.endpoint:
            self.endpoint = f"{host}:{self.bound_port()}"
        if self.broker is not None:
            await self.register()
            self._report_task = asyncio.create_task(self._reporter())
        return self._server

    def bound_port(self) -> int:
        return self._server.sockets[0].getsockname()[1]


# -- blocking clients ---------------------------------------------------------------


class FramedSocket:
    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.decoder = wire.FrameDecoder()
        self._ready: list[Frame] = []

    def send(self, *frames: Frame) -> None:
        self.sock.sendall(b"".join(wire.encode(f) for f in frames))

    def recv(self) -> Frame:
        while not self._ready:
            data = self.sock.recv(1 << 16)
            if not data:
                raise ConnectionError("peer closed the connection")
            self._ready.extend(self.decoder.feed(data))
        return self._ready.pop(0)

    def close(self) -> None:
        self.sock.close()


class BrokerClient:
    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.conn = FramedSocket(host, port, timeout)
        self._lock = threading.Lock()

    def call(self, op: Opcode, msg: Optional[dict] = None) -> Frame:
        with self._lock:
            self.conn.send(wire.json_frame(op, msg or {}))
            return self.conn.recv()

    def register_consumer(self, endpoint: str, token: Optional[str] = None) -> int:
        reply = self.call(Opcode.REGISTER, {"role": "consumer", "endpoint": endpoint, "token": token})
        if reply.opcode != Opcode.OK:
            raise ConnectionError(f"registration refused: {wire.error_of(reply)}")
        return wire.json_of(reply)["id"]

    def request(self, consumer_id: int, slabs: int, duration_ms: int, min_slabs: int = 1,
                max_unit_price: Optional[int] = None, wait_s: float = 0.0) -> dict:
        """Lease slabs; with ``wait_s`` > 0 a queued request is polled until assigned."""
        reply = self.call(Opcode.REQUEST, {"consumer_id": consumer_id, "slabs": slabs,
                                           "duration_ms": duration_ms, "min_slabs": min_slabs,
                                           "max_unit_price": max_unit_price})
        deadline = time.monotonic() + wait_s
        while reply.opcode == Opcode.ERR:
            code, text = wire.error_of(reply)
            if code != ErrorCode.QUEUED or time.monotonic() > deadline:
                raise ConnectionError(f"request failed: {ErrorCode(code).name} {text}")
            time.sleep(0.1)
            reply = self.call(Opcode.REQUEST, {"poll": int(text)})
        return wire.json_of(reply)

    def price(self) -> int:
        return wire.json_of(self.call(Opcode.PRICE_QUERY))["price"]

    def close(self) -> None:
        self.conn.close()


class RemoteStore:
    """Blocking KV connection bound to one lease on one producer."""

    def __init__(self, host: str, port: int, lease_id: int, token: str,
                 key_mode: KeyMode = KeyMode.FIXED, timeout: float = 10.0):
        self.conn = FramedSocket(host, port, timeout)
        self.key_mode = key_mode
        self._lock = threading.Lock()
        self.conn.send(wire.handshake_frame(wire.Handshake(lease_id, key_mode, token.encode())))
        reply = self.conn.recv()
        if reply.opcode != Opcode.OK:
            raise ConnectionError(f"handshake refused: {wire.error_of(reply)}")

    @staticmethod
    def _check(reply: Frame) -> Frame:
        if reply.opcode == Opcode.RATE_LIMITED:
            raise RateLimited(wire.retry_after_of(reply))
        if reply.opcode == Opcode.LEASE_EXPIRED:
            raise LeaseExpired("lease expired")
        if reply.opcode == Opcode.ERR:
            code, text = wire.error_of(reply)
            raise ConnectionError(f"producer error {code}: {text}")
        return reply

    def _call(self, frame: Frame) -> Frame:
        with self._lock:
            self.conn.send(frame)
            return self._check(self.conn.recv())

    def put(self, key: bytes, value: bytes) -> None:
        self._call(wire.kv_frame(Opcode.PUT, key, value, self.key_mode))

    def get(self, key: bytes) -> Optional[bytes]:
        reply = self._call(wire.kv_frame(Opcode.GET, key, mode=self.key_mode))
        return reply.payload if reply.opcode == Opcode.VALUE else None

    def delete(self, key: bytes) -> None:
        self._call(wire.kv_frame(Opcode.DELETE, key, mode=self.key_mode))

    def pipeline(self, frames: list[Frame]) -> list[Frame]:
        """Send all frames at once, then collect the replies in order."""
        with self._lock:
            self.conn.send(*frames)
            return [self.conn.recv() for _ in frames]

    def close(self) -> None:
        self.conn.close()


@dataclass
class ServiceThread:
    """Runs an asyncio service on a private loop in a daemon thread (for tests and benches)."""

    loop: asyncio.AbstractEventLoop
    thread: threading.Thread

    @classmethod
    def start(cls, coro_factory) -> tuple["ServiceThread", object]:
        loop = asyncio.new_event_loop()
        ready = threading.Event()
        box = {}

        def run():
            asyncio.set_event_loop(loop)
            try:
                box["value"] = loop.run_until_complete(coro_factory())
            except Exception as exc:  # surfaced to the caller below
                box["error"] = exc
            ready.set()
            if "error" not in box:
                loop.run_forever()

        t = threading.Thread(target=run, daemon=True)
        t.start()
        ready.wait()
        if "error" in box:
            raise box["error"]
        return cls(loop, t), box["value"]

    def call(self, coro, timeout: float = 10.0):
        return asyncio.run_coroutine_threadsafe(coro, self.loop).result(timeout)

    def stop(self) -> None:
        async def drain():
            tasks = [t for t in asyncio.all_tasks() if t is not asyncio.current_task()]
            for t in tasks:
                t.cancel()
            await asyncio.gather(*tasks, return_exceptions=True)

        if self.loop.is_running():
            try:
                self.call(drain(), timeout=5)
            except (TimeoutError, RuntimeError):
                pass
            self.loop.call_soon_threadsafe(self.loop.stop)
        self.thread.join(timeout=5)
        if not self.thread.is_alive():
            self.loop.close()
