"""Broadcast messages and the transports that carry them.

Wire layout (little endian)::

    u8 version | u8 kind | u32 sender_id | u32 swarm_id | u64 timestamp_us
    | u8 vector_count | vector_count x 3 x f64

Two transports implement the same ``broadcast``/``drain`` surface: a seeded
in-memory bus for deterministic simulation and UDP broadcast datagrams.
"""

from __future__ import annotations

import enum
import heapq
import logging
import math
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from ._validation import check_probability
from .exceptions import BindError, InputError, MalformedFrame

logger = logging.getLogger(__name__)

VERSION = 1
MAX_FRAME = 512
MAX_VECTORS = 2
# Sender id used by the orchestrator; never assigned to an FLS.
ORCHESTRATOR_ID = 0xFFFFFFFF

_HEADER = struct.Struct("<BBIIQB")
_VEC = struct.Struct("<3d")
HEADER_SIZE = _HEADER.size  # 19


class MessageKind(enum.IntEnum):
    ANCHOR_BEACON = 1
    LOCATION_UPDATE = 2
    CORRECTION = 3
    TERMINATE = 4


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    sender_id: int
    swarm_id: int = 0
    timestamp_us: int = 0
    vectors: tuple[tuple[float, float, float], ...] = ()
    version: int = VERSION

    def __post_init__(self):
        object.__setattr__(self, "kind", MessageKind(self.kind))
        vecs = tuple(tuple(float(c) for c in v) for v in self.vectors)
        if len(vecs) > MAX_VECTORS or any(len(v) != 3 for v in vecs):
            raise InputError(f"a message carries at most {MAX_VECTORS} 3-vectors")
        object.__setattr__(self, "vectors", vecs)
        for name, bits in (("sender_id", 32), ("swarm_id", 32), ("timestamp_us", 64)):
            v = getattr(self, name)
            if not 0 <= v < 2 ** bits:
                raise InputError(f"{name} {v} does not fit in u{bits}")


def encode_message(m: Message) -> bytes:
    out = _HEADER.pack(m.version, int(m.kind), m.sender_id, m.swarm_id, m.timestamp_us,
                       len(m.vectors))
    return out + b"".join(_VEC.pack(*v) for v in m.vectors)


def decode_message(data: bytes) -> Message:
    if len(data) < HEADER_SIZE:
        raise MalformedFrame("truncated")
    version, kind, sender, swarm, ts, count = _HEADER.unpack_from(data)
    if version != VERSION:
        raise MalformedFrame("version")
    try:
        kind = MessageKind(kind)
    except ValueError:
        raise MalformedFrame("kind") from None
    if count > MAX_VECTORS:
        raise MalformedFrame("vector count")
    if len(data) != HEADER_SIZE + count * _VEC.size:
        raise MalformedFrame("truncated" if len(data) < HEADER_SIZE + count * _VEC.size
                             else "length")
    vecs = tuple(_VEC.unpack_from(data, HEADER_SIZE + k * _VEC.size) for k in range(count))
    if not all(math.isfinite(c) for v in vecs for c in v):
        raise MalformedFrame("non-finite vector")
    return Message(kind, sender, swarm, ts, vecs, version)


def peek_sender(frame: bytes) -> int | None:
    """Sender id of a frame without a full decode (None when too short)."""
    if len(frame) < HEADER_SIZE:
        return None
    return struct.unpack_from("<I", frame, 2)[0]


class Transport:
    """One FLS's view of the broadcast medium."""

    owner_id: int
    malformed: int = 0

    def broadcast(self, m: Message) -> int:
        """Send ``m`` to every peer; returns the frame size in bytes."""
        raise NotImplementedError

    def drain(self) -> list[tuple[Message, int]]:
        """Messages received since the last drain, with arrival time in microseconds."""
        raise NotImplementedError

    def close(self) -> None:
        pass


class SimClock:
    """Manually advanced clock shared by the bus and the event loop."""

    def __init__(self, now_us: int = 0):
        self.now_us = now_us

    def __call__(self) -> int:
        return self.now_us


class WallClock:
    """Microseconds since construction."""

    def __init__(self):
        self._t0 = time.monotonic_ns()

    def restart(self) -> None:
        self._t0 = time.monotonic_ns()

    def __call__(self) -> int:
        return (time.monotonic_ns() - self._t0) // 1000


class MessageBus:
    """Seeded in-memory broadcast medium.

    Every broadcast reaches every other attached endpoint after a latency
    drawn uniformly from ``latency_us`` (inclusive), unless independently
    dropped with ``drop_probability``. Each receiver sees messages in
    ``(arrival time, sender_id, sequence)`` order. Thread-safe.
    """

    def __init__(self, latency_us=(0, 0), drop_probability=0.0, seed=0, clock=None):
        lo, hi = (int(v) for v in latency_us)
        if lo < 0 or hi < lo:
            raise InputError(f"latency range must satisfy 0 <= lo <= hi, got {latency_us}")
        self.latency_us = (lo, hi)
        self.drop_probability = check_probability(drop_probability, "drop_probability")
        self.clock = clock if clock is not None else SimClock()
        self._rng = np.random.default_rng(seed)
        self._lock = threading.Lock()
        self._endpoints: dict[int, BusEndpoint] = {}
        self._queues: dict[int, list] = {}
        self._seq = 0
        self.sent = 0
        self.delivered = 0
        self.dropped = 0

    def attach(self, owner_id: int, accept: Iterable[int] | None = None) -> "BusEndpoint":
        """Endpoint for ``owner_id``.

        ``accept`` restricts delivery to the listed senders (orchestrator
        messages always pass); filtering early saves work on large swarms.
        """
        with self._lock:
            if owner_id in self._endpoints:
                raise InputError(f"endpoint {owner_id} already attached")
            ep = BusEndpoint(self, owner_id, None if accept is None else frozenset(accept))
            self._endpoints[owner_id] = ep
            self._queues[owner_id] = []
            return ep

    def _broadcast(self, sender: int, frame: bytes, now_us: int) -> None:
        lo, hi = self.latency_us
        p = self.drop_probability
        with self._lock:
            self.sent += 1
            seq = self._seq
            self._seq += 1
            for rid, ep in self._endpoints.items():
                if rid == sender:
                    continue
                if ep.accept is not None and sender != ORCHESTRATOR_ID and sender not in ep.accept:
                    continue
                if p > 0.0 and self._rng.random() < p:
                    self.dropped += 1
                    continue
                delay = lo if hi == lo else int(self._rng.integers(lo, hi + 1))
                heapq.heappush(self._queues[rid], (now_us + delay, sender, seq, frame))

    def _drain(self, owner: int, now_us: int) -> list[tuple[bytes, int]]:
        out = []
        with self._lock:
            q = self._queues[owner]
            while q and q[0][0] <= now_us:
                arrival, _, _, frame = heapq.heappop(q)
                out.append((frame, arrival))
            self.delivered += len(out)
        return out


class BusEndpoint(Transport):
    def __init__(self, bus: MessageBus, owner_id: int, accept):
        self.bus = bus
        self.owner_id = owner_id
        self.accept = accept
        self.malformed = 0

    def broadcast(self, m: Message) -> int:
        frame = encode_message(m)
        self.bus._broadcast(self.owner_id, frame, self.bus.clock())
        return len(frame)

    def inject(self, frame: bytes, sender: int) -> None:
        """Put a raw frame on the medium (for fault-injection tests)."""
        self.bus._broadcast(sender, frame, self.bus.clock())

    def drain(self) -> list[tuple[Message, int]]:
        out = []
        for frame, arrival in self.bus._drain(self.owner_id, self.bus.clock()):
            try:
                out.append((decode_message(frame), arrival))
            except MalformedFrame:
                self.malformed += 1
        return out


def bus_transport(latency_us=(0, 0), drop_probability=0.0, seed=0, clock=None) -> MessageBus:
    return MessageBus(latency_us, drop_probability, seed, clock)


class UdpTransport(Transport):
    """UDP broadcast endpoint.

    The broadcast address must be given explicitly: flooding a shared network
    with 255.255.255.255 by accident is exactly what this refuses to do.
    """

    def __init__(self, owner_id: int, port: int, broadcast_addr: str, bind_addr: str = "",
                 clock: Callable[[], int] | None = None, accept: Iterable[int] | None = None,
                 rcvbuf: int = 1 << 20):
        if not broadcast_addr:
            raise InputError("net.broadcast_addr must be set explicitly for UDP transport")
        self.owner_id = owner_id
        self.broadcast_addr = broadcast_addr
        self.port = int(port)
        self.clock = clock if clock is not None else WallClock()
        self.accept = None if accept is None else frozenset(accept)
        self.malformed = 0
        self.send_errors = 0
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM, socket.IPPROTO_UDP)
        try:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_BROADCAST, 1)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, rcvbuf)
            sock.bind((bind_addr, self.port))
        except OSError as exc:
            sock.close()
            raise BindError(f"cannot bind UDP {bind_addr or '*'}:{port}: {exc}") from exc
        sock.setblocking(False)
        self._sock = sock

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()

    def broadcast(self, m: Message) -> int:
        frame = encode_message(m)
        try:
            self._sock.sendto(frame, (self.broadcast_addr, self.port))
        except OSError as exc:
            self.send_errors += 1
            logger.warning("fls %s: UDP send failed: %s", self.owner_id, exc)
        return len(frame)

    def drain(self) -> list[tuple[Message, int]]:
        out = []
        while True:
            try:
                frame, _ = self._sock.recvfrom(MAX_FRAME * 2)
            except (BlockingIOError, InterruptedError):
                break
            except OSError as exc:
                logger.warning("fls %s: UDP receive failed: %s", self.owner_id, exc)
                break
            sender = peek_sender(frame)
            if sender == self.owner_id:
                continue
            if (self.accept is not None and sender is not None
                    and sender != ORCHESTRATOR_ID and sender not in self.accept):
                continue
            try:
                msg = decode_message(frame)
            except MalformedFrame:
                self.malformed += 1
                continue
            out.append((msg, self.clock()))
        return out

    def close(self) -> None:
        self._sock.close()


def udp_transport(owner_id, port, broadcast_addr, bind_addr="", **kw) -> UdpTransport:
    return UdpTransport(owner_id, port, broadcast_addr, bind_addr, **kw)
