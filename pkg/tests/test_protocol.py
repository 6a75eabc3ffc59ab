from __future__ import annotations

import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swarmloc.exceptions import BindError, InputError, MalformedFrame
from swarmloc.protocol import (HEADER_SIZE, ORCHESTRATOR_ID, Message, MessageBus, MessageKind,
                               SimClock, UdpTransport, decode_message, encode_message)

from conftest import free_udp_port

LOOPBACK_BCAST = "127.255.255.255"

finite = st.floats(allow_nan=False, allow_infinity=False)
messages = st.builds(
    Message,
    kind=st.sampled_from(list(MessageKind)),
    sender_id=st.integers(0, 2**32 - 1),
    swarm_id=st.integers(0, 2**32 - 1),
    timestamp_us=st.integers(0, 2**64 - 1),
    vectors=st.lists(st.tuples(finite, finite, finite), max_size=2).map(tuple),
)


def test_frame_sizes():
    t = encode_message(Message(MessageKind.TERMINATE, 0, 0, 0))
    assert len(t) == 19 == HEADER_SIZE
    assert t[-1] == 0
    u = encode_message(Message(MessageKind.LOCATION_UPDATE, 3, 0, 5, ((1.0, 2.0, 3.0),)))
    assert len(u) == 43


@settings(max_examples=1000, deadline=None)
@given(messages)
def test_roundtrip(m):
    assert decode_message(encode_message(m)) == m


def test_roundtrip_seeded_batch():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        nv = int(rng.integers(0, 3))
        m = Message(MessageKind(int(rng.integers(1, 5))), int(rng.integers(0, 2**32)),
                    int(rng.integers(0, 2**32)), int(rng.integers(0, 2**63)),
                    tuple(tuple(rng.normal(size=3)) for _ in range(nv)))
        assert decode_message(encode_message(m)) == m


@pytest.mark.parametrize("frame,reason", [
    (b"", "truncated"),
    (bytes([2, 1]) + bytes(17), "version"),
    (bytes([1, 9]) + bytes(17), "kind"),
    (bytes([1, 1]) + bytes(16) + bytes([3]), "vector count"),
    (bytes([1, 1]) + bytes(16) + bytes([1]) + bytes(10), "truncated"),
    (bytes([1, 1]) + bytes(17) + bytes(5), "length"),
])
def test_malformed(frame, reason):
    with pytest.raises(MalformedFrame) as exc:
        decode_message(frame)
    assert exc.value.reason == reason


def test_non_finite_rejected():
    frame = encode_message(Message(MessageKind.ANCHOR_BEACON, 1, 0, 0, ((0.0, 0.0, 0.0),)))
    bad = frame[:HEADER_SIZE] + np.array([np.nan, 0, 0]).tobytes()
    with pytest.raises(MalformedFrame):
        decode_message(bad)


def test_message_validation():
    with pytest.raises(InputError):
        Message(MessageKind.ANCHOR_BEACON, 2**32)
    with pytest.raises(InputError):
        Message(MessageKind.ANCHOR_BEACON, 1, vectors=((0, 0, 0),) * 3)


def test_bus_immediate_delivery():
    clock = SimClock(5)
    bus = MessageBus(clock=clock)
    eps = [bus.attach(i) for i in range(3)]
    m = Message(MessageKind.ANCHOR_BEACON, 0, 0, 5, ((1.0, 2.0, 3.0),))
    eps[0].broadcast(m)
    assert eps[0].drain() == []
    for ep in eps[1:]:
        assert ep.drain() == [(m, 5)]


def test_bus_latency_and_order():
    clock = SimClock(0)
    bus = MessageBus(latency_us=(10, 10), clock=clock)
    a, b, c = bus.attach(1), bus.attach(2), bus.attach(3)
    a.broadcast(Message(MessageKind.ANCHOR_BEACON, 1))
    b.broadcast(Message(MessageKind.ANCHOR_BEACON, 2))
    clock.now_us = 9
    assert c.drain() == []
    clock.now_us = 10
    assert [m.sender_id for m, _ in c.drain()] == [1, 2]


def test_bus_drop_all():
    bus = MessageBus(drop_probability=1.0)
    a, b = bus.attach(1), bus.attach(2)
    for _ in range(20):
        a.broadcast(Message(MessageKind.ANCHOR_BEACON, 1))
    assert b.drain() == [] and bus.delivered == 0 and bus.dropped == 20


def test_bus_drop_rate_monte_carlo():
    bus = MessageBus(drop_probability=0.25, seed=42)
    a, b = bus.attach(1), bus.attach(2)
    m = Message(MessageKind.ANCHOR_BEACON, 1)
    for _ in range(10_000):
        a.broadcast(m)
    assert abs(len(b.drain()) / 10_000 - 0.75) < 0.02


def test_bus_accept_filter_and_injection():
    bus = MessageBus()
    a, b = bus.attach(1), bus.attach(2, accept={1})
    c = bus.attach(3)
    c.broadcast(Message(MessageKind.ANCHOR_BEACON, 3))
    a.inject(b"\x01\x01garbage", sender=1)
    a.broadcast(Message(MessageKind.ANCHOR_BEACON, 1))
    c.broadcast(Message(MessageKind.TERMINATE, ORCHESTRATOR_ID))
    got = b.drain()
    assert [m.sender_id for m, _ in got] == [1]
    assert b.malformed == 1
    bus2 = MessageBus()
    o = bus2.attach(ORCHESTRATOR_ID)
    f = bus2.attach(2, accept=())
    o.broadcast(Message(MessageKind.TERMINATE, ORCHESTRATOR_ID))
    assert f.drain()[0][0].kind is MessageKind.TERMINATE


def test_bus_duplicate_attach():
    bus = MessageBus()
    bus.attach(1)
    with pytest.raises(InputError):
        bus.attach(1)


def test_bus_bad_latency():
    with pytest.raises(InputError):
        MessageBus(latency_us=(5, 1))


def _drain_until(ep, n, timeout=2.0):
    got = []
    end = time.monotonic() + timeout
    while len(got) < n and time.monotonic() < end:
        got += ep.drain()
        time.sleep(0.001)
    return got


def test_udp_requires_broadcast_addr():
    with pytest.raises(InputError):
        UdpTransport(1, free_udp_port(), "")


def test_udp_self_filter_and_malformed():
    port = free_udp_port()
    a = UdpTransport(1, port, LOOPBACK_BCAST)
    b = UdpTransport(2, port, LOOPBACK_BCAST)
    try:
        m = Message(MessageKind.ANCHOR_BEACON, 1, 0, 7, ((1.0, 2.0, 3.0),))
        a.broadcast(m)
        got = _drain_until(b, 1)
        assert [g[0] for g in got] == [m]
        time.sleep(0.05)
        assert a.drain() == []
        a._sock.sendto(b"\x07junk-frame-of-some-length", (LOOPBACK_BCAST, port))
        a.broadcast(m)
        got = _drain_until(b, 1)
        assert [g[0] for g in got] == [m]
        assert b.malformed == 1
    finally:
        a.close()
        b.close()


def test_udp_loopback_throughput():
    port = free_udp_port()
    a = UdpTransport(1, port, LOOPBACK_BCAST)
    b = UdpTransport(2, port, LOOPBACK_BCAST)
    try:
        got = []
        for k in range(1000):
            a.broadcast(Message(MessageKind.LOCATION_UPDATE, 1, 0, k, ((k, 0.0, 0.0),)))
            if k % 50 == 49:
                got += b.drain()
        got += _drain_until(b, 1000 - len(got), timeout=1.0)
        assert len(got) >= 990
        assert len({m.timestamp_us for m, _ in got}) == len(got)
    finally:
        a.close()
        b.close()


def test_udp_bind_error():
    with pytest.raises(BindError):
        UdpTransport(1, free_udp_port(), LOOPBACK_BCAST, bind_addr="192.0.2.123")
