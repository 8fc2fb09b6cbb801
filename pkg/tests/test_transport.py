import random

import pytest
from hypothesis import given, settings, strategies as st

from sdp.errors import MessageTooLarge, NoKeys, RpcAbandoned
from sdp.record import SessionKeys
from sdp.transport import CostModel, Endpoint, IntervalSet, RpcState, TransportConfig
from sdp.wire import (
    NETWORK_HEADER_LEN,
    PACKET_HEADER_LEN,
    PacketType,
    decode_network_header,
    decode_overlaid_header,
    decode_resend,
)

MS = 1_000_000


def hdr(pkt):
    return decode_overlaid_header(pkt[NETWORK_HEADER_LEN:PACKET_HEADER_LEN])


class Pair:
    """Two endpoints wired back to back; packets move when pump() is called."""

    def __init__(self, **cfg):
        self.a = Endpoint(1, 100, TransportConfig(**cfg), initiator=True)
        self.b = Endpoint(2, 200, TransportConfig(**cfg), initiator=False)
        k_ab = (bytes([1]) * 16, bytes([2]) * 12)
        k_ba = (bytes([3]) * 16, bytes([4]) * 12)
        self.a.register_keys((2, 200), SessionKeys(*k_ab), SessionKeys(*k_ba))
        self.b.register_keys((1, 100), SessionKeys(*k_ba), SessionKeys(*k_ab))
        self.now = 0
        self.wire = []  # (direction, packet) for everything sent

    def pump(self, drop=None, mangle=None, rounds=1000):
        for _ in range(rounds):
            moved = False
            for src, dst, d in ((self.a, self.b, "ab"), (self.b, self.a, "ba")):
                src.poll(self.now)
                for _, pkt in src.flush(self.now):
                    self.wire.append((d, pkt))
                    moved = True
                    if drop and drop(d, pkt):
                        continue
                    if mangle:
                        pkt = mangle(d, pkt)
                    dst.on_packet(pkt, self.now)
            if not moved:
                # Idle unless the pacer is only waiting for tokens; timers stay untouched.
                wakes = [w for w in (self.a.next_wakeup(self.now), self.b.next_wakeup(self.now)) if w is not None]
                if not wakes or min(wakes) > self.now + MS:
                    return
                self.now = max(self.now + 1, min(wakes))
                continue
            self.now += 1000

    def advance(self, ns):
        self.now += ns
        self.pump()


def test_small_message_delivered_and_acked():
    p = Pair()
    mid = p.a.send_message((2, 200), b"hello world", 0)
    p.pump()
    (d,) = p.b.poll_delivery()
    assert (d.data, d.message_id, d.peer) == (b"hello world", mid, (1, 100))
    assert not p.a.outbound
    assert p.a.nic.pool.in_use() == 0
    types = [hdr(pkt).packet_type for _, pkt in p.wire]
    assert types == [PacketType.DATA, PacketType.ACK]


def test_message_limits():
    p = Pair()
    with pytest.raises(MessageTooLarge):
        p.a.send_message((2, 200), bytes((1 << 20) + 1))
    with pytest.raises(NoKeys):
        p.a.send_message((9, 9), b"x")
    data = random.Random(0).randbytes(1 << 20)
    p.a.send_message((2, 200), data)
    p.pump()
    assert p.b.poll_delivery()[0].data == data


def test_empty_message():
    p = Pair()
    p.a.send_message((2, 200), b"")
    p.pump()
    assert p.b.poll_delivery()[0].data == b""


def test_segmentation_and_unscheduled_window():
    p = Pair()
    mid = p.a.send_message((2, 200), bytes(150000), 0)
    rpc = p.a.outbound[((2, 200), mid)]
    assert [(s.tso_offset, s.length) for s in rpc.segments] == [(0, 61440), (61440, 61440), (122880, 27120)]
    assert [s.record_seq for s in rpc.segments] == [0, 1, 2]
    # only the first segment fits in the unscheduled window before any grant
    assert rpc.granted == 65536
    assert [s.sent for s in rpc.segments] == [True, False, False]
    assert rpc.state is RpcState.AWAIT_GRANT
    p.pump()
    assert p.b.poll_delivery()[0].data == bytes(150000)
    assert p.b.stats["grants_sent"] >= 1


def test_pacer_prefers_shortest_remaining():
    p = Pair()
    p.a.tokens = -1.0  # no headroom: everything goes through the pacer
    big = p.a.send_message((2, 200), bytes(60000), 0)
    small = p.a.send_message((2, 200), bytes(1000), 0)
    sent = p.a.pacer_tick(10 * MS)
    assert [s.header.message_id for s in sent][:2] == [small, big]


def test_retransmitted_duplicate_segment_is_spurious():
    p = Pair(max_tso_payload=4000, grant_window=8000, unscheduled_limit=100000)
    mid = p.a.send_message((2, 200), bytes(range(256)) * 40, 0)  # 10240 B, 3 segments
    # first segment arrives; hold the rest
    packets = []
    p.a.poll(0)
    for _, pkt in p.a.flush(0):
        packets.append(pkt)
    first_seg = [x for x in packets if hdr(x).tso_offset == 0]
    for x in first_seg:
        p.b.on_packet(x, 0)
    inbound = p.b.inbound[((1, 100), mid)]
    total = inbound.received_ranges.total
    # sender retransmits segment 0 although it already arrived
    p.a.on_resend((2, 200), mid, 0, 1, 0)
    for _, pkt in p.a.flush(0):
        if hdr(pkt).tso_offset == 0:
            p.b.on_packet(pkt, 0)
    assert inbound.received_ranges.total == total
    assert p.b.stats["spurious"] >= 1
    for x in packets:
        if hdr(x).tso_offset != 0:
            p.b.on_packet(x, 0)
    assert p.b.poll_delivery()[0].data == bytes(range(256)) * 40


def test_single_packet_loss_resend_and_recovery():
    p = Pair()
    data = random.Random(1).randbytes(4000)  # one 3-packet segment
    dropped = []

    def drop(d, pkt):
        h = hdr(pkt)
        if d == "ab" and h.packet_type is PacketType.DATA and decode_network_header(pkt).ipid == 1 and not dropped:
            dropped.append(pkt)
            return True
        return False

    p.a.send_message((2, 200), data, 0)
    p.pump(drop=drop)
    assert not p.b.poll_delivery()
    p.advance(10 * MS)
    resends = [pkt for d, pkt in p.wire if hdr(pkt).packet_type is PacketType.RESEND]
    assert len(resends) == 1
    assert decode_resend(resends[0][PACKET_HEADER_LEN:]) == (0, 4000)
    retx = [pkt for d, pkt in p.wire if d == "ab" and hdr(pkt).retransmit_flag]
    assert [hdr(x).original_offset for x in retx] == [0, 1440, 2880]
    assert p.b.poll_delivery()[0].data == data


def test_corrupted_tag_triggers_resend():
    p = Pair()
    data = random.Random(2).randbytes(3000)
    hit = []

    def mangle(d, pkt):
        if d == "ab" and hdr(pkt).packet_type is PacketType.DATA and not hit:
            hit.append(1)
            return pkt[:-1] + bytes([pkt[-1] ^ 0x80])
        return pkt

    p.a.send_message((2, 200), data, 0)
    p.pump(mangle=mangle)
    assert p.b.stats["auth_failures"] == 1
    assert p.b.poll_delivery()[0].data == data


def test_pool_exhaustion_waits_for_context():
    p = Pair(pool_size=1)
    m1 = p.a.send_message((2, 200), b"one", 0)
    m2 = p.a.send_message((2, 200), b"two", 0)
    assert p.a.outbound[((2, 200), m2)].state is RpcState.WAIT_CONTEXT
    p.pump()
    got = sorted(d.data for d in p.b.poll_delivery())
    assert got == [b"one", b"two"]
    assert m1 != m2


@pytest.mark.parametrize("offload,mode", [(True, "per_message"), (True, "shared"), (False, "per_message")])
def test_modes_deliver_identical_plaintext(offload, mode):
    p = Pair(offload=offload, context_mode=mode)
    msgs = [random.Random(i).randbytes(n) for i, n in enumerate([1, 1500, 70000, 200000])]
    for m in msgs:
        p.a.send_message((2, 200), m, 0)
    p.pump()
    assert sorted(d.data for d in p.b.poll_delivery()) == sorted(msgs)
    assert p.a.stats["invalid_tags"] == 0


def test_sender_abandons_silent_peer():
    p = Pair(max_retries=2)
    p.a.send_message((2, 200), b"into the void", 0)
    p.pump(drop=lambda d, pkt: True)
    errors = []
    for _ in range(10):
        p.now += 20 * MS
        p.pump(drop=lambda d, pkt: True)
        errors += p.a.poll_errors()
    assert len(errors) == 1 and isinstance(errors[0], RpcAbandoned)
    assert not p.a.outbound and p.a.nic.pool.in_use() == 0


def test_lost_ack_is_reissued():
    p = Pair()
    p.a.send_message((2, 200), b"ack me", 0)
    p.pump(drop=lambda d, pkt: d == "ba")
    assert p.a.outbound
    p.advance(20 * MS)
    assert not p.a.outbound
    assert len(p.b.poll_delivery()) == 1


def test_software_crypto_cost_delays_packets():
    cfg = TransportConfig(offload=False)
    e = Endpoint(1, 1, cfg, CostModel(crypto_per_op_ns=1000, crypto_per_byte_ns=1.0))
    e.register_keys((2, 2), SessionKeys(bytes(16), bytes(12)), SessionKeys(bytes(16), bytes(12)))
    e.send_message((2, 2), bytes(100), 0)
    (t, _), = e.flush(0)
    assert t == 1000 + 106  # 100 B + one framing header


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(0, 200), st.integers(0, 50)), max_size=30))
def test_interval_set_matches_byte_set(spans):
    s, oracle = IntervalSet(), set()
    for start, n in spans:
        added = s.add(start, start + n)
        new = set(range(start, start + n)) - oracle
        assert added == len(new)
        oracle |= new
    assert s.total == len(oracle)
    assert sum(e - b for b, e in s.gaps(260)) == 260 - len(oracle & set(range(260)))
    for b, e in s:
        assert s.covers(b, e) and set(range(b, e)) <= oracle
