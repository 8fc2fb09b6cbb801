"""The ten acceptance criteria, each at its stated size and time limit.

A summary line per criterion is printed at the end of the pytest run.
"""

import csv
import math
import os
import random
import time
from dataclasses import replace

import pytest

from sdp.errors import EarlyDataTooLarge, MessageTooLarge, ReplayDetected
from sdp.keyx import (
    Resolver,
    SdpClient,
    SdpServer,
    SdpTicket,
    ToyCA,
    Variant,
    client_start,
    connect,
    handshake,
    publish_ticket,
    resolver_get,
    rtt_count,
    server_respond,
    transcript_steps,
)
from sdp.netharness import LinkModel, ScenarioConfig, count_packets, find_plaintext, race_suite, run_scenario, write_csv
from sdp.netharness.cli import main as cli_main
from sdp.netharness.sim import A_TO_B, CSV_COLUMNS
from sdp.nic import TsoSegment, tso_split
from sdp.transport import Endpoint, TransportConfig
from sdp.record import SessionKeys
from sdp.wire import (
    MAX_TSO_OFFSET,
    NETWORK_HEADER_LEN,
    OVERLAID_HEADER_LEN,
    PACKET_HEADER_LEN,
    RECORD_HEADER_LEN,
    TAG_LEN,
    FramingHeader,
    NetworkHeader,
    OverlaidHeader,
    PacketType,
    RecordHeader,
    decode_grant,
    decode_network_header,
    decode_overlaid_header,
    decode_record_header,
    decode_resend,
    encode_grant,
    encode_resend,
)

NOW = 1_700_000_000.0


class Clock:
    def __init__(self, limit):
        self.limit = limit

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        if exc[0] is None:
            assert self.elapsed < self.limit, f"took {self.elapsed:.1f}s, limit {self.limit}s"


def hdr(pkt):
    return decode_overlaid_header(pkt[NETWORK_HEADER_LEN:PACKET_HEADER_LEN])


@pytest.mark.criterion(1, "wire round-trip of 10,000 random headers per type", 5)
def test_c1_wire_roundtrip():
    rng = random.Random(1)
    with Clock(5):
        assert (OVERLAID_HEADER_LEN, RECORD_HEADER_LEN, TAG_LEN) == (40, 13, 16)
        for _ in range(10_000):
            mlen = rng.randrange(0, (1 << 20) + 1)
            h = OverlaidHeader(rng.randrange(1 << 16), rng.randrange(1 << 16), rng.randrange(1 << 64), mlen,
                               tso_offset=min(MAX_TSO_OFFSET, rng.randrange(mlen + 1)),
                               packet_type=rng.choice(list(PacketType)), retransmit_flag=rng.random() < 0.5,
                               original_offset=rng.randrange(MAX_TSO_OFFSET + 1))
            raw = h.encode()
            assert len(raw) == 40 and decode_overlaid_header(raw) == h
        for _ in range(10_000):
            r = RecordHeader(rng.randrange(16, 1 << 16), rng.randrange(1 << 64))
            raw = r.encode()
            assert len(raw) == 13 and decode_record_header(raw) == r
        for _ in range(10_000):
            n = NetworkHeader(rng.randrange(1 << 32), rng.randrange(1 << 32), rng.randrange(1 << 16),
                              rng.randrange(60, 1 << 16), rng.randrange(256), rng.randrange(256))
            raw = n.encode()
            assert len(raw) == 20 and decode_network_header(raw) == n
        for _ in range(10_000):
            f = FramingHeader(rng.randrange(1 << 32), rng.randrange(1 << 16))
            assert FramingHeader.decode(f.encode()) == f
        for _ in range(10_000):
            g, o, ln = rng.randrange(1 << 32), rng.randrange(1 << 32), rng.randrange(1 << 32)
            assert decode_grant(encode_grant(g)) == g
            assert decode_resend(encode_resend(o, ln)) == (o, ln)


@pytest.mark.criterion(2, "TSO split: 3800 B -> 3 packets, 1,000 random sizes", 5)
def test_c2_tso_structure():
    def split(n, mtu=1500):
        s = TsoSegment(NetworkHeader(1, 2), OverlaidHeader(3, 4, 5, 1 << 20, tso_offset=61440), 0)
        s.record = bytes(n)
        return tso_split(s, mtu)

    rng = random.Random(2)
    with Clock(5):
        pkts = split(3800)
        assert len(pkts) == 3
        assert [p.net.ipid for p in pkts] == [0, 1, 2]
        raws = [p.to_bytes() for p in pkts]
        assert raws[0][20:60] == raws[1][20:60] == raws[2][20:60]
        for _ in range(1000):
            n = rng.randrange(1, 65536)
            pkts = split(n)
            assert len(pkts) == -(-n // 1440)
            assert [decode_network_header(p.to_bytes()).ipid for p in pkts] == list(range(len(pkts)))
            assert len({p.to_bytes()[20:60] for p in pkts}) == 1


@pytest.mark.criterion(3, "5,000 messages 1 B..1 MB over 1% loss + 1% reorder", 60)
def test_c3_end_to_end_reliability():
    rng = random.Random(3)
    sizes = [min(1 << 20, round(2 ** rng.uniform(0, 20))) for _ in range(5000)]
    sizes[0], sizes[1] = 1, 1 << 20
    with Clock(60):
        cfg = ScenarioConfig(name="reliability", workload="oneway", sizes=sizes, concurrency=8, seed=3,
                             link=LinkModel(loss_rate=0.01, reorder_rate=0.01, seed=3), trace=False)
        r = run_scenario(cfg)
        assert len(r.deliveries) == 5000
        assert all(r.deliveries[i] == r.payloads[i] for i in range(5000))
        assert set(r.delivery_counts.values()) == {1}
        assert r.retransmissions > 0  # loss actually happened
        ep = Endpoint(1, 1, TransportConfig())
        ep.register_keys((2, 2), SessionKeys(bytes(16), bytes(12)), SessionKeys(bytes(16), bytes(12)))
        with pytest.raises(MessageTooLarge):
            ep.send_message((2, 2), bytes((1 << 20) + 1))


@pytest.mark.criterion(4, "race: shared context fails, per-message contexts never do", 30)
def test_c4_race_reproduction():
    with Clock(30):
        reports = {r.name: r.modes for r in race_suite()}
        two_queue = reports["two_queue"]
        assert two_queue["shared"].exhaustive and two_queue["shared"].failing_schedules >= 1
        for name, modes in reports.items():
            pm = modes["per_message"]
            assert pm.auth_failures == 0 and pm.invalid_tags == 0, name
            if pm.exhaustive:
                assert pm.descriptors <= 6
            else:
                assert pm.schedules == 1000
        assert any(not m["per_message"].exhaustive for m in reports.values())
        assert reports["single_queue"]["shared"].auth_failures == 0


@pytest.mark.criterion(5, "single packet drop: one RESEND, flagged retransmission, RESYNC, exact delivery", 5)
def test_c5_retransmission_and_resync():
    dropped = []

    def drop(direction, index, pkt):
        if direction != A_TO_B or dropped:
            return False
        h = hdr(pkt)
        if h.packet_type is PacketType.DATA and h.message_id == 1 and decode_network_header(pkt).ipid == 1:
            dropped.append(pkt)
            return True
        return False

    with Clock(5):
        # Message 1 is one 3-packet segment; message 3 goes out right after it
        # and takes the next record sequence, so the retransmission is out of
        # sequence for message 1's flow context.
        sizes = [4000, 500]
        r = run_scenario(ScenarioConfig(name="drop", workload="oneway", sizes=sizes, concurrency=2,
                                        offload=True, seed=5, drop_hook=drop))
        assert len(dropped) == 1
        assert count_packets(r.trace, ptype=PacketType.RESEND) == 1
        retx = [r.trace.packets[e.packet] for e in r.trace.events
                if e.annotation == "sent" and e.direction == A_TO_B and hdr(r.trace.packets[e.packet]).retransmit_flag]
        assert [hdr(p).original_offset for p in retx] == [0, 1440, 2880]
        assert r.client.nic.resyncs_submitted >= 1
        assert r.client.stats["invalid_tags"] == 0
        assert [r.deliveries[i] for i in range(2)] == r.payloads[:2]


@pytest.mark.criterion(6, "SRPT: 1 KB beats a concurrent 1 MB message, 100 seeds", 30)
def test_c6_srpt_no_head_of_line_blocking():
    with Clock(30):
        for seed in range(100):
            sizes = [1 << 20, 1024] if seed % 2 == 0 else [1024, 1 << 20]
            small = sizes.index(1024)
            cfg = ScenarioConfig(name="srpt", workload="oneway", sizes=sizes, concurrency=2, seed=seed,
                                 link=LinkModel(reorder_rate=0.01, seed=seed), trace=False)
            r = run_scenario(cfg)
            assert r.delivery_order[0] == small, seed
            big = 1 - small
            assert r.latencies_ns[small] < r.latencies_ns[big], seed
            assert r.deliveries[small] == r.payloads[small]


@pytest.mark.criterion(7, "no plaintext on the wire; 100 bit flips -> AuthFailure then recovery", 30)
def test_c7_confidentiality_and_integrity():
    with Clock(30):
        rng = random.Random(7)
        sizes = [rng.choice([20, 700, 1440, 5000, 70000]) for _ in range(40)]
        for offload in (True, False):
            r = run_scenario(ScenarioConfig(name="leak", sizes=sizes, concurrency=4, offload=offload, seed=7))
            assert len(r.latencies_ns) == len(sizes)
            assert find_plaintext(r.trace, r.payloads) == []

        for trial in range(100):
            trng = random.Random(1000 + trial)
            size = trng.choice([100, 3000, 5000])
            hit = []

            def corrupt(direction, index, pkt, trng=trng, hit=hit):
                if hit or direction != A_TO_B:
                    return None
                h = hdr(pkt)
                if h.packet_type is not PacketType.DATA or h.retransmit_flag:
                    return None
                start = PACKET_HEADER_LEN + (RECORD_HEADER_LEN if decode_network_header(pkt).ipid == 0 else 0)
                pos = trng.randrange(start, len(pkt))
                hit.append(pos)
                out = bytearray(pkt)
                out[pos] ^= 1 << trng.randrange(8)
                return bytes(out)

            r = run_scenario(ScenarioConfig(name="flip", workload="oneway", sizes=[size], seed=trial,
                                            corrupt_hook=corrupt))
            assert len(hit) == 1
            assert r.server.stats["auth_failures"] == 1, trial
            assert r.deliveries[0] == r.payloads[0], trial
            assert r.server.stats["resends_sent"] >= 1


def _world(seed=None):
    entropy = os.urandom if seed is None else random.Random(seed).randbytes
    ca = ToyCA(entropy)
    resolver = Resolver()
    server = SdpServer("srv", ca, entropy=entropy, now=NOW)
    client = SdpClient(ca.public_key, resolver, entropy=entropy)
    publish_ticket(server, resolver, NOW)
    return ca, resolver, server, client


@pytest.mark.criterion(8, "key exchange: step sets, 0-RTT data, replay, fallback, key agreement", 30)
def test_c8_key_exchange():
    with Clock(30):
        # (a) step-set algebra
        full, fs, plain = (set(transcript_steps(v)) for v in (Variant.INIT_1RTT, Variant.INIT_FS, Variant.INIT))
        assert plain < fs < full
        assert fs - plain == {"S2.2", "C2.2"}
        assert full - fs == {"C1.1", "C4.1", "C4.2", "C5.1", "C5.2", "S2.1", "S2.5"}

        # (b) application data in flight 1
        _, resolver, server, client = _world(8)
        handshake(client, server, Variant.INIT_1RTT, now=NOW)  # obtains a resumption PSK
        for v in (Variant.INIT, Variant.INIT_FS, Variant.RSMP, Variant.RSMP_FS):
            chs = client_start(client, "srv", v, b"request-in-flight-1", NOW)
            hs, _ = server_respond(server, chs.chlo, NOW)
            assert hs.early_data == b"request-in-flight-1" and rtt_count(v) == 0
        with pytest.raises(EarlyDataTooLarge):
            client_start(client, "srv", Variant.INIT_1RTT, b"request-in-flight-1", NOW)
        assert rtt_count(Variant.INIT_1RTT) == 1

        # (c) replay and tampering
        chs = client_start(client, "srv", Variant.INIT_FS, b"x", NOW)
        server_respond(server, chs.chlo, NOW)
        with pytest.raises(ReplayDetected):
            server_respond(server, chs.chlo, NOW)
        server_respond(server, client_start(client, "srv", Variant.INIT_FS, b"x", NOW).chlo, NOW)
        (blob,) = resolver_get(resolver, "srv", NOW)
        ticket = SdpTicket.from_bytes(blob)
        resolver._tickets["srv"] = [replace(ticket, max_early_data=ticket.max_early_data + 1)]
        client.tickets.clear()
        t = connect(client, server, Variant.INIT_FS, b"x", now=NOW)
        assert t.fell_back and t.variant is Variant.INIT_1RTT

        # (d) key agreement over random ephemeral keys
        _, _, server, client = _world()
        variants = [Variant.INIT, Variant.INIT_FS, Variant.INIT_1RTT]
        for i in range(1000):
            t = handshake(client, server, variants[i % 3], now=NOW)
            c, s = t.client_schedule, t.server_schedule
            assert (c.sdp_key, c.fs_key, c.traffic_secret) == (s.sdp_key, s.fs_key, s.traffic_secret)
            (c_tx, c_rx), (s_tx, s_rx) = t.keys_out
            assert c_tx.aead_key == s_rx.aead_key and s_tx.aead_key == c_rx.aead_key


@pytest.mark.criterion(9, "same seed -> byte-identical traces and metrics", 10)
def test_c9_determinism():
    with Clock(10):
        cfg = dict(name="det", rpc_size=20000, rpcs=60, concurrency=6, seed=9,
                   link=LinkModel(loss_rate=0.02, reorder_rate=0.02, seed=9))
        a = run_scenario(ScenarioConfig(**cfg))
        b = run_scenario(ScenarioConfig(**cfg))
        assert a.trace.to_bytes() == b.trace.to_bytes()
        assert write_csv(a.rows) == write_csv(b.rows)
        assert a.rows[0].retx > 0
        one = run_scenario(ScenarioConfig(name="det2", workload="oneway", sizes=[1, 100000, 5], seed=4,
                                          context_mode="shared", link=LinkModel(reorder_rate=0.1, seed=4)))
        two = run_scenario(ScenarioConfig(name="det2", workload="oneway", sizes=[1, 100000, 5], seed=4,
                                          context_mode="shared", link=LinkModel(reorder_rate=0.1, seed=4)))
        assert one.trace.to_bytes() == two.trace.to_bytes()


@pytest.mark.criterion(10, "bench CSV over size x concurrency x offload, offload-on never slower", 60)
def test_c10_benchmark_shape(tmp_path):
    out = tmp_path / "bench.csv"
    with Clock(60):
        assert cli_main(["bench", "concurrent", "--out", str(out)]) == 0
        with open(out) as fh:
            reader = csv.DictReader(fh)
            assert tuple(reader.fieldnames) == CSV_COLUMNS
            rows = list(reader)
        keys = {(int(r["rpc_size"]), int(r["concurrency"]), r["offload"]) for r in rows}
        assert keys == {(s, c, o) for s in (64, 1024, 8192) for c in (1, 10, 50) for o in ("on", "off")}
        assert len(rows) == 18
        by = {(int(r["rpc_size"]), int(r["concurrency"]), r["offload"]): r for r in rows}
        for s in (64, 1024, 8192):
            for c in (1, 10, 50):
                on, off = by[(s, c, "on")], by[(s, c, "off")]
                for col in ("p50_us", "p99_us"):
                    assert not math.isnan(float(on[col]))
                    assert float(on[col]) <= float(off[col]), (s, c, col)
                assert float(on["p50_us"]) <= float(on["p99_us"])
