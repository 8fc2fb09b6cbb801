"""
Discrete-event simulation of two SDP endpoints joined by a pair of links.

Everything runs on integer simulated nanoseconds. A scenario performs the
handshake in-process (charging its round trips to simulated time), registers
the resulting keys on both endpoints, then runs a closed-loop workload: either
request/response echo RPCs or one-way messages, with a bounded number in
flight.
"""

from __future__ import annotations

import csv
import heapq
import io
import itertools
import math
import random
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from ..errors import ConfigError, RpcAbandoned
from ..keyx import SdpClient, SdpServer, ToyCA, Resolver, Variant, handshake, publish_ticket, rtt_count
from ..nic import Policy
from ..transport import ContextMode, CostModel, Endpoint, TransportConfig
from ..wire import MAX_MESSAGE_LENGTH, PacketType, decode_overlaid_header, NETWORK_HEADER_LEN, PACKET_HEADER_LEN
from .trace import CORRUPTED, DELIVERED, DROPPED, REORDERED, SENT, Trace

CLIENT_ADDR, CLIENT_PORT = 0x0A000001, 40000
SERVER_ADDR, SERVER_PORT = 0x0A000002, 5000
A_TO_B, B_TO_A = "a>b", "b>a"
# Fixed wall-clock origin for certificates and tickets, so runs are repeatable.
EPOCH = 1_700_000_000.0

CSV_COLUMNS = ("scenario", "rpc_size", "concurrency", "offload", "variant",
               "p50_us", "p99_us", "rpcs_per_s", "retx")


@dataclass
class LinkModel:
    one_way_delay_us: float = 5.0
    bandwidth_bps: float = 100e9
    loss_rate: float = 0.0
    reorder_rate: float = 0.0
    reorder_delay_us: float = 10.0
    seed: int = 0

    def serialization_ns(self, nbytes: int) -> int:
        return round(nbytes * 8e9 / self.bandwidth_bps)

    @property
    def delay_ns(self) -> int:
        return round(self.one_way_delay_us * 1000)


class Link:
    """One direction of a link: FIFO serialization, then delay, loss and reordering."""

    def __init__(self, model: LinkModel, direction: str):
        self.model = model
        self.direction = direction
        self.rng = random.Random(f"{model.seed}:{direction}")
        self.busy_until = 0
        self.sent = 0

    def transmit(self, t: int, nbytes: int) -> tuple[int, int, str]:
        """Returns (start, arrival, fate) for a packet offered at time ``t``."""
        start = max(t, self.busy_until)
        self.busy_until = start + self.model.serialization_ns(nbytes)
        arrival = self.busy_until + self.model.delay_ns
        self.sent += 1
        # Draw both numbers every time so one fate never shifts the next.
        lost = self.rng.random() < self.model.loss_rate
        reorder = self.rng.random() < self.model.reorder_rate
        if lost:
            return start, arrival, DROPPED
        if reorder:
            return start, arrival + round(self.model.reorder_delay_us * 1000), REORDERED
        return start, arrival, DELIVERED


# drop hook: (direction, index on that direction, packet bytes) -> True to drop
DropHook = Callable[[str, int, bytes], bool]
# corrupt hook: same arguments, returns replacement bytes or None
CorruptHook = Callable[[str, int, bytes], "bytes | None"]


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    workload: str = "echo"  # echo | oneway
    rpc_size: int = 64
    sizes: list | None = None  # explicit per-message sizes, overrides rpc_size/rpcs
    rpcs: int = 100
    concurrency: int = 1
    offload: bool = True
    variant: str = "INIT_FS"
    mtu: int = 1500
    seed: int = 0
    link: LinkModel = field(default_factory=LinkModel)
    cost: CostModel = field(default_factory=CostModel)
    context_mode: str = "per_message"
    n_queues: int = 4
    engine_policy: str = "random"
    max_sim_ns: int = 600 * 10**9
    trace: bool = True
    drop_hook: DropHook | None = None
    corrupt_hook: CorruptHook | None = None

    def validate(self) -> None:
        bad = {}
        if self.workload not in ("echo", "oneway"):
            bad["workload"] = "must be 'echo' or 'oneway'"
        if self.sizes is None and not 0 <= self.rpc_size <= MAX_MESSAGE_LENGTH:
            bad["rpc_size"] = f"must be in [0, {MAX_MESSAGE_LENGTH}]"
        if self.sizes is not None and any(not 0 <= s <= MAX_MESSAGE_LENGTH for s in self.sizes):
            bad["sizes"] = f"every size must be in [0, {MAX_MESSAGE_LENGTH}]"
        if self.rpcs < 1:
            bad["rpcs"] = "must be at least 1"
        if self.concurrency < 1:
            bad["concurrency"] = "must be at least 1"
        try:
            Variant(self.variant)
        except ValueError:
            bad["variant"] = f"unknown variant, expected one of {[v.value for v in Variant]}"
        if not 100 <= self.mtu <= 65535:
            bad["mtu"] = "must be in [100, 65535]"
        if not 0.0 <= self.link.loss_rate <= 1.0:
            bad["link.loss_rate"] = "must be a probability"
        if not 0.0 <= self.link.reorder_rate <= 1.0:
            bad["link.reorder_rate"] = "must be a probability"
        if self.link.bandwidth_bps <= 0:
            bad["link.bandwidth_bps"] = "must be positive"
        if self.link.one_way_delay_us < 0:
            bad["link.one_way_delay_us"] = "must be non-negative"
        if self.context_mode not in ("per_message", "shared"):
            bad["context_mode"] = "must be 'per_message' or 'shared'"
        if self.n_queues < 1:
            bad["n_queues"] = "must be at least 1"
        try:
            Policy(self.engine_policy)
        except ValueError:
            bad["engine_policy"] = "unknown engine policy"
        if bad:
            raise ConfigError(bad)

    def message_sizes(self) -> list[int]:
        return list(self.sizes) if self.sizes is not None else [self.rpc_size] * self.rpcs

    def transport_config(self) -> TransportConfig:
        return TransportConfig(mtu=self.mtu, link_rate_bps=int(self.link.bandwidth_bps), offload=self.offload,
                               context_mode=ContextMode(self.context_mode), n_queues=self.n_queues,
                               engine_policy=Policy(self.engine_policy), engine_seed=self.seed)


@dataclass
class MetricsRow:
    scenario: str
    rpc_size: int
    concurrency: int
    offload: str
    variant: str
    p50_us: float
    p99_us: float
    rpcs_per_s: float
    retx: int
    abandoned: int = 0  # reported, but not a CSV column

    def csv_dict(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in CSV_COLUMNS}


def write_csv(rows: list[MetricsRow], out=None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r.csv_dict())
    text = buf.getvalue()
    if out is not None:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    return text


@dataclass
class ScenarioResult:
    rows: list
    trace: Trace
    latencies_ns: list
    payloads: list  # every application payload, requests then responses
    deliveries: dict  # message index -> delivered bytes (server side)
    delivery_counts: dict
    delivery_order: list  # message indices in server delivery order
    errors: list
    client: Endpoint
    server: Endpoint
    end_time: int

    @property
    def retransmissions(self) -> int:
        return sum(e.stats["retransmitted_segments"] for e in (self.client, self.server))


def establish_keys(variant: str, seed: int):
    """Run a handshake in-process; returns (transcript, client keys, server keys)."""
    rng = random.Random(f"keys:{seed}")
    entropy = rng.randbytes
    ca = ToyCA(entropy)
    resolver = Resolver()
    server = SdpServer("server.sdp", ca, entropy=entropy, now=EPOCH)
    client = SdpClient(ca.public_key, resolver, entropy=entropy)
    v = Variant(variant)
    if v.resumption:
        handshake(client, server, Variant.INIT_1RTT, now=EPOCH)
    elif v is not Variant.INIT_1RTT:
        publish_ticket(server, resolver, EPOCH)
    t = handshake(client, server, v, early_data=b"" if v is Variant.INIT_1RTT else b"hello", now=EPOCH)
    (c_tx, c_rx), (s_tx, s_rx) = t.keys_out
    return t, (c_tx, c_rx), (s_tx, s_rx)


class Simulation:
    def __init__(self, config: ScenarioConfig):
        config.validate()
        self.cfg = config
        self.now = 0
        self._heap: list = []
        self._seq = itertools.count()
        tc = config.transport_config()
        self.client = Endpoint(CLIENT_ADDR, CLIENT_PORT, tc, config.cost, initiator=True)
        self.server = Endpoint(SERVER_ADDR, SERVER_PORT, config.transport_config(), config.cost, initiator=False)
        self.client_peer = (SERVER_ADDR, SERVER_PORT)
        self.server_peer = (CLIENT_ADDR, CLIENT_PORT)
        self.links = {A_TO_B: Link(config.link, A_TO_B), B_TO_A: Link(config.link, B_TO_A)}
        self.trace = Trace()
        self._wakeup: dict[int, int] = {}
        self.errors: list = []

        _, (c_tx, c_rx), (s_tx, s_rx) = establish_keys(config.variant, config.seed)
        self.client.register_keys(self.client_peer, c_tx, c_rx)
        self.server.register_keys(self.server_peer, s_tx, s_rx)
        self.start_time = rtt_count(Variant(config.variant)) * 2 * config.link.delay_ns

        rng = random.Random(f"payload:{config.seed}")
        self.sizes = config.message_sizes()
        self.requests = [rng.randbytes(s) for s in self.sizes]
        self.responses: dict[int, bytes] = {}
        self._next = 0
        self._req_mid: dict[int, int] = {}  # client message id -> index
        self._resp_mid: dict[int, int] = {}  # server message id -> index
        self.started: dict[int, int] = {}
        self.latencies: dict[int, int] = {}
        self.server_got: dict[int, bytes] = {}
        self.delivery_counts: dict[int, int] = {}
        self.delivery_order: list[int] = []
        self.abandoned: set = set()
        self.in_flight = 0

    # event plumbing

    def schedule(self, t: int, fn, *args) -> None:
        heapq.heappush(self._heap, (t, next(self._seq), fn, args))

    def _endpoint(self, side: str) -> Endpoint:
        return self.client if side == "a" else self.server

    def _transmit(self, side: str, packets: list[tuple[int, bytes]]) -> None:
        direction = A_TO_B if side == "a" else B_TO_A
        link = self.links[direction]
        dest = "b" if side == "a" else "a"
        for t, pkt in packets:
            index = link.sent
            start, arrival, fate = link.transmit(t, len(pkt))
            if self.cfg.trace:
                pid = self.trace.add_packet(pkt)
                self.trace.record(start, direction, SENT, pid)
            if self.cfg.drop_hook is not None and self.cfg.drop_hook(direction, index, pkt):
                fate = DROPPED
            if fate == DROPPED:
                if self.cfg.trace:
                    self.trace.record(start, direction, DROPPED, pid)
                continue
            if self.cfg.corrupt_hook is not None:
                changed = self.cfg.corrupt_hook(direction, index, pkt)
                if changed is not None and changed != pkt:
                    pkt = changed
                    if self.cfg.trace:
                        pid = self.trace.add_packet(pkt)
                        self.trace.record(start, direction, CORRUPTED, pid)
            if fate == REORDERED and self.cfg.trace:
                self.trace.record(start, direction, REORDERED, pid)
            self.schedule(arrival, self._arrive, dest, direction, pkt, pid if self.cfg.trace else -1)

    def _arrive(self, side: str, direction: str, pkt: bytes, pid: int) -> None:
        if self.cfg.trace:
            self.trace.record(self.now, direction, DELIVERED, pid)
        ep = self._endpoint(side)
        ep.on_packet(pkt, self.now)
        self._service(side)

    def _timer(self, side: str) -> None:
        if self._wakeup.get(side) == self.now:
            del self._wakeup[side]
        ep = self._endpoint(side)
        ep.poll(self.now)
        self._service(side)

    def _service(self, side: str) -> None:
        ep = self._endpoint(side)
        for d in ep.poll_delivery():
            self._on_delivery(side, d)
        for err in ep.poll_errors():
            self._on_error(side, err)
        self._transmit(side, ep.flush(self.now))
        wake = ep.next_wakeup(self.now)
        if wake is not None:
            wake = max(wake, self.now + 1)
            pending = self._wakeup.get(side)
            if pending is None or wake < pending or pending < self.now:
                self._wakeup[side] = wake
                self.schedule(wake, self._timer, side)

    # workload

    def _start_next(self, t: int) -> None:
        while self.in_flight < self.cfg.concurrency and self._next < len(self.requests):
            i = self._next
            self._next += 1
            self.in_flight += 1
            self.started[i] = t
            mid = self.client.send_message(self.client_peer, self.requests[i], t)
            self._req_mid[mid] = i

    def _finish(self, i: int, t: int) -> None:
        self.in_flight -= 1
        self._start_next(t)

    def _on_delivery(self, side: str, d) -> None:
        if side == "b":
            i = self._req_mid.get(d.message_id)
            if i is None:
                return
            self.delivery_counts[i] = self.delivery_counts.get(i, 0) + 1
            self.delivery_order.append(i)
            self.server_got[i] = d.data
            if self.cfg.workload == "echo":
                mid = self.server.send_message(self.server_peer, d.data, d.time)
                self._resp_mid[mid] = i
                self.responses[i] = d.data
            else:
                self.latencies[i] = d.time - self.started[i]
                self._finish(i, d.time)
                self._service("a")
        else:
            i = self._resp_mid.get(d.message_id)
            if i is None:
                return
            self.latencies[i] = d.time - self.started[i]
            self._finish(i, d.time)

    def _on_error(self, side: str, err: Exception) -> None:
        self.errors.append(err)
        if not isinstance(err, RpcAbandoned):
            return
        if side == "a" and err.direction == "outbound":
            i = self._req_mid.get(err.message_id)
            if i is not None and i not in self.latencies and i not in self.abandoned:
                self.abandoned.add(i)
                self._finish(i, self.now)
        elif side == "b" and err.direction == "outbound":
            i = self._resp_mid.get(err.message_id)
            if i is not None and i not in self.latencies and i not in self.abandoned:
                self.abandoned.add(i)
                self._finish(i, self.now)
                self._service("a")

    def run(self) -> ScenarioResult:
        self.now = self.start_time
        self._start_next(self.start_time)
        self._service("a")
        while self._heap:
            t, _, fn, args = heapq.heappop(self._heap)
            if t > self.cfg.max_sim_ns:
                break
            self.now = t
            fn(*args)
        return self._result()

    def _result(self) -> ScenarioResult:
        lat = [self.latencies[i] for i in sorted(self.latencies)]
        if lat:
            p50, p99 = (float(x) / 1000 for x in np.percentile(np.array(lat, dtype=np.float64), [50, 99]))
        else:
            p50 = p99 = math.nan
        done = [self.started[i] + self.latencies[i] for i in self.latencies]
        span = (max(done) - self.start_time) if done else 0
        rate = len(lat) / (span / 1e9) if span > 0 else 0.0
        retx = sum(e.stats["retransmitted_segments"] for e in (self.client, self.server))
        abandoned = sum(e.stats["abandoned"] for e in (self.client, self.server))
        cfg = self.cfg
        row = MetricsRow(cfg.name, cfg.rpc_size if cfg.sizes is None else max(cfg.sizes, default=0),
                         cfg.concurrency, "on" if cfg.offload else "off", cfg.variant,
                         round(p50, 3), round(p99, 3), round(rate, 1), retx, abandoned)
        payloads = list(self.requests) + [self.responses[i] for i in sorted(self.responses)]
        return ScenarioResult([row], self.trace, lat, payloads, self.server_got, self.delivery_counts,
                              self.delivery_order, self.errors, self.client, self.server, self.now)


def run_scenario(config: ScenarioConfig) -> ScenarioResult:
    return Simulation(config).run()


def count_packets(trace: Trace, direction: str | None = None, ptype: PacketType | None = None,
                  annotation: str = SENT) -> int:
    n = 0
    for e in trace.events:
        if e.annotation != annotation or (direction is not None and e.direction != direction):
            continue
        if ptype is not None:
            pkt = trace.packets[e.packet]
            h = decode_overlaid_header(pkt[NETWORK_HEADER_LEN:PACKET_HEADER_LEN])
            if h.packet_type is not ptype:
                continue
        n += 1
    return n


def config_from_dict(d: dict) -> ScenarioConfig:
    """Build a ScenarioConfig from JSON-style data, reporting unknown fields."""
    d = dict(d)
    known = {f.name for f in fields(ScenarioConfig)} - {"drop_hook", "corrupt_hook"}
    link = d.pop("link", {}) or {}
    cost = d.pop("cost", {}) or {}
    bad = {k: "unknown field" for k in d if k not in known}
    bad.update({f"link.{k}": "unknown field" for k in link if k not in {f.name for f in fields(LinkModel)}})
    bad.update({f"cost.{k}": "unknown field" for k in cost if k not in {f.name for f in fields(CostModel)}})
    if bad:
        raise ConfigError(bad)
    cfg = ScenarioConfig(**d, link=LinkModel(**link), cost=CostModel(**cost))
    cfg.validate()
    return cfg
