"""
The SDP endpoint: message send path, receiver-driven grants, reassembly and
retransmission.

The endpoint is sans-IO. Every entry point takes the current simulated time in
nanoseconds; outgoing packets are collected and handed out by :meth:`Endpoint.flush`,
and complete messages are handed out by :meth:`Endpoint.poll_delivery`. The
network harness drives it, but unit tests can call the handlers directly.

Sending: a message is cut into TSO segments of at most ``max_tso_payload``
plaintext bytes, each covered by one record. Segments are pushed from three
submitter contexts, mirroring the kernel implementation: the application
(inline, unscheduled bytes), the pacer (token bucket, SRPT across messages)
and grant processing (softirq). In offload mode each context submits to the
NIC driver; with per-message flow contexts every segment of a message lands
in that context's queue, with a shared context the submitting context picks
the queue.

Receiving: packets are slotted into per-segment assemblies by IPID (or by
original_offset for retransmissions). A complete assembly is one record; it
is opened, its framing headers stripped and the chunks merged into the
message buffer. The message is delivered whole.
"""

from __future__ import annotations

import bisect
import enum
import logging
import threading
from collections import deque
from dataclasses import dataclass, field

from .errors import (
    AuthFailure,
    InvariantViolation,
    MalformedPacket,
    MessageTooLarge,
    NoKeys,
    PoolExhausted,
    ReplayedRecord,
    RpcAbandoned,
    UnknownRpc,
)
from .nic import EngineSchedule, FlowContext, Nic, Policy, TsoSegment, tso_split
from .record import SealedRecord, SessionKeys, open_segment, seal_segment
from .wire import (
    MAX_MESSAGE_LENGTH,
    PACKET_HEADER_LEN,
    RECORD_HEADER_LEN,
    SDP_PROTOCOL_NUMBER,
    TAG_LEN,
    NetworkHeader,
    OverlaidHeader,
    PacketType,
    build_segment_plaintext,
    data_length_from_record,
    decode_grant,
    decode_packet,
    decode_record_header,
    decode_resend,
    encode_grant,
    encode_packet,
    encode_resend,
    framed_length,
    parse_segment_plaintext,
    payload_capacity,
)

log = logging.getLogger(__name__)


class Submitter(enum.IntEnum):
    APP = 0
    PACER = 1
    SOFTIRQ = 2


class ContextMode(str, enum.Enum):
    PER_MESSAGE = "per_message"
    SHARED = "shared"


class RpcState(enum.Enum):
    WAIT_CONTEXT = "wait_context"
    SENDING = "sending"
    AWAIT_GRANT = "await_grant"
    COMPLETE = "complete"


@dataclass
class TransportConfig:
    mtu: int = 1500
    max_tso_payload: int = 61440
    unscheduled_limit: int = 65536
    grant_window: int = 131072
    retransmit_timeout_ns: int = 10_000_000
    max_retries: int = 5
    link_rate_bps: int = 100_000_000_000
    pacer_bucket_bytes: int | None = None
    offload: bool = True
    context_mode: ContextMode = ContextMode.PER_MESSAGE
    n_queues: int = 4
    pool_size: int = 64
    protocol_number: int = SDP_PROTOCOL_NUMBER
    engine_policy: Policy = Policy.RANDOM
    engine_seed: int = 0

    def __post_init__(self):
        self.context_mode = ContextMode(self.context_mode)
        self.engine_policy = Policy(self.engine_policy)
        if self.grant_window < self.max_tso_payload:
            raise InvariantViolation("grant_window must cover at least one TSO segment")
        if framed_length(self.max_tso_payload, payload_capacity(self.mtu)) + TAG_LEN > 0xFFFF:
            raise InvariantViolation("max_tso_payload does not fit one record")

    @property
    def capacity(self) -> int:
        return payload_capacity(self.mtu)


@dataclass
class CostModel:
    """Simulated CPU time charged for crypto work, in nanoseconds."""

    crypto_per_op_ns: int = 0
    crypto_per_byte_ns: float = 0.0
    offload_per_segment_ns: int = 0

    def software(self, nbytes: int) -> int:
        return self.crypto_per_op_ns + round(self.crypto_per_byte_ns * nbytes)


@dataclass
class SegmentPlan:
    tso_offset: int
    length: int
    record_seq: int
    sent: bool = False
    transmissions: int = 0

    @property
    def end(self) -> int:
        return self.tso_offset + self.length


@dataclass(eq=False)
class OutboundRpc:
    message_id: int
    peer: tuple
    plaintext: bytes
    segments: list
    granted: int
    state: RpcState = RpcState.SENDING
    flow_context: FlowContext | None = None
    sent_watermark: int = 0
    next_index: int = 0
    last_activity: int = 0
    retries: int = 0
    created: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def message_length(self) -> int:
        return len(self.plaintext)

    @property
    def remaining(self) -> int:
        return self.message_length - self.sent_watermark

    def next_eligible(self) -> SegmentPlan | None:
        if self.state is RpcState.WAIT_CONTEXT or self.next_index >= len(self.segments):
            return None
        seg = self.segments[self.next_index]
        if self.next_index == 0 or seg.end <= self.granted:
            return seg
        return None


class IntervalSet:
    """Disjoint half-open intervals, merged on insert."""

    def __init__(self):
        self._starts: list[int] = []
        self._ends: list[int] = []
        self.total = 0

    def add(self, start: int, end: int) -> int:
        """Insert [start, end); returns the number of newly covered bytes."""
        if end <= start:
            return 0
        before = self.total
        i = bisect.bisect_left(self._ends, start)
        j = bisect.bisect_right(self._starts, end)
        if i < j:
            start = min(start, self._starts[i])
            end = max(end, self._ends[j - 1])
            self.total -= sum(e - s for s, e in zip(self._starts[i:j], self._ends[i:j]))
        self._starts[i:j] = [start]
        self._ends[i:j] = [end]
        self.total += end - start
        return self.total - before

    def overlaps(self, start: int, end: int) -> bool:
        i = bisect.bisect_right(self._ends, start)
        return i < len(self._starts) and self._starts[i] < end

    def covers(self, start: int, end: int) -> bool:
        i = bisect.bisect_right(self._starts, start) - 1
        return i >= 0 and self._ends[i] >= end

    def gaps(self, limit: int) -> list[tuple[int, int]]:
        out, pos = [], 0
        for s, e in zip(self._starts, self._ends):
            if s >= limit:
                break
            if s > pos:
                out.append((pos, s))
            pos = max(pos, e)
        if pos < limit:
            out.append((pos, limit))
        return out

    def __iter__(self):
        return iter(zip(self._starts, self._ends))


@dataclass
class SegmentAssembly:
    """Packets of one sealed TSO segment, keyed by byte position in the record."""

    expected_total: int | None = None
    record_seq: int | None = None
    slots: dict = field(default_factory=dict)
    received: int = 0

    def add(self, pos: int, payload: bytes) -> None:
        if pos in self.slots:
            return
        self.slots[pos] = payload
        self.received += len(payload)

    def complete(self) -> bool:
        return self.expected_total is not None and self.received >= self.expected_total

    def assemble(self) -> bytes:
        out = bytearray()
        for pos in sorted(self.slots):
            if pos != len(out):
                raise MalformedPacket("segment slots are not contiguous")
            out += self.slots[pos]
        if len(out) != self.expected_total:
            raise MalformedPacket("segment length mismatch")
        return bytes(out)


@dataclass(eq=False)
class InboundRpc:
    message_id: int
    peer: tuple
    message_length: int
    granted: int
    buffer: bytearray
    received_ranges: IntervalSet = field(default_factory=IntervalSet)
    segment_assembly: dict = field(default_factory=dict)
    done_offsets: set = field(default_factory=set)
    delivered: bool = False
    last_progress: int = 0
    retries: int = 0
    first_seen: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def remaining(self) -> int:
        return self.message_length - self.received_ranges.total


@dataclass
class Delivery:
    peer: tuple
    message_id: int
    data: bytes
    time: int


@dataclass
class Effects:
    deliveries: list = field(default_factory=list)
    control: list = field(default_factory=list)
    submitted: list = field(default_factory=list)


class Endpoint:
    def __init__(self, addr: int, port: int, config: TransportConfig | None = None,
                 cost: CostModel | None = None, *, initiator: bool = True,
                 nic: Nic | None = None):
        self.addr = addr
        self.port = port
        self.config = config or TransportConfig()
        self.cost = cost or CostModel()
        cfg = self.config
        self.nic = nic or Nic(cfg.n_queues, cfg.pool_size, cfg.mtu,
                              EngineSchedule(cfg.engine_seed, cfg.engine_policy))
        self._next_id = 1 if initiator else 2
        self._keys: dict[tuple, tuple[SessionKeys, SessionKeys]] = {}
        self._shared_ctx: dict[tuple, FlowContext] = {}
        self.outbound: dict[tuple, OutboundRpc] = {}
        self.inbound: dict[tuple, InboundRpc] = {}
        self.completed_inbound: dict[tuple, int] = {}
        self._awaiting_ctx: deque[OutboundRpc] = deque()
        self._deliveries: deque[Delivery] = deque()
        self._errors: deque[Exception] = deque()
        self._control: list[tuple[int, bytes]] = []
        self._cpu_free = 0
        max_seg = self._segment_wire_bytes(cfg.max_tso_payload)
        self.bucket = max(cfg.pacer_bucket_bytes or 2 * max_seg, max_seg)
        self.tokens = float(self.bucket)
        self._last_refill = 0
        self._rate = cfg.link_rate_bps / 8e9  # bytes per ns
        self.stats = {
            "messages_sent": 0, "messages_delivered": 0, "segments_submitted": 0,
            "retransmitted_segments": 0, "resends_sent": 0, "resends_received": 0,
            "grants_sent": 0, "acks_sent": 0, "auth_failures": 0, "replays": 0,
            "spurious": 0, "malformed": 0, "invalid_tags": 0, "abandoned": 0,
            "bytes_sent": 0, "bytes_granted": 0, "data_packets": 0,
        }

    # keys and identity

    @property
    def capacity(self) -> int:
        return self.config.capacity

    def register_keys(self, peer: tuple, tx: SessionKeys, rx: SessionKeys) -> None:
        """Activate encryption toward ``peer`` (the setsockopt step)."""
        self._keys[peer] = (tx, rx)
        if self.config.offload and self.config.context_mode is ContextMode.SHARED:
            self._shared_ctx[peer] = self.nic.shared_context(self._five_tuple(peer), tx, tx.tx_record_seq)

    def _five_tuple(self, peer: tuple) -> tuple:
        return (self.addr, peer[0], self.config.protocol_number, self.port, peer[1])

    def _alloc_id(self) -> int:
        mid = self._next_id
        self._next_id += 2
        return mid

    # send path

    def send_message(self, peer: tuple, plaintext: bytes, now: int = 0) -> int:
        if len(plaintext) > MAX_MESSAGE_LENGTH:
            raise MessageTooLarge(f"{len(plaintext)} bytes exceeds {MAX_MESSAGE_LENGTH}")
        if peer not in self._keys:
            raise NoKeys(f"no session keys registered for {peer}")
        tx, _ = self._keys[peer]
        plaintext = bytes(plaintext)
        size = self.config.max_tso_payload
        offsets = list(range(0, len(plaintext), size)) or [0]
        first_seq = tx.allocate(len(offsets))
        segments = [SegmentPlan(off, min(size, len(plaintext) - off), first_seq + i)
                    for i, off in enumerate(offsets)]
        granted = min(len(plaintext), max(self.config.unscheduled_limit, segments[0].end))
        rpc = OutboundRpc(self._alloc_id(), peer, plaintext, segments, granted,
                          last_activity=now, created=now)
        self.outbound[(peer, rpc.message_id)] = rpc
        self.stats["messages_sent"] += 1
        if self._needs_pool():
            try:
                self._bind_context(rpc)
            except PoolExhausted:
                rpc.state = RpcState.WAIT_CONTEXT
                self._awaiting_ctx.append(rpc)
                return rpc.message_id
        self._push_direct(rpc, Submitter.APP, now)
        return rpc.message_id

    def _needs_pool(self) -> bool:
        return self.config.offload and self.config.context_mode is ContextMode.PER_MESSAGE

    def _bind_context(self, rpc: OutboundRpc) -> None:
        ctx = self.nic.pool.allocate_context(rpc.message_id, self._five_tuple(rpc.peer))
        self.nic.install(ctx, self._keys[rpc.peer][0], rpc.segments[0].record_seq)
        rpc.flow_context = ctx
        rpc.state = RpcState.SENDING

    def _segment_wire_bytes(self, data_len: int) -> int:
        sealed = RECORD_HEADER_LEN + framed_length(data_len, self.capacity) + TAG_LEN
        return sealed + PACKET_HEADER_LEN * -(-sealed // self.capacity)

    def _refill(self, now: int) -> None:
        if now > self._last_refill:
            self.tokens = min(self.bucket, self.tokens + (now - self._last_refill) * self._rate)
            self._last_refill = now

    def _push_direct(self, rpc: OutboundRpc, who: Submitter, now: int) -> list[TsoSegment]:
        """Push from the syscall or softirq context while the pacer has headroom."""
        self._refill(now)
        out = []
        while self.tokens >= 0:
            seg = rpc.next_eligible()
            if seg is None:
                break
            out.append(self._submit(rpc, seg, who, now))
        return out

    def _submit(self, rpc: OutboundRpc, plan: SegmentPlan, who: Submitter, now: int,
                retransmit: bool = False) -> TsoSegment:
        cfg = self.config
        tx, _ = self._keys[rpc.peer]
        with rpc.lock:
            seq = tx.allocate(1) if retransmit else plan.record_seq
            chunk = rpc.plaintext[plan.tso_offset:plan.end]
            plaintext = build_segment_plaintext(chunk, self.capacity)
            header = OverlaidHeader(self.port, rpc.peer[1], rpc.message_id, rpc.message_length,
                                    tso_offset=plan.tso_offset)
            net = NetworkHeader(self.addr, rpc.peer[0], protocol_number=cfg.protocol_number)
            seg = TsoSegment(net, header, seq, per_packet=retransmit)
            queue = int(who) % cfg.n_queues
            if cfg.offload:
                seg.plaintext = plaintext
                seg.not_before = self._charge(now, self.cost.offload_per_segment_ns)
                if cfg.context_mode is ContextMode.PER_MESSAGE:
                    self.nic.driver_submit(seg, rpc.flow_context)
                else:
                    self.nic.driver_submit(seg, self._shared_ctx[rpc.peer], queue)
            else:
                seg.record = seal_segment(tx, seq, plaintext).to_bytes()
                seg.not_before = self._charge(now, self.cost.software(len(plaintext)))
                self.nic.submit_sealed(seg, queue)
            if not plan.sent:
                plan.sent = True
                rpc.next_index += 1
                rpc.sent_watermark += plan.length
                self.stats["bytes_sent"] += plan.length
            plan.transmissions += 1
            rpc.last_activity = now
            rpc.state = RpcState.SENDING if rpc.next_eligible() else RpcState.AWAIT_GRANT
        self.tokens -= self._segment_wire_bytes(plan.length)
        self.stats["segments_submitted"] += 1
        if retransmit:
            self.stats["retransmitted_segments"] += 1
        return seg

    def _charge(self, now: int, cost: int) -> int:
        """Account CPU time; returns when the work finishes."""
        start = max(now, self._cpu_free)
        self._cpu_free = start + cost
        return self._cpu_free

    def _srpt_head(self):
        best = None
        for rpc in self.outbound.values():
            seg = rpc.next_eligible()
            if seg is not None:
                k = (rpc.remaining, rpc.message_id)
                if best is None or k < best[0]:
                    best = (k, rpc, seg)
        return None if best is None else best[1:]

    def pacer_tick(self, now: int) -> list[TsoSegment]:
        """Submit eligible segments in SRPT order while tokens last."""
        self._refill(now)
        out = []
        while True:
            head = self._srpt_head()
            if head is None:
                break
            rpc, seg = head
            if self.tokens < self._segment_wire_bytes(seg.length):
                break
            out.append(self._submit(rpc, seg, Submitter.PACER, now))
        return out

    def on_grant(self, peer: tuple, message_id: int, granted_offset: int, now: int) -> list[TsoSegment]:
        rpc = self.outbound.get((peer, message_id))
        if rpc is None:
            raise UnknownRpc(f"grant for unknown rpc {message_id}")
        rpc.last_activity = now
        rpc.retries = 0
        new = min(granted_offset, rpc.message_length)
        if new <= rpc.granted:
            return []
        rpc.granted = new
        return self._push_direct(rpc, Submitter.SOFTIRQ, now)

    def on_resend(self, peer: tuple, message_id: int, offset: int, length: int, now: int) -> list[TsoSegment]:
        rpc = self.outbound.get((peer, message_id))
        if rpc is None:
            raise UnknownRpc(f"resend for unknown rpc {message_id}")
        self.stats["resends_received"] += 1
        rpc.last_activity = now
        rpc.retries = 0
        end = offset + length
        out = []
        for plan in rpc.segments:
            hit = plan.tso_offset < end and offset < plan.end or plan.tso_offset == offset
            if hit and plan.sent:
                out.append(self._submit(rpc, plan, Submitter.SOFTIRQ, now, retransmit=True))
        # A RESEND also implies a grant up to its end; covers a lost GRANT.
        if end > rpc.granted:
            rpc.granted = min(end, rpc.message_length)
            out.extend(self._push_direct(rpc, Submitter.SOFTIRQ, now))
        return out

    def on_ack(self, peer: tuple, message_id: int, now: int) -> None:
        rpc = self.outbound.pop((peer, message_id), None)
        if rpc is None:
            return
        rpc.state = RpcState.COMPLETE
        self._release(rpc)

    def _release(self, rpc: OutboundRpc) -> None:
        if rpc.flow_context is not None:
            self.nic.pool.release(rpc.flow_context)
            rpc.flow_context = None
        while self._awaiting_ctx:
            waiting = self._awaiting_ctx[0]
            if waiting.state is not RpcState.WAIT_CONTEXT:
                self._awaiting_ctx.popleft()
                continue
            try:
                self._bind_context(waiting)
            except PoolExhausted:
                break
            self._awaiting_ctx.popleft()

    def sender_timer(self, now: int) -> list[TsoSegment]:
        """Re-poke receivers that went silent; abandon after max_retries."""
        timeout = 2 * self.config.retransmit_timeout_ns
        out = []
        for key, rpc in list(self.outbound.items()):
            if rpc.state is RpcState.WAIT_CONTEXT or rpc.next_eligible() is not None:
                continue
            if now - rpc.last_activity < timeout:
                continue
            if rpc.retries >= self.config.max_retries:
                del self.outbound[key]
                self._release(rpc)
                self.stats["abandoned"] += 1
                self._errors.append(RpcAbandoned(rpc.peer, rpc.message_id, "outbound"))
                continue
            rpc.retries += 1
            out.append(self._submit(rpc, rpc.segments[0], Submitter.SOFTIRQ, now, retransmit=True))
        return out

    # receive path

    def on_packet(self, data: bytes, now: int) -> Effects:
        fx = Effects()
        n_ctrl = len(self._control)
        n_del = len(self._deliveries)
        try:
            net, hdr, payload = decode_packet(data, self.config.protocol_number)
        except MalformedPacket:
            self.stats["malformed"] += 1
            return fx
        peer = (net.src_addr, hdr.src_port)
        try:
            if hdr.packet_type is PacketType.DATA:
                self._on_data(peer, net, hdr, payload, now)
            elif hdr.packet_type is PacketType.GRANT:
                fx.submitted = self.on_grant(peer, hdr.message_id, decode_grant(payload), now)
            elif hdr.packet_type is PacketType.RESEND:
                off, length = decode_resend(payload)
                fx.submitted = self.on_resend(peer, hdr.message_id, off, length, now)
            elif hdr.packet_type is PacketType.ACK:
                self.on_ack(peer, hdr.message_id, now)
        except UnknownRpc as exc:
            log.debug("ignoring control packet: %s", exc)
        except MalformedPacket:
            self.stats["malformed"] += 1
        fx.control = [p for _, p in self._control[n_ctrl:]]
        fx.deliveries = list(self._deliveries)[n_del:]
        return fx

    def _on_data(self, peer, net, hdr, payload, now):
        key = (peer, hdr.message_id)
        if key in self.completed_inbound:
            # Late or spurious copy of a delivered message; the ACK may have been lost.
            self.stats["spurious"] += 1
            self._send_control(peer, hdr.message_id, hdr.message_length, PacketType.ACK, b"", now)
            return
        if peer not in self._keys:
            self.stats["malformed"] += 1
            return
        rpc = self.inbound.get(key)
        if rpc is None:
            granted = min(hdr.message_length, self.config.unscheduled_limit)
            rpc = InboundRpc(hdr.message_id, peer, hdr.message_length, granted,
                             bytearray(hdr.message_length), last_progress=now, first_seen=now)
            self.inbound[key] = rpc
            self.stats["bytes_granted"] += granted
        if hdr.message_length != rpc.message_length:
            self.stats["malformed"] += 1
            return
        if hdr.tso_offset in rpc.done_offsets:
            self.stats["spurious"] += 1
            return
        pos = hdr.original_offset if hdr.retransmit_flag else net.ipid * self.capacity
        akey = (hdr.tso_offset, hdr.retransmit_flag)
        with rpc.lock:
            asm = rpc.segment_assembly.setdefault(akey, SegmentAssembly())
            if pos == 0:
                rh = decode_record_header(payload)
                if asm.record_seq is not None and rh.explicit_sequence != asm.record_seq:
                    # A newer retransmission round; start over.
                    asm = rpc.segment_assembly[akey] = SegmentAssembly()
                asm.record_seq = rh.explicit_sequence
                asm.expected_total = RECORD_HEADER_LEN + rh.length
            asm.add(pos, payload)
            rpc.last_progress = now
            rpc.retries = 0
            if asm.complete():
                del rpc.segment_assembly[akey]
                self._finish_segment(rpc, hdr.tso_offset, asm, now)
        if key in self.inbound:
            self.grant_scheduler_tick(now)

    def _finish_segment(self, rpc: InboundRpc, tso_offset: int, asm: SegmentAssembly, now: int) -> None:
        _, rx = self._keys[rpc.peer]
        try:
            record = SealedRecord.from_bytes(asm.assemble())
        except MalformedPacket:
            self._auth_failed(rpc, tso_offset, asm.expected_total - RECORD_HEADER_LEN, now)
            return
        t = self._charge(now, self.cost.software(record.header.ciphertext_length))
        try:
            plaintext = open_segment(rx, record)
        except AuthFailure:
            self._auth_failed(rpc, tso_offset, record.header.length, now)
            return
        except ReplayedRecord:
            self.stats["replays"] += 1
            return
        try:
            chunks = parse_segment_plaintext(plaintext)
        except MalformedPacket:
            self.stats["malformed"] += 1
            return
        total = sum(len(c) for _, c in chunks)
        if tso_offset + total > rpc.message_length:
            self.stats["malformed"] += 1
            return
        rpc.done_offsets.add(tso_offset)
        for key in [k for k in rpc.segment_assembly if k[0] == tso_offset]:
            del rpc.segment_assembly[key]
        if total and rpc.received_ranges.covers(tso_offset, tso_offset + total):
            self.stats["spurious"] += 1
            return
        for off, chunk in chunks:
            start = tso_offset + off
            rpc.buffer[start:start + len(chunk)] = chunk
        rpc.received_ranges.add(tso_offset, tso_offset + total)
        if rpc.received_ranges.total == rpc.message_length:
            self._deliver(rpc, t)

    def _auth_failed(self, rpc: InboundRpc, tso_offset: int, record_length: int, now: int) -> None:
        self.stats["auth_failures"] += 1
        length = max(1, data_length_from_record(record_length, self.capacity))
        length = min(length, max(1, rpc.message_length - tso_offset))
        self._send_control(rpc.peer, rpc.message_id, rpc.message_length, PacketType.RESEND,
                           encode_resend(tso_offset, length), now)
        self.stats["resends_sent"] += 1

    def _deliver(self, rpc: InboundRpc, t: int) -> None:
        key = (rpc.peer, rpc.message_id)
        rpc.delivered = True
        del self.inbound[key]
        self.completed_inbound[key] = t
        self._deliveries.append(Delivery(rpc.peer, rpc.message_id, bytes(rpc.buffer), t))
        self.stats["messages_delivered"] += 1
        self._send_control(rpc.peer, rpc.message_id, rpc.message_length, PacketType.ACK, b"", t)
        self.stats["acks_sent"] += 1

    def grant_scheduler_tick(self, now: int) -> list[bytes]:
        """Extend grants, shortest remaining message first."""
        out = []
        order = sorted(self.inbound.values(), key=lambda r: (r.remaining, r.message_id))
        for rpc in order:
            if rpc.granted >= rpc.message_length:
                continue
            target = min(rpc.message_length, rpc.received_ranges.total + self.config.grant_window)
            if target <= rpc.granted:
                continue
            self.stats["bytes_granted"] += target - rpc.granted
            rpc.granted = target
            out.append(self._send_control(rpc.peer, rpc.message_id, rpc.message_length,
                                          PacketType.GRANT, encode_grant(target), now))
            self.stats["grants_sent"] += 1
        return out

    def retransmit_timer(self, now: int) -> list[bytes]:
        """Ask for missing granted ranges of stalled inbound messages."""
        out = []
        for key, rpc in list(self.inbound.items()):
            if now - rpc.last_progress < self.config.retransmit_timeout_ns:
                continue
            if rpc.retries >= self.config.max_retries:
                del self.inbound[key]
                self.stats["abandoned"] += 1
                self._errors.append(RpcAbandoned(rpc.peer, rpc.message_id, "inbound"))
                continue
            rpc.retries += 1
            rpc.last_progress = now
            limit = min(rpc.granted, rpc.message_length)
            gaps = rpc.received_ranges.gaps(limit) if limit else [(0, 0)]
            for start, end in gaps:
                out.append(self._send_control(rpc.peer, rpc.message_id, rpc.message_length,
                                              PacketType.RESEND, encode_resend(start, end - start), now))
                self.stats["resends_sent"] += 1
        return out

    def _send_control(self, peer, message_id, message_length, ptype, payload, t) -> bytes:
        header = OverlaidHeader(self.port, peer[1], message_id, message_length, packet_type=ptype)
        net = NetworkHeader(self.addr, peer[0], protocol_number=self.config.protocol_number)
        pkt = encode_packet(net, header, payload)
        self._control.append((t, pkt))
        return pkt

    # driving

    def poll(self, now: int) -> None:
        """Run everything time-driven: pacer, receiver and sender timers."""
        self.pacer_tick(now)
        self.retransmit_timer(now)
        self.sender_timer(now)

    def next_wakeup(self, now: int) -> int | None:
        times = []
        head = self._srpt_head()
        if head is not None:
            self._refill(now)
            deficit = self._segment_wire_bytes(head[1].length) - self.tokens
            times.append(now if deficit <= 0 else now + int(-(-deficit // self._rate)))
        timeout = self.config.retransmit_timeout_ns
        for rpc in self.inbound.values():
            times.append(rpc.last_progress + timeout)
        for rpc in self.outbound.values():
            if rpc.state is not RpcState.WAIT_CONTEXT and rpc.next_eligible() is None:
                times.append(rpc.last_activity + 2 * timeout)
        return max(now, min(times)) if times else None

    def flush(self, now: int) -> list[tuple[int, bytes]]:
        """Run the NIC engine over queued descriptors; return timed wire packets.

        Data packets come first, then control packets generated since the last flush.
        """
        out = []
        for em in self.nic.drain():
            if not em.tag_valid:
                self.stats["invalid_tags"] += 1
            t = max(now, em.segment.not_before)
            for pkt in tso_split(em.segment, self.config.mtu):
                out.append((t, pkt.to_bytes()))
                self.stats["data_packets"] += 1
        out.extend(self._control)
        self._control = []
        return out

    def poll_delivery(self) -> list[Delivery]:
        out = list(self._deliveries)
        self._deliveries.clear()
        return out

    def poll_errors(self) -> list[Exception]:
        out = list(self._errors)
        self._errors.clear()
        return out

    def metrics(self) -> dict:
        snap = dict(self.stats)
        snap.update(outbound=len(self.outbound), inbound=len(self.inbound),
                    contexts_in_use=self.nic.pool.in_use(), resyncs=self.nic.resyncs_submitted)
        return snap
