"""
Transmit-side NIC emulation: descriptor queues, the TLS crypto engine with
flow contexts and resync descriptors, and TSO splitting.

The driver keeps a mirror of each flow context's expected record sequence.
When a segment arrives out of sequence it puts a RESYNC descriptor ahead of the
DATA descriptor in the same queue. The engine reads queues in an order chosen
by an :class:`EngineSchedule`; reading across queues is not atomic, which is
how a context shared between queues ends up tagging a record under the wrong
sequence.
"""

from __future__ import annotations

import enum
import itertools
import random
import threading
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

from .errors import ContextNotInstalled, PoolExhausted
from .record import SessionKeys, seal_segment
from .wire import (
    PACKET_HEADER_LEN,
    RECORD_HEADER_LEN,
    TAG_LEN,
    NetworkHeader,
    OverlaidHeader,
    RecordHeader,
    encode_packet,
    payload_capacity,
)

DEFAULT_POOL_SIZE = 64
DEFAULT_QUEUES = 4


@dataclass
class TsoSegment:
    """Pre-split transmit unit.

    In offload mode ``plaintext`` is set and the engine produces the record.
    In software-crypto mode ``record`` already holds the sealed bytes.
    ``per_packet`` marks a retransmission: the driver hands the NIC one
    descriptor per packet, each with its own original_offset.
    """

    net: NetworkHeader
    header: OverlaidHeader
    record_seq: int
    plaintext: bytes | None = None
    record: bytes | None = None
    per_packet: bool = False
    not_before: int = 0

    @property
    def sealed_length(self) -> int:
        if self.record is not None:
            return len(self.record)
        return RECORD_HEADER_LEN + len(self.plaintext) + TAG_LEN


@dataclass
class WirePacket:
    net: NetworkHeader
    header: OverlaidHeader
    payload: bytes

    def to_bytes(self) -> bytes:
        return encode_packet(self.net, self.header, self.payload)


@dataclass
class FlowContext:
    context_id: int
    assigned_queue: int
    keys: SessionKeys | None = None
    expected_record_seq: int = 0
    bound_rpc: int | None = None
    five_tuple: tuple | None = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def free(self) -> bool:
        return self.bound_rpc is None


class DescriptorKind(enum.Enum):
    DATA = "data"
    RESYNC = "resync"


@dataclass
class Descriptor:
    kind: DescriptorKind
    context_id: int | None
    record_seq: int  # claimed seq for DATA, new seq for RESYNC
    segment: TsoSegment | None = None


@dataclass
class TxQueue:
    index: int
    descriptors: deque = field(default_factory=deque)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def push(self, *descs: Descriptor) -> None:
        with self.lock:
            self.descriptors.extend(descs)

    def __len__(self):
        return len(self.descriptors)


class Policy(enum.Enum):
    ROUND_ROBIN = "round_robin"
    RANDOM = "random"
    ADVERSARIAL = "adversarial"


class EngineSchedule:
    """Chooses which non-empty queue the engine reads next.

    ADVERSARIAL follows an explicit queue order when given one (used for
    exhaustive enumeration) and falls back to seeded random choice.
    """

    def __init__(self, seed: int = 0, policy: Policy = Policy.RANDOM, order: Sequence[int] | None = None):
        self.seed = seed
        self.policy = Policy(policy)
        self.order = list(order) if order is not None else None
        self._rng = random.Random(seed)
        self._rr = 0
        self._pos = 0

    def choose(self, ready: Sequence[int], n_queues: int) -> int:
        if self.policy is Policy.ROUND_ROBIN:
            for i in range(n_queues):
                q = (self._rr + i) % n_queues
                if q in ready:
                    self._rr = q + 1
                    return q
        if self.policy is Policy.ADVERSARIAL and self.order is not None and self._pos < len(self.order):
            q = self.order[self._pos]
            self._pos += 1
            if q not in ready:
                raise ValueError(f"schedule names empty queue {q}")
            return q
        return self._rng.choice(sorted(ready))


@dataclass
class EmittedSegment:
    segment: TsoSegment
    record: bytes
    context_id: int | None
    claimed_seq: int
    engine_seq: int
    tag_valid: bool


def tso_split(segment: TsoSegment, mtu: int) -> list[WirePacket]:
    """Cut a sealed segment into MTU-sized packets, replicating the header.

    IPIDs count 0..n-1. Control segments with an empty payload still produce
    one packet. Retransmissions (``per_packet``) are cut the same way, but
    each packet carries its own original_offset since the driver submits them
    as individual descriptors.
    """
    if segment.record is None:
        raise ValueError("segment has not been sealed")
    cap = payload_capacity(mtu)
    data = segment.record
    n = max(1, -(-len(data) // cap))
    packets = []
    for i in range(n):
        header = segment.header
        if segment.per_packet:
            header = replace(header, retransmit_flag=True, original_offset=i * cap)
        payload = data[i * cap:(i + 1) * cap]
        net = replace(segment.net, ipid=i, total_length=PACKET_HEADER_LEN + len(payload))
        packets.append(WirePacket(net, header, payload))
    return packets


class ContextPool:
    """Flow contexts allocated per message and recycled per five-tuple."""

    def __init__(self, size: int = DEFAULT_POOL_SIZE, n_queues: int = DEFAULT_QUEUES):
        self.size = size
        self.n_queues = n_queues
        self.contexts: dict[int, FlowContext] = {}
        self._next_queue = 0
        self._lock = threading.Lock()

    def allocate_context(self, message_id: int, five_tuple: tuple) -> FlowContext:
        with self._lock:
            free = [c for c in self.contexts.values() if c.free]
            # Prefer the most recently used context of the same five-tuple.
            same = [c for c in free if c.five_tuple == five_tuple]
            if same:
                ctx = same[-1]
            elif len(self.contexts) < self.size:
                ctx = FlowContext(len(self.contexts), 0)
                self.contexts[ctx.context_id] = ctx
            elif free:
                ctx = free[0]
            else:
                raise PoolExhausted(f"all {self.size} flow contexts are bound")
            ctx.bound_rpc = message_id
            ctx.five_tuple = five_tuple
            ctx.assigned_queue = self._take_queue()
            # Move to the end so "most recently used" ordering holds.
            self.contexts[ctx.context_id] = self.contexts.pop(ctx.context_id)
            return ctx

    def release(self, ctx: FlowContext) -> None:
        with self._lock:
            ctx.bound_rpc = None

    def _take_queue(self) -> int:
        q = self._next_queue
        self._next_queue = (q + 1) % self.n_queues
        return q

    def in_use(self) -> int:
        return sum(1 for c in self.contexts.values() if not c.free)


class Nic:
    def __init__(self, n_queues: int = DEFAULT_QUEUES, pool_size: int = DEFAULT_POOL_SIZE,
                 mtu: int = 1500, schedule: EngineSchedule | None = None):
        self.queues = [TxQueue(i) for i in range(n_queues)]
        self.pool = ContextPool(pool_size, n_queues)
        self.mtu = mtu
        self.schedule = schedule or EngineSchedule()
        # Device-internal state, one entry per installed context.
        self._engine: dict[int, list] = {}
        self._shared_ids = itertools.count(1 << 20)
        self.resyncs_submitted = 0

    # driver side

    def install(self, ctx: FlowContext, keys: SessionKeys, first_seq: int) -> None:
        """Install (or re-install) a context in the device before first use."""
        with ctx.lock:
            ctx.keys = keys
            ctx.expected_record_seq = first_seq
            self._engine[ctx.context_id] = [keys, first_seq]

    def shared_context(self, five_tuple: tuple, keys: SessionKeys, first_seq: int = 0,
                       queue: int = 0) -> FlowContext:
        """A context outside the pool, shared by every message on a five-tuple."""
        ctx = FlowContext(next(self._shared_ids), queue, bound_rpc=-1, five_tuple=five_tuple)
        self.install(ctx, keys, first_seq)
        return ctx

    def driver_submit(self, segment: TsoSegment, ctx: FlowContext, queue: int | None = None) -> list[Descriptor]:
        if ctx.context_id not in self._engine or ctx.keys is None:
            raise ContextNotInstalled(f"flow context {ctx.context_id} not installed")
        q = ctx.assigned_queue if queue is None else queue
        with ctx.lock:
            descs = []
            if segment.record_seq != ctx.expected_record_seq:
                descs.append(Descriptor(DescriptorKind.RESYNC, ctx.context_id, segment.record_seq))
                self.resyncs_submitted += 1
            descs.append(Descriptor(DescriptorKind.DATA, ctx.context_id, segment.record_seq, segment))
            ctx.expected_record_seq = segment.record_seq + 1
            self.queues[q].push(*descs)
        return descs

    def submit_sealed(self, segment: TsoSegment, queue: int) -> None:
        """Software-crypto path: the record is already sealed, no context involved."""
        self.queues[queue].push(Descriptor(DescriptorKind.DATA, None, segment.record_seq, segment))

    # device side

    def pending(self) -> int:
        return sum(len(q) for q in self.queues)

    def ready_queues(self) -> list[int]:
        return [q.index for q in self.queues if q.descriptors]

    def engine_step(self, schedule: EngineSchedule | None = None) -> list[EmittedSegment]:
        schedule = schedule or self.schedule
        ready = self.ready_queues()
        if not ready:
            return []
        q = self.queues[schedule.choose(ready, len(self.queues))]
        with q.lock:
            desc = q.descriptors.popleft()
        if desc.kind is DescriptorKind.RESYNC:
            self._engine[desc.context_id][1] = desc.record_seq
            return []
        seg = desc.segment
        if desc.context_id is None:
            return [EmittedSegment(seg, seg.record, None, desc.record_seq, desc.record_seq, True)]
        state = self._engine[desc.context_id]
        keys, engine_seq = state
        header = RecordHeader.for_plaintext(len(seg.plaintext), desc.record_seq)
        # Hardware tags with whatever sequence it currently holds.
        sealed = seal_segment(keys, engine_seq, seg.plaintext, header=header)
        state[1] = engine_seq + 1
        record = sealed.to_bytes()
        seg.record = record
        return [EmittedSegment(seg, record, desc.context_id, desc.record_seq, engine_seq,
                               engine_seq == desc.record_seq)]

    def drain(self, schedule: EngineSchedule | None = None) -> list[EmittedSegment]:
        out = []
        while self.pending():
            out.extend(self.engine_step(schedule))
        return out


def interleavings(lengths: Sequence[int]) -> Iterator[tuple[int, ...]]:
    """Every order of reading queues of the given lengths, FIFO within each queue."""
    total = sum(lengths)
    remaining = list(lengths)
    order: list[int] = []

    def rec():
        if len(order) == total:
            yield tuple(order)
            return
        for q, left in enumerate(remaining):
            if left:
                remaining[q] -= 1
                order.append(q)
                yield from rec()
                order.pop()
                remaining[q] += 1

    yield from rec()
