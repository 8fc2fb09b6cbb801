"""Packet traces: length-prefixed packet bytes plus a JSON-lines event sidecar."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from ..errors import MalformedPacket
from ..wire import PACKET_HEADER_LEN, PacketType, decode_network_header, decode_overlaid_header, NETWORK_HEADER_LEN

SENT = "sent"
DROPPED = "dropped"
REORDERED = "reordered"
DELIVERED = "delivered"
CORRUPTED = "corrupted"

_LEN = struct.Struct("!I")


@dataclass(frozen=True)
class TraceEvent:
    timestamp: int  # simulated ns
    direction: str
    annotation: str
    packet: int  # index into Trace.packets

    def to_json(self) -> str:
        return json.dumps({"t": self.timestamp, "dir": self.direction, "event": self.annotation,
                           "pkt": self.packet}, separators=(",", ":"))


@dataclass
class Trace:
    packets: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def add_packet(self, data: bytes) -> int:
        self.packets.append(bytes(data))
        return len(self.packets) - 1

    def record(self, timestamp: int, direction: str, annotation: str, packet: int) -> None:
        self.events.append(TraceEvent(timestamp, direction, annotation, packet))

    def packet_bytes(self) -> bytes:
        return b"".join(_LEN.pack(len(p)) + p for p in self.packets)

    def sidecar(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)

    def to_bytes(self) -> bytes:
        """Canonical serialization used for determinism comparisons."""
        return self.packet_bytes() + b"\n--\n" + self.sidecar().encode()

    def wire_bytes(self, direction: str | None = None) -> bytes:
        """Every packet that was put on a link, concatenated."""
        sent = [e.packet for e in self.events if e.annotation == SENT
                and (direction is None or e.direction == direction)]
        return b"".join(self.packets[i] for i in sent)

    def save(self, path: str | Path) -> tuple[Path, Path]:
        path = Path(path)
        side = sidecar_path(path)
        path.write_bytes(self.packet_bytes())
        side.write_text(self.sidecar())
        return path, side

    @classmethod
    def load(cls, path: str | Path) -> "Trace":
        path = Path(path)
        data = path.read_bytes()
        packets, pos = [], 0
        while pos < len(data):
            if pos + 4 > len(data):
                raise MalformedPacket("trace file truncated")
            (n,) = _LEN.unpack_from(data, pos)
            packets.append(data[pos + 4:pos + 4 + n])
            pos += 4 + n
        events = []
        side = sidecar_path(path)
        if side.exists():
            for line in side.read_text().splitlines():
                if line.strip():
                    d = json.loads(line)
                    events.append(TraceEvent(d["t"], d["dir"], d["event"], d["pkt"]))
        return cls(packets, events)


def sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".jsonl")


def find_plaintext(trace: Trace, payloads: Iterable[bytes], window: int = 12) -> list[tuple[int, int]]:
    """Look for any ``window``-byte run of a payload on the wire.

    Returns ``(payload index, offset)`` for each hit. Payloads shorter than
    the window are searched whole.
    """
    blob = trace.wire_bytes()
    hits = {}
    # Overlapping windows at half-window stride: any leaked run of
    # 1.5 x window bytes or more contains at least one of them.
    step = max(1, window // 2)
    index: dict[bytes, tuple[int, int]] = {}
    for i, p in enumerate(payloads):
        if len(p) <= window:
            if p and p in blob:
                hits[i] = 0
            continue
        for off in range(0, len(p) - window + 1, step):
            index.setdefault(p[off:off + window], (i, off))
    if index:
        for pos in range(len(blob) - window + 1):
            found = index.get(blob[pos:pos + window])
            if found is not None:
                i, off = found
                hits[i] = min(off, hits.get(i, off))
    return sorted(hits.items())


def describe_packet(data: bytes) -> str:
    if len(data) < PACKET_HEADER_LEN:
        return f"short packet ({len(data)} B)"
    try:
        net = decode_network_header(data)
        h = decode_overlaid_header(data[NETWORK_HEADER_LEN:PACKET_HEADER_LEN])
    except MalformedPacket as exc:
        return f"undecodable ({exc})"
    parts = [f"{h.packet_type.name:<6}", f"mid={h.message_id}", f"mlen={h.message_length}",
             f"ipid={net.ipid}", f"len={len(data)}"]
    if h.packet_type is PacketType.DATA:
        parts.append(f"tso_off={h.tso_offset}")
        if h.retransmit_flag:
            parts.append(f"retx orig_off={h.original_offset}")
    return " ".join(parts)


def dump(trace: Trace) -> list[str]:
    lines = []
    for e in trace.events:
        us = e.timestamp / 1000
        lines.append(f"{us:12.3f}us {e.direction:<4} {e.annotation:<9} {describe_packet(trace.packets[e.packet])}")
    return lines
