"""
Bit-exact encoding of SDP on-wire structures.

Packet layout (see FORMAT.md for offset tables)::

    [20 B network header (IPv4-style)]
    [20 B overlaid "TCP" common header][20 B options block]
    [payload: record header / ciphertext / tag slice, or control payload]

The overlaid header is replicated verbatim by the emulated TSO, so every field
the receiver needs (message id, message length, TSO offset) lives in it. The
TSO offset is split over the urgent pointer (low 16 bits) and a nibble in the
options block (high 4 bits).
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace

from .errors import BadMagic, InvariantViolation, MalformedPacket, Truncated

NETWORK_HEADER_LEN = 20
OVERLAID_HEADER_LEN = 40
PACKET_HEADER_LEN = NETWORK_HEADER_LEN + OVERLAID_HEADER_LEN
RECORD_HEADER_LEN = 13
TAG_LEN = 16
FRAMING_HEADER_LEN = 6

MAX_MESSAGE_LENGTH = 1 << 20
MAX_TSO_OFFSET = (1 << 20) - 1
MAX_RECORD_LENGTH = 0xFFFF

SDP_PROTOCOL_NUMBER = 0xFD
TCP_PROTOCOL_NUMBER = 6
UDP_PROTOCOL_NUMBER = 17

CONTENT_TYPE_APPLICATION_DATA = 23
LEGACY_VERSION = 0x0303

_URG = 0x20
_DATA_OFFSET_WORDS = OVERLAID_HEADER_LEN // 4
_RETRANSMIT_BIT = 0x10

_COMMON = struct.Struct("!HHIIBBHHH")
_OPTIONS = struct.Struct("!QIBB3s3s")
_RECORD = struct.Struct("!BHHQ")
_NETWORK = struct.Struct("!BBHHHBBHII")
_FRAMING = struct.Struct("!IH")
_GRANT = struct.Struct("!I")
_RESEND = struct.Struct("!II")


class PacketType(enum.IntEnum):
    DATA = 0
    GRANT = 1
    RESEND = 2
    ACK = 3


@dataclass(frozen=True)
class OverlaidHeader:
    src_port: int
    dst_port: int
    message_id: int
    message_length: int
    tso_offset: int = 0
    packet_type: PacketType = PacketType.DATA
    retransmit_flag: bool = False
    original_offset: int = 0
    urgent_flag: bool = False

    @property
    def tso_offset_low(self) -> int:
        return self.tso_offset & 0xFFFF

    @property
    def tso_offset_ext(self) -> int:
        return self.tso_offset >> 16

    def validate(self) -> None:
        if self.urgent_flag:
            raise InvariantViolation("urgent flag must stay clear for TSO to keep the urgent pointer")
        if not 0 <= self.tso_offset <= MAX_TSO_OFFSET:
            raise InvariantViolation(f"tso_offset {self.tso_offset} does not fit in 20 bits")
        if not 0 <= self.original_offset <= MAX_TSO_OFFSET:
            raise InvariantViolation(f"original_offset {self.original_offset} does not fit in 20 bits")
        if not 0 <= self.message_length <= MAX_MESSAGE_LENGTH:
            raise InvariantViolation(f"message_length {self.message_length} exceeds {MAX_MESSAGE_LENGTH}")
        if self.tso_offset > self.message_length:
            raise InvariantViolation("tso_offset beyond message_length")
        for name in ("src_port", "dst_port"):
            if not 0 <= getattr(self, name) <= 0xFFFF:
                raise InvariantViolation(f"{name} out of range")
        if not 0 <= self.message_id < 1 << 64:
            raise InvariantViolation("message_id out of range")

    def encode(self) -> bytes:
        return encode_overlaid_header(self)


def encode_overlaid_header(h: OverlaidHeader) -> bytes:
    h.validate()
    common = _COMMON.pack(
        h.src_port,
        h.dst_port,
        0,  # sequence number: not synthesized by TSO for non-TCP packets
        0,
        _DATA_OFFSET_WORDS << 4,
        0,  # flags; URG must remain clear
        0,
        0,  # no checksum, integrity comes from the AEAD tag
        h.tso_offset_low,
    )
    type_flags = int(h.packet_type) | (_RETRANSMIT_BIT if h.retransmit_flag else 0)
    options = _OPTIONS.pack(
        h.message_id,
        h.message_length,
        type_flags,
        h.tso_offset_ext << 4,
        h.original_offset.to_bytes(3, "big"),
        b"\x00\x00\x00",
    )
    return common + options


def decode_overlaid_header(data: bytes) -> OverlaidHeader:
    if len(data) < OVERLAID_HEADER_LEN:
        raise Truncated(f"overlaid header needs {OVERLAID_HEADER_LEN} bytes, got {len(data)}")
    src, dst, _seq, _ack, doff, flags, _win, _csum, urg = _COMMON.unpack_from(data, 0)
    mid, mlen, type_flags, ext, orig, _pad = _OPTIONS.unpack_from(data, _COMMON.size)
    if doff >> 4 != _DATA_OFFSET_WORDS:
        raise MalformedPacket(f"unexpected data offset {doff >> 4}")
    try:
        ptype = PacketType(type_flags & 0x0F)
    except ValueError:
        raise MalformedPacket(f"unknown packet type {type_flags & 0x0F}") from None
    h = OverlaidHeader(
        src_port=src,
        dst_port=dst,
        message_id=mid,
        message_length=mlen,
        tso_offset=((ext >> 4) << 16) | urg,
        packet_type=ptype,
        retransmit_flag=bool(type_flags & _RETRANSMIT_BIT),
        original_offset=int.from_bytes(orig, "big"),
        urgent_flag=bool(flags & _URG),
    )
    try:
        h.validate()
    except InvariantViolation as exc:
        raise MalformedPacket(str(exc)) from exc
    return h


@dataclass(frozen=True)
class RecordHeader:
    """13-byte record header: 5-byte classic TLS header plus explicit 64-bit sequence."""

    length: int
    explicit_sequence: int
    content_type: int = CONTENT_TYPE_APPLICATION_DATA
    legacy_version: int = LEGACY_VERSION

    @classmethod
    def for_plaintext(cls, plaintext_len: int, seq: int) -> "RecordHeader":
        return cls(length=plaintext_len + TAG_LEN, explicit_sequence=seq)

    @property
    def ciphertext_length(self) -> int:
        return self.length - TAG_LEN

    def encode(self) -> bytes:
        return encode_record_header(self)


def encode_record_header(r: RecordHeader) -> bytes:
    if not TAG_LEN <= r.length <= MAX_RECORD_LENGTH:
        raise InvariantViolation(f"record length {r.length} outside [{TAG_LEN}, {MAX_RECORD_LENGTH}]")
    if not 0 <= r.explicit_sequence < 1 << 64:
        raise InvariantViolation("record sequence out of 64-bit range")
    return _RECORD.pack(r.content_type, r.legacy_version, r.length, r.explicit_sequence)


def decode_record_header(data: bytes) -> RecordHeader:
    if len(data) < RECORD_HEADER_LEN:
        raise Truncated("record header truncated")
    ctype, version, length, seq = _RECORD.unpack_from(data, 0)
    if length < TAG_LEN:
        raise MalformedPacket(f"record length {length} shorter than tag")
    return RecordHeader(length=length, explicit_sequence=seq, content_type=ctype, legacy_version=version)


@dataclass(frozen=True)
class NetworkHeader:
    src_addr: int
    dst_addr: int
    ipid: int = 0
    total_length: int = PACKET_HEADER_LEN
    protocol_number: int = SDP_PROTOCOL_NUMBER
    ttl: int = 64

    def encode(self) -> bytes:
        if not 0 <= self.ipid <= 0xFFFF:
            raise InvariantViolation("ipid out of 16-bit range")
        if not PACKET_HEADER_LEN <= self.total_length <= 0xFFFF:
            raise InvariantViolation("total_length out of range")
        return _NETWORK.pack(
            0x45, 0, self.total_length, self.ipid, 0, self.ttl,
            self.protocol_number, 0, self.src_addr, self.dst_addr,
        )


def decode_network_header(data: bytes) -> NetworkHeader:
    if len(data) < NETWORK_HEADER_LEN:
        raise Truncated("network header truncated")
    ver_ihl, _tos, total, ipid, _frag, ttl, proto, _csum, src, dst = _NETWORK.unpack_from(data, 0)
    if ver_ihl != 0x45:
        raise BadMagic(f"not an IPv4-style header (0x{ver_ihl:02x})")
    return NetworkHeader(src_addr=src, dst_addr=dst, ipid=ipid, total_length=total,
                         protocol_number=proto, ttl=ttl)


def encode_packet(net: NetworkHeader, header: OverlaidHeader, payload: bytes = b"") -> bytes:
    net = replace(net, total_length=PACKET_HEADER_LEN + len(payload))
    return net.encode() + header.encode() + payload


def decode_packet(data: bytes, protocol_number: int = SDP_PROTOCOL_NUMBER):
    """Split a packet into ``(NetworkHeader, OverlaidHeader, payload)``.

    The payload is returned opaque; for DATA packets it is usually a slice of
    a sealed record that starts mid-ciphertext.
    """
    if len(data) < PACKET_HEADER_LEN:
        raise Truncated(f"packet of {len(data)} bytes is shorter than {PACKET_HEADER_LEN}")
    net = decode_network_header(data)
    if net.protocol_number != protocol_number:
        raise BadMagic(f"protocol number {net.protocol_number} is not {protocol_number}")
    if net.total_length > len(data) or net.total_length < PACKET_HEADER_LEN:
        raise Truncated(f"total_length {net.total_length} but {len(data)} bytes present")
    header = decode_overlaid_header(data[NETWORK_HEADER_LEN:PACKET_HEADER_LEN])
    return net, header, bytes(data[PACKET_HEADER_LEN:net.total_length])


@dataclass(frozen=True)
class FramingHeader:
    intra_segment_offset: int
    chunk_length: int

    def encode(self) -> bytes:
        if not 0 <= self.chunk_length <= 0xFFFF or not 0 <= self.intra_segment_offset < 1 << 32:
            raise InvariantViolation("framing header field out of range")
        return _FRAMING.pack(self.intra_segment_offset, self.chunk_length)

    @classmethod
    def decode(cls, data: bytes, offset: int = 0) -> "FramingHeader":
        if len(data) - offset < FRAMING_HEADER_LEN:
            raise MalformedPacket("framing header truncated")
        return cls(*_FRAMING.unpack_from(data, offset))


# Segment plaintext layout.
#
# The sealed TSO segment is [record header][plaintext][tag] and is cut into
# packets of `capacity` bytes. A framing header is placed at every packet
# payload boundary the plaintext crosses (and right after the record header in
# the first packet). AES-GCM is length preserving, so plaintext position p
# lands at sealed position RECORD_HEADER_LEN + p.

def payload_capacity(mtu: int) -> int:
    cap = mtu - PACKET_HEADER_LEN
    if cap < RECORD_HEADER_LEN + FRAMING_HEADER_LEN + 1:
        raise InvariantViolation(f"MTU {mtu} too small")
    return cap


def build_segment_plaintext(chunk: bytes, capacity: int) -> bytes:
    out = bytearray()
    pos = RECORD_HEADER_LEN
    done = 0
    while True:
        boundary = (pos // capacity + 1) * capacity
        n = min(len(chunk) - done, boundary - pos - FRAMING_HEADER_LEN)
        out += FramingHeader(done, n).encode()
        out += chunk[done:done + n]
        done += n
        pos += FRAMING_HEADER_LEN + n
        if done >= len(chunk):
            return bytes(out)


def parse_segment_plaintext(plaintext: bytes) -> list[tuple[int, bytes]]:
    """Walk framing headers, returning ``[(intra_segment_offset, chunk), ...]``.

    Chunks must be contiguous starting at 0.
    """
    chunks = []
    pos = 0
    expected = 0
    while pos < len(plaintext):
        fh = FramingHeader.decode(plaintext, pos)
        pos += FRAMING_HEADER_LEN
        if fh.intra_segment_offset != expected or pos + fh.chunk_length > len(plaintext):
            raise MalformedPacket("framing headers are not contiguous")
        chunks.append((fh.intra_segment_offset, plaintext[pos:pos + fh.chunk_length]))
        pos += fh.chunk_length
        expected += fh.chunk_length
    if not chunks:
        raise MalformedPacket("segment plaintext carries no framing header")
    return chunks


def framed_length(data_len: int, capacity: int) -> int:
    """Plaintext length that build_segment_plaintext produces for data_len bytes."""
    if data_len == 0:
        return FRAMING_HEADER_LEN
    # Find the smallest header count n such that n headers + data fit in n packets' span.
    n = 1
    while True:
        total = data_len + n * FRAMING_HEADER_LEN
        if -(-(RECORD_HEADER_LEN + total) // capacity) <= n:
            return total
        n += 1


def data_length_from_record(record_length: int, capacity: int) -> int:
    """Inverse of framed_length: message bytes carried by a record of this length."""
    plaintext = record_length - TAG_LEN
    n = max(1, -(-(RECORD_HEADER_LEN + plaintext) // capacity))
    return max(0, plaintext - n * FRAMING_HEADER_LEN)


# Control payloads (cleartext; these packets carry no application data).

def encode_grant(granted_offset: int) -> bytes:
    return _GRANT.pack(granted_offset)


def decode_grant(payload: bytes) -> int:
    if len(payload) < _GRANT.size:
        raise Truncated("grant payload truncated")
    return _GRANT.unpack_from(payload)[0]


def encode_resend(offset: int, length: int) -> bytes:
    return _RESEND.pack(offset, length)


def decode_resend(payload: bytes) -> tuple[int, int]:
    if len(payload) < _RESEND.size:
        raise Truncated("resend payload truncated")
    return _RESEND.unpack_from(payload)
