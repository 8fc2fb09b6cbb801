"""AEAD record layer: one AES-128-GCM record per TSO segment."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from functools import cached_property

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import AuthFailure, InvariantViolation, MalformedPacket, Oversize, ReplayedRecord
from .wire import (
    MAX_RECORD_LENGTH,
    RECORD_HEADER_LEN,
    TAG_LEN,
    RecordHeader,
    decode_record_header,
)

KEY_LEN = 16
IV_LEN = 12
MAX_PLAINTEXT = MAX_RECORD_LENGTH - TAG_LEN


@dataclass(eq=False)
class SessionKeys:
    """Key material for one direction of one endpoint pair.

    The sender uses ``tx_record_seq``; the receiver uses ``rx_replay_window``.
    """

    aead_key: bytes
    iv: bytes
    tx_record_seq: int = 0
    rx_replay_window: set = field(default_factory=set)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if len(self.aead_key) != KEY_LEN or len(self.iv) != IV_LEN:
            raise ValueError("SessionKeys needs a 16-byte key and a 12-byte iv")

    @cached_property
    def aead(self) -> AESGCM:
        return AESGCM(self.aead_key)

    def allocate(self, n: int = 1) -> int:
        """Reserve ``n`` consecutive record sequence numbers; returns the first."""
        with self._lock:
            first = self.tx_record_seq
            self.tx_record_seq += n
            return first

    def clone(self) -> "SessionKeys":
        return SessionKeys(self.aead_key, self.iv)


@dataclass(frozen=True)
class SealedRecord:
    header: RecordHeader
    ciphertext: bytes
    tag: bytes

    def __post_init__(self):
        if len(self.tag) != TAG_LEN:
            raise InvariantViolation("tag must be 16 bytes")
        if self.header.length != len(self.ciphertext) + TAG_LEN:
            raise InvariantViolation("record length does not match ciphertext + tag")

    def to_bytes(self) -> bytes:
        return self.header.encode() + self.ciphertext + self.tag

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedRecord":
        header = decode_record_header(data)
        if len(data) != RECORD_HEADER_LEN + header.length:
            raise MalformedPacket(f"record is {len(data)} bytes, header says {RECORD_HEADER_LEN + header.length}")
        return cls(header, bytes(data[RECORD_HEADER_LEN:-TAG_LEN]), bytes(data[-TAG_LEN:]))


def derive_nonce(iv: bytes, seq: int) -> bytes:
    if len(iv) != IV_LEN:
        raise ValueError("iv must be 12 bytes")
    return (int.from_bytes(iv, "big") ^ seq).to_bytes(IV_LEN, "big")


def seal_segment(keys: SessionKeys, seq: int, plaintext: bytes, aad: bytes | None = None,
                 *, header: RecordHeader | None = None) -> SealedRecord:
    """Seal one segment's plaintext under record sequence ``seq``.

    By default the record header is built for ``seq`` and used as AAD. The
    NIC emulation passes ``header`` separately: a header claiming one
    sequence, sealed under the engine's (possibly different) sequence.
    """
    if len(plaintext) > MAX_PLAINTEXT:
        raise Oversize(f"plaintext of {len(plaintext)} bytes overflows the 16-bit record length")
    if header is None:
        header = RecordHeader.for_plaintext(len(plaintext), seq)
    if aad is None:
        aad = header.encode()
    out = keys.aead.encrypt(derive_nonce(keys.iv, seq), plaintext, aad)
    return SealedRecord(header, out[:-TAG_LEN], out[-TAG_LEN:])


def open_segment(keys: SessionKeys, record: SealedRecord, aad: bytes | None = None) -> bytes:
    seq = record.header.explicit_sequence
    if aad is None:
        aad = record.header.encode()
    try:
        plaintext = keys.aead.decrypt(derive_nonce(keys.iv, seq), record.ciphertext + record.tag, aad)
    except InvalidTag:
        raise AuthFailure(f"record {seq} failed authentication") from None
    with keys._lock:
        if seq in keys.rx_replay_window:
            raise ReplayedRecord(f"record {seq} already accepted")
        keys.rx_replay_window.add(seq)
    return plaintext
