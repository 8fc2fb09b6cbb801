"""
Key establishment for SDP sessions.

Five handshake variants are supported:

* ``INIT_1RTT`` - a TLS-1.3-style full handshake: fresh key shares, server
  certificate and CertVerify in the ServerHello, one round trip before any
  application data.
* ``INIT`` / ``INIT_FS`` - 0-RTT handshakes against an SDP ticket fetched from
  the resolver ahead of time. Early data is sealed under the sdp-key (client
  ephemeral x server short-lived share). ``INIT_FS`` additionally mixes in a
  server ephemeral share so traffic after the first flight is forward secure.
* ``RSMP`` / ``RSMP_FS`` - resumption from a PSK issued at the end of an
  earlier handshake, with or without a fresh ECDH exchange.

Every handshake records which of the server (S*) and client (C*) steps it
actually executed so tests can check the cost structure of each variant.
Key pairs used inside handshakes come from a pre-generated pool.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import os
import struct
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Callable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, x25519
from cryptography.hazmat.primitives.kdf.hkdf import HKDF, HKDFExpand

from .errors import (
    AuthFailure,
    DuplicateGroup,
    EarlyDataTooLarge,
    HandshakeFailure,
    MalformedPacket,
    ReplayDetected,
    TicketInvalid,
    UnknownTicket,
)
from .record import SealedRecord, SessionKeys, open_segment, seal_segment

Entropy = Callable[[int], bytes]

CIPHER_SUITE = "aes128gcmsha256"
SIGNATURE_SCHEME = "ecdsa_secp256r1_sha256"
DEFAULT_GROUP = "secp256r1"
TICKET_LIFETIME = 3600.0
KEY_ROTATION = 600.0
DEFAULT_MAX_EARLY_DATA = 16384

_EC_CURVES = {"secp256r1": ec.SECP256R1, "secp384r1": ec.SECP384R1, "secp521r1": ec.SECP521R1}
GROUPS = (*_EC_CURVES, "x25519")


class Variant(str, enum.Enum):
    INIT_1RTT = "INIT_1RTT"
    INIT = "INIT"
    INIT_FS = "INIT_FS"
    RSMP = "RSMP"
    RSMP_FS = "RSMP_FS"

    @property
    def forward_secret(self) -> bool:
        return self in (Variant.INIT_FS, Variant.RSMP_FS)

    @property
    def resumption(self) -> bool:
        return self in (Variant.RSMP, Variant.RSMP_FS)


# Server (top) and client (bottom) handshake steps, in table order.
SERVER_STEPS = ("S1", "S2.1", "S2.2", "S2.3", "S2.4", "S2.5", "S2.6", "S3")
CLIENT_STEPS = ("C1.1", "C1.2", "C2.1", "C2.2", "C2.3", "C4.1", "C4.2", "C5.1", "C5.2", "C6")
ALL_STEPS = SERVER_STEPS + CLIENT_STEPS

STEP_NAMES = {
    "S1": "Process CHLO", "S2.1": "Key Gen", "S2.2": "ECDH Exchange", "S2.3": "SHLO Gen",
    "S2.4": "EE & Cert Encode", "S2.5": "CertVerify Gen", "S2.6": "Secret Derive",
    "S3": "Process Finished", "C1.1": "Key Gen", "C1.2": "Others Gen", "C2.1": "Process SHLO",
    "C2.2": "ECDH Exchange", "C2.3": "Secret Derive", "C4.1": "Decode Cert", "C4.2": "Verify Cert",
    "C5.1": "Build Sign Data", "C5.2": "Verify CertVerify", "C6": "Process Finished",
}

# Ticket verification and key pre-generation remove these from the 0-RTT handshake.
_TICKET_SAVES = frozenset({"C1.1", "C4.1", "C4.2", "C5.1", "C5.2", "S2.1", "S2.5"})
# Without forward secrecy there is no second ECDH exchange.
_FS_ECDH = frozenset({"S2.2", "C2.2"})


def transcript_steps(variant: Variant) -> tuple[str, ...]:
    variant = Variant(variant)
    drop: frozenset = frozenset()
    if variant is not Variant.INIT_1RTT:
        drop = _TICKET_SAVES
        if not variant.forward_secret:
            drop = drop | _FS_ECDH
    return tuple(s for s in ALL_STEPS if s not in drop)


def rtt_count(variant: Variant) -> int:
    """Round trips before the client can send application data."""
    return 1 if Variant(variant) is Variant.INIT_1RTT else 0


# key shares

def generate_key(group: str, entropy: Entropy = os.urandom):
    if group == "x25519":
        return x25519.X25519PrivateKey.from_private_bytes(entropy(32))
    curve = _EC_CURVES.get(group)
    if curve is None:
        raise ValueError(f"unsupported group {group!r}")
    c = curve()
    # A scalar below 2**(bits-8) is always below the group order.
    nbytes = (c.key_size - 1) // 8
    return ec.derive_private_key(int.from_bytes(entropy(nbytes), "big") + 1, c)


def public_bytes(key) -> bytes:
    pub = key.public_key()
    if isinstance(pub, x25519.X25519PublicKey):
        return pub.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    return pub.public_bytes(serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint)


def load_public(group: str, data: bytes):
    try:
        if group == "x25519":
            return x25519.X25519PublicKey.from_public_bytes(data)
        return ec.EllipticCurvePublicKey.from_encoded_point(_EC_CURVES[group](), data)
    except (ValueError, KeyError) as exc:
        raise MalformedPacket(f"bad {group} key share") from exc


def ecdh(private_key, group: str, peer_public: bytes) -> bytes:
    peer = load_public(group, peer_public)
    if group == "x25519":
        return private_key.exchange(peer)
    return private_key.exchange(ec.ECDH(), peer)


class KeyPool:
    """Stand-by key pairs generated ahead of handshakes."""

    def __init__(self, entropy: Entropy = os.urandom, size: int = 4):
        self.entropy = entropy
        self.size = size
        self._keys: dict[str, list] = defaultdict(list)
        self._lock = threading.Lock()

    def refill(self, group: str = DEFAULT_GROUP) -> None:
        with self._lock:
            while len(self._keys[group]) < self.size:
                self._keys[group].append(generate_key(group, self.entropy))

    def take(self, group: str = DEFAULT_GROUP):
        with self._lock:
            if self._keys[group]:
                return self._keys[group].pop()
        # Pool ran dry; generation cost is paid outside the accounted steps.
        return generate_key(group, self.entropy)


# serialization: length-prefixed fields

_U32 = struct.Struct("!I")


def pack_fields(*fields: bytes) -> bytes:
    return b"".join(_U32.pack(len(f)) + f for f in fields)


def unpack_fields(data: bytes, n: int | None = None) -> list[bytes]:
    out, pos = [], 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise MalformedPacket("truncated field length")
        (length,) = _U32.unpack_from(data, pos)
        pos += 4
        if pos + length > len(data):
            raise MalformedPacket("truncated field")
        out.append(bytes(data[pos:pos + length]))
        pos += length
    if n is not None and len(out) != n:
        raise MalformedPacket(f"expected {n} fields, got {len(out)}")
    return out


def _u64(v: int) -> bytes:
    return struct.pack("!Q", v)


def _from_u64(b: bytes) -> int:
    if len(b) != 8:
        raise MalformedPacket("bad integer field")
    return struct.unpack("!Q", b)[0]


class MsgType(enum.IntEnum):
    CHLO = 1
    SHLO = 2
    FINISHED = 3
    NEW_SESSION_TICKET = 4
    PUT = 0x10
    GET = 0x11
    TICKETS = 0x12
    OK = 0x13
    ERROR = 0x14


def encode_message(mtype: MsgType, *fields: bytes) -> bytes:
    body = bytes([mtype]) + pack_fields(*fields)
    return _U32.pack(len(body)) + body


def decode_message(data: bytes, expect: MsgType | None = None) -> tuple[MsgType, list[bytes]]:
    if len(data) < 5:
        raise MalformedPacket("handshake record truncated")
    (length,) = _U32.unpack_from(data)
    if length != len(data) - 4:
        raise MalformedPacket("handshake record length mismatch")
    try:
        mtype = MsgType(data[4])
    except ValueError:
        raise MalformedPacket(f"unknown message type {data[4]}") from None
    if expect is not None and mtype is not expect:
        raise MalformedPacket(f"expected {expect.name}, got {mtype.name}")
    return mtype, unpack_fields(data[5:])


# certificates from a toy in-repo CA

def _sign(key: ec.EllipticCurvePrivateKey, data: bytes) -> bytes:
    return key.sign(data, ec.ECDSA(hashes.SHA256()))


def _verify(pub: ec.EllipticCurvePublicKey, sig: bytes, data: bytes) -> bool:
    try:
        pub.verify(sig, data, ec.ECDSA(hashes.SHA256()))
        return True
    except (InvalidSignature, ValueError):
        return False


@dataclass(frozen=True)
class Certificate:
    subject: str
    public_key: bytes  # secp256r1 point, uncompressed
    not_after: float
    signature: bytes = b""

    def tbs(self) -> bytes:
        return pack_fields(self.subject.encode(), self.public_key, _u64(int(self.not_after)))

    def to_bytes(self) -> bytes:
        return pack_fields(self.tbs(), self.signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Certificate":
        tbs, sig = unpack_fields(data, 2)
        subject, pub, not_after = unpack_fields(tbs, 3)
        return cls(subject.decode(), pub, float(_from_u64(not_after)), sig)

    def verify(self, ca_public, now: float) -> bool:
        return now < self.not_after and _verify(ca_public, self.signature, self.tbs())

    def signing_key(self) -> ec.EllipticCurvePublicKey:
        return load_public("secp256r1", self.public_key)


class ToyCA:
    def __init__(self, entropy: Entropy = os.urandom):
        self._key = generate_key("secp256r1", entropy)

    @property
    def public_key(self):
        return self._key.public_key()

    def issue(self, subject: str, public_key: ec.EllipticCurvePublicKey, not_after: float) -> Certificate:
        pub = public_key.public_bytes(serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint)
        cert = Certificate(subject, pub, not_after)
        return replace(cert, signature=_sign(self._key, cert.tbs()))


# SDP tickets and the resolver

@dataclass(frozen=True)
class SdpTicket:
    ticket_id: bytes
    group: str
    server_short_lived_pub: bytes
    max_early_data: int
    certificate: bytes
    not_after: float
    cipher_suite: str = CIPHER_SUITE
    signature_scheme: str = SIGNATURE_SCHEME
    signature: bytes = b""

    def signed_payload(self) -> bytes:
        return pack_fields(
            self.ticket_id, self.group.encode(), self.server_short_lived_pub,
            self.cipher_suite.encode(), self.signature_scheme.encode(),
            _u64(self.max_early_data), self.certificate, _u64(int(self.not_after)),
        )

    def to_bytes(self) -> bytes:
        return pack_fields(self.signed_payload(), self.signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> "SdpTicket":
        payload, sig = unpack_fields(data, 2)
        tid, group, pub, suite, scheme, max_ed, cert, not_after = unpack_fields(payload, 8)
        return cls(tid, group.decode(), pub, _from_u64(max_ed), cert, float(_from_u64(not_after)),
                   suite.decode(), scheme.decode(), sig)

    def verify(self, ca_public, now: float) -> Certificate:
        """Check expiry, certificate and signature; returns the certificate."""
        if now >= self.not_after:
            raise TicketInvalid("ticket expired")
        try:
            cert = Certificate.from_bytes(self.certificate)
        except (MalformedPacket, UnicodeDecodeError) as exc:
            raise TicketInvalid("undecodable certificate") from exc
        if not cert.verify(ca_public, now):
            raise TicketInvalid("certificate does not verify")
        if not _verify(cert.signing_key(), self.signature, self.signed_payload()):
            raise TicketInvalid("ticket signature does not verify")
        if self.group not in GROUPS or self.cipher_suite != CIPHER_SUITE:
            raise TicketInvalid("unsupported ticket parameters")
        return cert


class Resolver:
    """In-process name -> tickets store with TTL, spoken to via PUT/GET records."""

    def __init__(self):
        self._tickets: dict[str, list[SdpTicket]] = defaultdict(list)
        self._lock = threading.Lock()

    def put(self, name: str, ticket: SdpTicket, now: float) -> None:
        with self._lock:
            live = [t for t in self._tickets[name] if t.not_after > now]
            if any(t.group == ticket.group for t in live):
                raise DuplicateGroup(f"{name} already has a live {ticket.group} ticket")
            live.append(ticket)
            self._tickets[name] = live

    def get(self, name: str, now: float) -> list[SdpTicket]:
        with self._lock:
            return [t for t in self._tickets.get(name, ()) if t.not_after > now]

    def handle(self, request: bytes, now: float) -> bytes:
        try:
            mtype, fields = decode_message(request)
            if mtype is MsgType.PUT:
                name, ticket = fields
                self.put(name.decode(), SdpTicket.from_bytes(ticket), now)
                return encode_message(MsgType.OK)
            if mtype is MsgType.GET:
                (name,) = fields
                return encode_message(MsgType.TICKETS, *(t.to_bytes() for t in self.get(name.decode(), now)))
        except DuplicateGroup as exc:
            return encode_message(MsgType.ERROR, b"duplicate-group", str(exc).encode())
        except (MalformedPacket, ValueError) as exc:
            return encode_message(MsgType.ERROR, b"malformed", str(exc).encode())
        return encode_message(MsgType.ERROR, b"unsupported", b"")


def resolver_put(resolver: Resolver, name: str, ticket: SdpTicket, now: float) -> None:
    mtype, fields = decode_message(resolver.handle(encode_message(MsgType.PUT, name.encode(), ticket.to_bytes()), now))
    if mtype is MsgType.ERROR:
        if fields[0] == b"duplicate-group":
            raise DuplicateGroup(fields[1].decode())
        raise HandshakeFailure(fields[1].decode())


def resolver_get(resolver: Resolver, name: str, now: float) -> list[bytes]:
    mtype, fields = decode_message(resolver.handle(encode_message(MsgType.GET, name.encode()), now))
    if mtype is not MsgType.TICKETS:
        raise HandshakeFailure("resolver refused query")
    return fields


class ReplayCache:
    def __init__(self):
        self._seen: dict[bytes, float] = {}
        self._lock = threading.Lock()

    def check_and_insert(self, random: bytes, expiry: float, now: float) -> None:
        with self._lock:
            if len(self._seen) > 4096:
                self._seen = {r: e for r, e in self._seen.items() if e > now}
            exp = self._seen.get(random)
            if exp is not None and exp > now:
                raise ReplayDetected("ClientHello random seen before")
            self._seen[random] = expiry

    def __len__(self):
        return len(self._seen)


# key schedule

def _hkdf(ikm: bytes, salt: bytes, info: bytes) -> bytes:
    return HKDF(hashes.SHA256(), 32, salt, info).derive(ikm)


def _expand(secret: bytes, label: bytes, length: int) -> bytes:
    return HKDFExpand(hashes.SHA256(), length, b"sdp " + label).derive(secret)


def traffic_keys(secret: bytes, label: bytes) -> SessionKeys:
    return SessionKeys(_expand(secret, label + b" key", 16), _expand(secret, label + b" iv", 12))


def _h(*parts: bytes) -> bytes:
    return hashlib.sha256(b"".join(parts)).digest()


def _finished(secret: bytes, role: bytes, transcript: bytes) -> bytes:
    return hmac.new(_expand(secret, role + b" finished", 32), _h(transcript), hashlib.sha256).digest()


@dataclass
class KeySchedule:
    traffic_secret: bytes
    sdp_key: bytes | None = None
    fs_key: bytes | None = None

    def client_keys(self) -> tuple[SessionKeys, SessionKeys]:
        """(tx, rx) for the client side of the session."""
        return traffic_keys(self.traffic_secret, b"c ap"), traffic_keys(self.traffic_secret, b"s ap")

    def server_keys(self) -> tuple[SessionKeys, SessionKeys]:
        return traffic_keys(self.traffic_secret, b"s ap"), traffic_keys(self.traffic_secret, b"c ap")


def _seal_blob(keys: SessionKeys, data: bytes) -> bytes:
    return seal_segment(keys, 0, data).to_bytes()


def _open_blob(keys: SessionKeys, blob: bytes) -> bytes:
    if not blob:
        return b""
    try:
        return open_segment(keys, SealedRecord.from_bytes(blob))
    except AuthFailure as exc:
        raise HandshakeFailure("early data does not decrypt") from exc


@dataclass
class ResumptionPsk:
    psk_id: bytes
    psk: bytes
    not_after: float


_MODE_FULL, _MODE_TICKET, _MODE_RESUME = 0, 1, 2


def _mode_for(variant: Variant) -> int:
    if variant is Variant.INIT_1RTT:
        return _MODE_FULL
    return _MODE_RESUME if variant.resumption else _MODE_TICKET


# server

@dataclass
class ServerHandshake:
    variant: Variant
    shlo: bytes
    steps: list
    schedule: KeySchedule
    early_data: bytes
    transcript: bytes
    server: "SdpServer"
    done: bool = False

    def finish(self, client_finished: bytes, now: float | None = None) -> bytes:
        """Verify the client Finished; returns a NewSessionTicket record."""
        now = time.time() if now is None else now
        self.steps.append("S3")
        _, (mac,) = decode_message(client_finished, MsgType.FINISHED)
        if not hmac.compare_digest(mac, _finished(self.schedule.traffic_secret, b"c", self.transcript)):
            raise HandshakeFailure("client Finished does not verify")
        self.done = True
        return self.server._issue_psk(self.schedule, now)


class SdpServer:
    def __init__(self, name: str, ca: ToyCA, *, entropy: Entropy = os.urandom,
                 groups: tuple[str, ...] = (DEFAULT_GROUP,), max_early_data: int = DEFAULT_MAX_EARLY_DATA,
                 ticket_lifetime: float = TICKET_LIFETIME, key_rotation: float = KEY_ROTATION,
                 cert_lifetime: float = 10 * 365 * 86400.0, now: float | None = None):
        now = time.time() if now is None else now
        self.name = name
        self.entropy = entropy
        self.groups = groups
        self.max_early_data = max_early_data
        self.ticket_lifetime = ticket_lifetime
        self.key_rotation = key_rotation
        self._signing = generate_key("secp256r1", entropy)
        self.certificate = ca.issue(name, self._signing.public_key(), now + cert_lifetime)
        self._short_lived: dict[bytes, tuple[SdpTicket, object]] = {}
        self._psks: dict[bytes, ResumptionPsk] = {}
        self.pool = KeyPool(entropy)
        self.replay = ReplayCache()
        self._last_rotation: float | None = None
        for g in groups:
            self.pool.refill(g)

    def make_ticket(self, now: float, group: str = DEFAULT_GROUP) -> SdpTicket:
        key = generate_key(group, self.entropy)
        ticket = SdpTicket(self.entropy(16), group, public_bytes(key), self.max_early_data,
                           self.certificate.to_bytes(), now + self.ticket_lifetime)
        ticket = replace(ticket, signature=_sign(self._signing, ticket.signed_payload()))
        self._short_lived[ticket.ticket_id] = (ticket, key)
        return ticket

    def rotate(self, resolver: Resolver, now: float) -> bytes | None:
        """Publish a fresh short-lived share if the rotation period elapsed.

        Picks the first configured group with no live ticket; returns None when
        every group is still covered.
        """
        if self._last_rotation is not None and now - self._last_rotation < self.key_rotation:
            return None
        live = {t.group for t, _ in self._short_lived.values() if t.not_after > now}
        for group in self.groups:
            if group not in live:
                self._last_rotation = now
                return publish_ticket(self, resolver, now, group)
        return None

    def _issue_psk(self, schedule: KeySchedule, now: float) -> bytes:
        psk = ResumptionPsk(self.entropy(16), _expand(schedule.traffic_secret, b"res master", 32),
                            now + self.ticket_lifetime)
        self._psks[psk.psk_id] = psk
        return encode_message(MsgType.NEW_SESSION_TICKET, psk.psk_id, psk.psk, _u64(int(psk.not_after)))

    def respond(self, chlo: bytes, now: float | None = None) -> ServerHandshake:
        now = time.time() if now is None else now
        steps = ["S1"]
        _, fields = decode_message(chlo, MsgType.CHLO)
        if len(fields) != 7:
            raise MalformedPacket("CHLO field count")
        mode_b, random, group_b, client_pub, ident, fs_b, early = fields
        mode, fs, group = mode_b[0], fs_b == b"\x01", group_b.decode()
        core = pack_fields(mode_b, random, group_b, client_pub, ident, fs_b)

        if mode == _MODE_FULL:
            self.replay.check_and_insert(random, now + self.ticket_lifetime, now)
            return self._respond_full(chlo, core, group, client_pub, steps, now)

        if mode == _MODE_TICKET:
            entry = self._short_lived.get(ident)
            if entry is None or entry[0].not_after <= now:
                raise UnknownTicket("unknown or expired SDP ticket")
            ticket, sl_key = entry
            if ticket.group != group:
                raise HandshakeFailure("CHLO group does not match ticket")
            expiry, limit = ticket.not_after, ticket.max_early_data
            sdp_key = _hkdf(ecdh(sl_key, group, client_pub), _h(b"sdp", core), b"sdp key")
            variant = Variant.INIT_FS if fs else Variant.INIT
        elif mode == _MODE_RESUME:
            psk = self._psks.get(ident)
            if psk is None or psk.not_after <= now:
                raise UnknownTicket("unknown or expired resumption PSK")
            expiry, limit = psk.not_after, self.max_early_data
            sdp_key = _hkdf(psk.psk, _h(b"rsmp", core), b"sdp key")
            variant = Variant.RSMP_FS if fs else Variant.RSMP
        else:
            raise MalformedPacket(f"unknown CHLO mode {mode}")

        self.replay.check_and_insert(random, expiry, now)
        early_data = _open_blob(traffic_keys(sdp_key, b"c e"), early)
        if len(early_data) > limit:
            raise EarlyDataTooLarge("early data exceeds ticket limit")

        server_random = self.entropy(32)
        fs_key = None
        server_pub = b""
        if fs:
            steps.append("S2.2")
            eph = self.pool.take(group)
            server_pub = public_bytes(eph)
            ikm = ecdh(eph, group, client_pub)
            if mode == _MODE_RESUME:
                ikm += sdp_key
            fs_key = _hkdf(ikm, _h(core, server_random, server_pub), b"sdp fs key")
        steps.append("S2.3")
        shlo_core = pack_fields(server_random, server_pub)
        steps.append("S2.4")
        extensions = pack_fields(b"early_data_accepted")
        steps.append("S2.6")
        schedule = KeySchedule(fs_key or sdp_key, sdp_key=sdp_key, fs_key=fs_key)
        transcript = chlo + shlo_core + extensions
        fin = _finished(schedule.traffic_secret, b"s", transcript)
        hs = ServerHandshake(variant, b"", steps, schedule, early_data, transcript, self)
        hs._reply_core = (shlo_core, extensions, fin)
        return hs

    def _respond_full(self, chlo, core, group, client_pub, steps, now):
        steps.append("S2.1")
        eph = generate_key(group, self.entropy)
        server_pub = public_bytes(eph)
        steps.append("S2.2")
        shared = ecdh(eph, group, client_pub)
        steps.append("S2.3")
        server_random = self.entropy(32)
        shlo_core = pack_fields(server_random, server_pub)
        steps.append("S2.4")
        extensions = pack_fields(b"", self.certificate.to_bytes())
        steps.append("S2.5")
        cert_verify = _sign(self._signing, _cert_verify_input(chlo + shlo_core + extensions))
        steps.append("S2.6")
        secret = _hkdf(shared, _h(core, shlo_core), b"sdp 1rtt")
        schedule = KeySchedule(secret)
        transcript = chlo + shlo_core + extensions + cert_verify
        fin = _finished(secret, b"s", transcript)
        hs = ServerHandshake(Variant.INIT_1RTT, b"", steps, schedule, b"", transcript, self)
        hs._reply_core = (shlo_core, extensions + pack_fields(cert_verify), fin)
        return hs

    def reply(self, hs: ServerHandshake, reply_data: bytes = b"") -> bytes:
        """Encode the SHLO, sealing any 0-RTT reply under fs-key or sdp-key."""
        shlo_core, extensions, fin = hs._reply_core
        sealed = b""
        if reply_data:
            if hs.variant is Variant.INIT_1RTT:
                raise EarlyDataTooLarge("no reply data before the handshake completes")
            sealed = _seal_blob(traffic_keys(hs.schedule.traffic_secret, b"s e"), reply_data)
        hs.shlo = encode_message(MsgType.SHLO, shlo_core, extensions, fin, sealed)
        return hs.shlo


def _cert_verify_input(transcript: bytes) -> bytes:
    return b" " * 64 + b"SDP, server CertificateVerify\x00" + _h(transcript)


# client

@dataclass
class ClientHandshake:
    variant: Variant
    chlo: bytes
    steps: list
    group: str
    client_key: object
    core: bytes
    client: "SdpClient"
    server_name: str
    sdp_key: bytes | None = None
    psk_mix: bytes | None = None
    schedule: KeySchedule | None = None
    reply_data: bytes = b""

    def finish(self, shlo: bytes, now: float | None = None) -> bytes:
        """Process the SHLO and return the client Finished record."""
        now = time.time() if now is None else now
        self.steps.append("C2.1")
        _, fields = decode_message(shlo, MsgType.SHLO)
        if len(fields) != 4:
            raise MalformedPacket("SHLO field count")
        shlo_core, extensions, fin, sealed = fields
        server_random, server_pub = unpack_fields(shlo_core, 2)

        if self.variant is Variant.INIT_1RTT:
            self.steps.append("C2.2")
            shared = ecdh(self.client_key, self.group, server_pub)
            self.steps.append("C2.3")
            secret = _hkdf(shared, _h(self.core, shlo_core), b"sdp 1rtt")
            self.schedule = KeySchedule(secret)
            _, cert_bytes, cert_verify = unpack_fields(extensions, 3)
            self.steps.append("C4.1")
            cert = Certificate.from_bytes(cert_bytes)
            self.steps.append("C4.2")
            if not cert.verify(self.client.ca_public, now) or cert.subject != self.server_name:
                raise HandshakeFailure("server certificate does not verify")
            self.steps.append("C5.1")
            ext_len = len(extensions) - 4 - len(cert_verify)
            sign_input = _cert_verify_input(self.chlo + shlo_core + extensions[:ext_len])
            self.steps.append("C5.2")
            if not _verify(cert.signing_key(), cert_verify, sign_input):
                raise HandshakeFailure("CertificateVerify does not verify")
            transcript = self.chlo + shlo_core + extensions[:ext_len] + cert_verify
        else:
            fs_key = None
            if self.variant.forward_secret:
                self.steps.append("C2.2")
                ikm = ecdh(self.client_key, self.group, server_pub)
                if self.variant.resumption:
                    ikm += self.sdp_key
                fs_key = _hkdf(ikm, _h(self.core, server_random, server_pub), b"sdp fs key")
            elif server_pub:
                raise HandshakeFailure("unexpected server share without forward secrecy")
            self.steps.append("C2.3")
            self.schedule = KeySchedule(fs_key or self.sdp_key, sdp_key=self.sdp_key, fs_key=fs_key)
            transcript = self.chlo + shlo_core + extensions

        self.steps.append("C6")
        if not hmac.compare_digest(fin, _finished(self.schedule.traffic_secret, b"s", transcript)):
            raise HandshakeFailure("server Finished does not verify")
        if sealed:
            self.reply_data = _open_blob(traffic_keys(self.schedule.traffic_secret, b"s e"), sealed)
        return encode_message(MsgType.FINISHED, _finished(self.schedule.traffic_secret, b"c", transcript))

    def accept_session_ticket(self, nst: bytes) -> None:
        _, (psk_id, psk, not_after) = decode_message(nst, MsgType.NEW_SESSION_TICKET)
        self.client.sessions[self.server_name] = ResumptionPsk(psk_id, psk, float(_from_u64(not_after)))


class SdpClient:
    def __init__(self, ca_public, resolver: Resolver, *, entropy: Entropy = os.urandom,
                 group: str = DEFAULT_GROUP):
        self.ca_public = ca_public
        self.resolver = resolver
        self.entropy = entropy
        self.group = group
        self.pool = KeyPool(entropy)
        self.pool.refill(group)
        self.tickets: dict[str, SdpTicket] = {}
        self.sessions: dict[str, ResumptionPsk] = {}

    def fetch_ticket(self, server_name: str, now: float) -> SdpTicket:
        """Query the resolver and keep the first ticket that authenticates.

        Done ahead of the handshake, so certificate and signature checks are
        not part of the handshake's own cost.
        """
        cached = self.tickets.get(server_name)
        if cached is not None and cached.not_after > now:
            return cached
        last = TicketInvalid(f"no ticket published for {server_name}")
        for blob in resolver_get(self.resolver, server_name, now):
            try:
                ticket = SdpTicket.from_bytes(blob)
                cert = ticket.verify(self.ca_public, now)
            except (TicketInvalid, MalformedPacket, UnicodeDecodeError) as exc:
                last = exc if isinstance(exc, TicketInvalid) else TicketInvalid(str(exc))
                continue
            if cert.subject != server_name:
                last = TicketInvalid("ticket certificate names another server")
                continue
            self.tickets[server_name] = ticket
            return ticket
        self.tickets.pop(server_name, None)
        raise last

    def start(self, server_name: str, variant: Variant, early_data: bytes = b"",
              now: float | None = None) -> ClientHandshake:
        now = time.time() if now is None else now
        variant = Variant(variant)
        steps: list[str] = []
        fs = b"\x01" if variant.forward_secret else b"\x00"
        mode = bytes([_mode_for(variant)])

        if variant is Variant.INIT_1RTT:
            if early_data:
                raise EarlyDataTooLarge("the full handshake carries no early data")
            steps.append("C1.1")
            key = generate_key(self.group, self.entropy)
            steps.append("C1.2")
            random = self.entropy(32)
            group_b, pub = self.group.encode(), public_bytes(key)
            core = pack_fields(mode, random, group_b, pub, b"", fs)
            chlo = encode_message(MsgType.CHLO, mode, random, group_b, pub, b"", fs, b"")
            return ClientHandshake(variant, chlo, steps, self.group, key, core, self, server_name)

        if variant.resumption:
            psk = self.sessions.get(server_name)
            if psk is None or psk.not_after <= now:
                raise TicketInvalid("no valid resumption PSK")
            group, ident, limit = self.group, psk.psk_id, DEFAULT_MAX_EARLY_DATA
        else:
            ticket = self.fetch_ticket(server_name, now)
            group, ident, limit = ticket.group, ticket.ticket_id, ticket.max_early_data
        if len(early_data) > limit:
            raise EarlyDataTooLarge(f"{len(early_data)} bytes of early data, limit {limit}")

        key = self.pool.take(group)  # pre-generated, no key-gen step
        steps.append("C1.2")
        random = self.entropy(32)
        pub = public_bytes(key)
        group_b = group.encode()
        core = pack_fields(mode, random, group_b, pub, ident, fs)
        if variant.resumption:
            sdp_key = _hkdf(psk.psk, _h(b"rsmp", core), b"sdp key")
        else:
            sdp_key = _hkdf(ecdh(key, group, ticket.server_short_lived_pub), _h(b"sdp", core), b"sdp key")
        sealed = _seal_blob(traffic_keys(sdp_key, b"c e"), early_data) if early_data else b""
        chlo = encode_message(MsgType.CHLO, mode, random, group_b, pub, ident, fs, sealed)
        return ClientHandshake(variant, chlo, steps, group, key, core, self, server_name, sdp_key=sdp_key)


def client_start(client: SdpClient, server_name: str, variant: Variant, early_data: bytes = b"",
                 now: float | None = None) -> ClientHandshake:
    return client.start(server_name, variant, early_data, now)


def server_respond(server: SdpServer, chlo: bytes, now: float | None = None,
                   reply_data: bytes = b"") -> tuple[ServerHandshake, bytes]:
    hs = server.respond(chlo, now)
    return hs, server.reply(hs, reply_data)


def publish_ticket(server: SdpServer, resolver: Resolver, now: float, group: str = DEFAULT_GROUP) -> bytes:
    ticket = server.make_ticket(now, group)
    try:
        resolver_put(resolver, server.name, ticket, now)
    except DuplicateGroup:
        server._short_lived.pop(ticket.ticket_id, None)
        raise
    return ticket.ticket_id


@dataclass
class HandshakeTranscript:
    variant: Variant
    steps_executed: list
    rtts: int
    client_schedule: KeySchedule
    server_schedule: KeySchedule
    early_data_received: bytes = b""
    reply_data_received: bytes = b""
    fell_back: bool = False
    fallback_reason: str = ""

    @property
    def keys_out(self) -> tuple[tuple[SessionKeys, SessionKeys], tuple[SessionKeys, SessionKeys]]:
        """((client tx, client rx), (server tx, server rx))."""
        return self.client_schedule.client_keys(), self.server_schedule.server_keys()


def handshake(client: SdpClient, server: SdpServer, variant: Variant, early_data: bytes = b"",
              reply_data: bytes = b"", now: float | None = None) -> HandshakeTranscript:
    """Run one complete handshake in-process."""
    now = time.time() if now is None else now
    chs = client.start(server.name, variant, early_data, now)
    shs, shlo = server_respond(server, chs.chlo, now, reply_data)
    cfin = chs.finish(shlo, now)
    nst = shs.finish(cfin, now)
    chs.accept_session_ticket(nst)
    steps = _merge_steps(chs.steps, shs.steps)
    return HandshakeTranscript(chs.variant, steps, rtt_count(chs.variant), chs.schedule, shs.schedule,
                               shs.early_data, chs.reply_data)


def _merge_steps(client_steps: list, server_steps: list) -> list:
    # Execution order: client flight 1, server flight, client flight 2, server Finished.
    c1 = [s for s in client_steps if s.startswith("C1")]
    c2 = [s for s in client_steps if not s.startswith("C1")]
    s1 = [s for s in server_steps if s != "S3"]
    return c1 + s1 + c2 + [s for s in server_steps if s == "S3"]


def connect(client: SdpClient, server: SdpServer, variant: Variant, early_data: bytes = b"",
            reply_data: bytes = b"", now: float | None = None) -> HandshakeTranscript:
    """Handshake with the requested variant, falling back to INIT_1RTT.

    Falls back when the ticket or PSK cannot be used. Early data that could not
    ride the first flight is not sent; the caller resends it after the handshake.
    """
    try:
        return handshake(client, server, variant, early_data, reply_data, now)
    except TicketInvalid as exc:
        t = handshake(client, server, Variant.INIT_1RTT, b"", b"", now)
        t.fell_back = True
        t.fallback_reason = str(exc)
        return t
