"""Exception hierarchy shared by every SDP module."""


class SdpError(Exception):
    """Base class for all errors raised by this package."""


# wire
class InvariantViolation(SdpError, ValueError):
    """A header field is out of range or breaks a structural invariant."""


class MalformedPacket(SdpError):
    """A received packet cannot be parsed."""


class Truncated(MalformedPacket):
    pass


class BadMagic(MalformedPacket):
    pass


# record layer
class Oversize(SdpError, ValueError):
    pass


class AuthFailure(SdpError):
    """AEAD tag verification failed."""


class ReplayedRecord(SdpError):
    pass


# NIC emulation
class ContextNotInstalled(SdpError):
    pass


class PoolExhausted(SdpError):
    pass


# transport
class MessageTooLarge(SdpError, ValueError):
    pass


class NoKeys(SdpError):
    pass


class UnknownRpc(SdpError):
    pass


class RpcAbandoned(SdpError):
    """Retries for a message were exhausted."""

    def __init__(self, peer, message_id, direction="outbound"):
        super().__init__(f"{direction} rpc {message_id} to/from {peer} abandoned")
        self.peer = peer
        self.message_id = message_id
        self.direction = direction


# key exchange
class TicketInvalid(SdpError):
    pass


class EarlyDataTooLarge(SdpError, ValueError):
    pass


class ReplayDetected(SdpError):
    pass


class UnknownTicket(SdpError):
    pass


class DuplicateGroup(SdpError):
    pass


class HandshakeFailure(SdpError):
    pass


# harness
class ConfigError(SdpError, ValueError):
    """Invalid scenario configuration.

    ``fields`` maps each offending field name to a diagnostic message.
    """

    def __init__(self, fields):
        self.fields = dict(fields)
        detail = "; ".join(f"{k}: {v}" for k, v in sorted(self.fields.items()))
        super().__init__(f"invalid configuration ({detail})")
