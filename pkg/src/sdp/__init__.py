"""SDP: an encrypted, receiver-driven, message-oriented datacenter transport.

Modules:

* :mod:`sdp.wire` - on-wire header and framing encodings
* :mod:`sdp.record` - AES-128-GCM record sealing per TSO segment
* :mod:`sdp.nic` - emulated transmit NIC with TLS offload and TSO
* :mod:`sdp.transport` - the endpoint state machine
* :mod:`sdp.keyx` - ticket-based 0-RTT key exchange
* :mod:`sdp.netharness` - simulator, race suite and CLI
"""

__version__ = "0.1.0"
