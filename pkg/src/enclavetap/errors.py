"""Exception types shared across the tunnel, state-management, and gateway layers."""


class EnclaveTapError(Exception):
    """Base class for all library errors."""


class CapacityExhausted(EnclaveTapError):
    """An arena has no room left for the requested allocation."""


class MemoryViolation(EnclaveTapError):
    """A buffer handed in from the untrusted side crosses into trusted space."""


class AuthFailure(EnclaveTapError):
    """AEAD verification failed: tamper, replay, reorder, or drop."""


class MalformedFrame(EnclaveTapError):
    """Frame stream corrupt upstream of AEAD (unknown type or oversize length)."""


class OversizePacket(EnclaveTapError):
    """Packet exceeds the configured maximum packet buffer."""


class DeviceShutdown(EnclaveTapError):
    """The tunnel device has shut down; no further packet I/O is possible."""


class ChannelClosed(EnclaveTapError):
    """The byte-stream channel to the peer was closed."""


class MalformedPcap(EnclaveTapError):
    """pcap file does not start with a valid global header."""


class TruncatedPacket(EnclaveTapError):
    """pcap record header announces more bytes than the file contains."""


class Unfragmentable(EnclaveTapError):
    """Oversize packet cannot be fragmented (non-IPv4, or DF flag set)."""
