"""Shared exception types for the simulator."""


class ConfigError(ValueError):
    """Invalid experiment or module configuration."""


class ProtocolError(RuntimeError):
    """Client/server exchange violated the manifest contract."""


class PhaseOrderError(RuntimeError):
    """A phase was started before its prerequisites completed."""


class DegeneratePolicyError(RuntimeError):
    """Preference generation could not produce any non-tied pair."""


class ChannelError(ValueError):
    """Invalid channel state (e.g. non-positive transmission rate)."""
