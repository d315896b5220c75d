"""Wireless communication cost model.

A Shannon-capacity rate converts uploaded bits into per-round delay and
transmission energy. Fading is either off (deterministic rate) or Rayleigh,
modeled as a unit-mean exponential power gain drawn once per round from a
seeded stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .errors import ChannelError, ConfigError

BITS_PER_PARAM = 32  # float32 payloads, no compression


@dataclass(frozen=True)
class ChannelConfig:
    snr_db: float = 5.0
    bandwidth_hz: float = 1e6
    tx_power_w: float = 1.0
    fading: str = "none"  # none | rayleigh

    def __post_init__(self):
        if self.bandwidth_hz <= 0:
            raise ConfigError("bandwidth must be > 0")
        if self.tx_power_w <= 0:
            raise ConfigError("transmit power must be > 0")
        if self.fading not in ("none", "rayleigh"):
            raise ConfigError(f"unknown fading mode {self.fading!r}")

    @property
    def snr_linear(self) -> float:
        return 10.0 ** (self.snr_db / 10.0)


class FadingStream:
    """Seeded per-round Rayleigh power gains (unit-mean exponential)."""

    def __init__(self, seed: int):
        self._rng = np.random.default_rng(seed)

    def next_gain(self) -> float:
        return float(self._rng.exponential(1.0))


def shannon_rate(cfg: ChannelConfig, gain: float = 1.0) -> float:
    """Capacity in bits/second; ``gain`` is the fading power gain (1 = none)."""
    if gain < 0:
        raise ChannelError("fading gain must be >= 0")
    return cfg.bandwidth_hz * np.log2(1.0 + gain * cfg.snr_linear)


def comm_delay(payload_bits: float, rate: float) -> float:
    """Transmission time in seconds for a payload at the given rate."""
    if rate <= 0:
        raise ChannelError(f"transmission rate must be > 0, got {rate}")
    if payload_bits < 0:
        raise ChannelError("payload must be >= 0 bits")
    return payload_bits / rate

def tx_energy(delay_s: float, cfg: ChannelConfig) -> float:
    """Transmission energy in joules: power times transmission time."""
    if delay_s < 0:
        raise ChannelError("delay must be >= 0")
    return cfg.tx_power_w * delay_s


def expected_rayleigh_rate(cfg: ChannelConfig) -> float:
    """E[B log2(1 + g snr)] for g ~ Exp(1), by numerical integration."""
    snr = cfg.snr_linear
    val, _ = integrate.quad(lambda g: np.log2(1.0 + g * snr) * np.exp(-g), 0.0, np.inf)
    return cfg.bandwidth_hz * val
