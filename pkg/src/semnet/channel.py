"""Stochastic channel models, SNR drift schedules, and reconstruction metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

Rng = np.random.Generator

CHANNEL_KINDS = ("awgn", "rayleigh_block")


def noise_variance(snr_db: float) -> float:
    """Noise variance for unit-average-power symbols."""
    return float(10.0 ** (-snr_db / 10.0))


@dataclass
class ChannelModel:
    """Scalar channel applied to power-normalized symbol blocks.

    awgn adds i.i.d. Gaussian noise. rayleigh_block additionally scales each
    block by a Rayleigh-magnitude gain whose underlying complex state follows
    a Gauss-Markov recursion across blocks (coefficient `correlation`).
    `transmit_count` tracks how many blocks have passed through, so callers
    can assert that surrogate-only training paths never touch the channel.
    """

    kind: str
    snr_db: float
    correlation: float = 0.9
    transmit_count: int = field(default=0, compare=False)
    fade_state: complex = field(default=0j, compare=False)

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ContractViolation(f"unknown channel kind {self.kind!r}")
        if not 0.0 <= self.correlation <= 1.0:
            raise ContractViolation("correlation must lie in [0, 1]")

    @property
    def sigma2(self) -> float:
        return noise_variance(self.snr_db)


def _advance_fade(ch: ChannelModel, rng: Rng) -> float:
    # unit-variance complex state: Re and Im each N(0, 1/2)
    w = complex(rng.normal(0.0, np.sqrt(0.5)), rng.normal(0.0, np.sqrt(0.5)))
    if ch.fade_state == 0j and ch.transmit_count == 0:
        ch.fade_state = w
    else:
        rho = ch.correlation
        ch.fade_state = rho * ch.fade_state + np.sqrt(1.0 - rho * rho) * w
    return abs(ch.fade_state)


def transmit(ch: ChannelModel, x: np.ndarray, rng: Rng) -> tuple[np.ndarray, float]:
    """Send one power-normalized block; returns (received, block gain).

    Gain is 1.0 for awgn. Rayleigh gain is returned so the receiver can
    equalize. Inputs with mean square outside [0.5, 2] are rejected.
    """
    x = np.asarray(x, dtype=np.float64)
    ms = float(np.mean(x * x))
    if not 0.5 <= ms <= 2.0:
        raise ContractViolation(f"block mean square {ms:.4g} outside [0.5, 2]")
    h = 1.0
    if ch.kind == "rayleigh_block":
        h = _advance_fade(ch, rng)
    noise = rng.normal(0.0, np.sqrt(ch.sigma2), size=x.shape)
    ch.transmit_count += 1
    return h * x + noise, h


@dataclass(frozen=True)
class SnrSchedule:
    """Piecewise-constant SNR over epochs: closed-left (epoch_start, snr_db) steps."""

    entries: tuple[tuple[int, float], ...]

    def __post_init__(self):
        if not self.entries:
            raise ContractViolation("schedule needs at least one entry")
        starts = [e[0] for e in self.entries]
        if starts[0] != 0:
            raise ContractViolation("first schedule entry must start at epoch 0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ContractViolation("epoch starts must be strictly increasing")


def schedule_snr(s: SnrSchedule, epoch: int) -> float:
    """SNR of the last entry whose start is ≤ epoch."""
    if epoch < 0:
        raise ContractViolation("epoch must be non-negative")
    value = s.entries[0][1]
    for start, snr in s.entries:
        if start <= epoch:
            value = snr
        else:
            break
    return float(value)


PSNR_CAP_DB = 99.0


def psnr(mse: float) -> float:
    """Peak SNR in dB for unit pixel range, capped so mse → 0 stays finite."""
    if mse < 0.0:
        raise ContractViolation("mse must be non-negative")
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB))
