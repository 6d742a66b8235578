"""Joint source-channel image codec and the link-quality surface it induces.

Encoder output is power-normalized per block, crosses a stochastic channel,
and is decoded back to pixels; training backpropagates end to end through
the normalization and the additive-noise channel leg. The "leg" callable
abstraction lets fine-tuning swap the live channel for a frozen generative
surrogate without changing the update rule.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .channel import ChannelModel, psnr, transmit
from .errors import ContractViolation, ShapeMismatch, TrainingFault
from .nn import (
    Adam,
    Mlp,
    Rng,
    backward,
    backward_from_output,
    backward_with_input_grad,
    forward,
    forward_cached,
    init_mlp,
)

# leg: normalized symbols -> (received symbols, backward closure dL/dy -> dL/dz_norm)
ChannelLeg = Callable[[np.ndarray], tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]]


@dataclass
class SemanticCodec:
    encoder: Mlp  # source_dim -> hidden -> n_symbols, identity output
    decoder: Mlp  # n_symbols -> hidden -> source_dim, sigmoid output

    def __post_init__(self):
        if self.encoder.out_width != self.decoder.in_width:
            raise ShapeMismatch("encoder output width != decoder input width")
        if self.encoder.in_width != self.decoder.out_width:
            raise ShapeMismatch("decoder must reconstruct the encoder's input width")
        if not 0.0 < self.compression_ratio <= 1.0:
            raise ContractViolation("compression ratio must lie in (0, 1]")

    @property
    def source_dim(self) -> int:
        return self.encoder.in_width

    @property
    def n_symbols(self) -> int:
        return self.encoder.out_width

    @property
    def compression_ratio(self) -> float:
        return self.n_symbols / self.source_dim

    def copy(self) -> "SemanticCodec":
        return SemanticCodec(self.encoder.copy(), self.decoder.copy())

    def digest(self) -> str:
        return self.encoder.digest() + ":" + self.decoder.digest()

    def snap_to_storage(self) -> None:
        self.encoder.snap_to_storage()
        self.decoder.snap_to_storage()


def make_codec(n_symbols: int, rng: Rng, source_dim: int = 784,
               hidden: int = 256) -> SemanticCodec:
    enc = init_mlp([source_dim, hidden, n_symbols], ["relu", "identity"], rng)
    dec = init_mlp([n_symbols, hidden, source_dim], ["relu", "sigmoid"], rng)
    return SemanticCodec(enc, dec)


def power_normalize(z: np.ndarray) -> np.ndarray:
    """Scale each block (row) to mean square exactly 1; zero blocks stay zero."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    ms = np.mean(z * z, axis=1, keepdims=True)
    zero = ms[:, 0] == 0.0
    if np.any(zero):
        warnings.warn("zero symbol block passed to power_normalize", RuntimeWarning)
        ms = np.where(ms == 0.0, 1.0, ms)
    return z / np.sqrt(ms)


def power_normalize_with_grad(z: np.ndarray
                              ) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """power_normalize plus its vector-Jacobian product for backprop."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    n = z.shape[1]
    ms = np.mean(z * z, axis=1, keepdims=True)
    if np.any(ms[:, 0] == 0.0):
        raise ContractViolation("zero block is not differentiable through normalization")
    s = np.sqrt(ms)
    y = z / s

    def backward(dy: np.ndarray) -> np.ndarray:
        # y_i = z_i / s, s = sqrt(mean z^2):  dz = dy/s - z * <dy, z> / (n s^3)
        inner = np.sum(dy * z, axis=1, keepdims=True)
        return dy / s - z * inner / (n * s**3)

    return y, backward


def real_channel_leg(ch: ChannelModel, rng: Rng) -> ChannelLeg:
    """Live channel as a differentiable leg: additive noise, gradient unchanged."""

    def leg(zn: np.ndarray):
        y, h = transmit(ch, zn, rng)
        if h != 1.0:
            y = y / h
        return y, lambda dy: dy

    return leg


def encode(codec: SemanticCodec, x: np.ndarray) -> np.ndarray:
    return power_normalize(forward(codec.encoder, np.atleast_2d(x)))


def codec_round_trip(codec: SemanticCodec, ch: ChannelModel, batch: np.ndarray,
                     rng: Rng) -> tuple[np.ndarray, float, float]:
    """Encode, transmit, decode one batch; returns (reconstruction, mse, psnr)."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.min() < 0.0 or batch.max() > 1.0:
        raise ContractViolation("pixel batch must lie in [0, 1]")
    zn = encode(codec, batch)
    y, h = transmit(ch, zn, rng)
    if h != 1.0:
        y = y / h
    recon = forward(codec.decoder, y)
    mse = float(np.mean((recon - batch) ** 2))
    return recon, mse, psnr(mse)


def end_to_end_update(codec: SemanticCodec, batch: np.ndarray, leg: ChannelLeg,
                      opt_enc: Adam, opt_dec: Adam, decoder_only: bool = False,
                      enc_masks: list | None = None,
                      dec_masks: list | None = None) -> tuple[float, float]:
    """One joint reconstruction-loss update through the channel leg."""
    z, enc_caches = forward_cached(codec.encoder, batch)
    zn, norm_back = power_normalize_with_grad(z)
    y, leg_back = leg(zn)
    loss, dec_grads, dy = backward_with_input_grad(codec.decoder, y, "mse", batch)
    opt_dec.step(codec.decoder, dec_grads, masks=dec_masks)
    if not decoder_only:
        dz = norm_back(leg_back(dy))
        enc_grads, _ = backward_from_output(codec.encoder, enc_caches, dz)
        opt_enc.step(codec.encoder, enc_grads, masks=enc_masks)
    return loss, psnr(loss)


@dataclass
class EpochRow:
    epoch: int
    snr_db: float
    train_mse: float
    val_mse: float
    val_psnr: float


def train_codec(codec: SemanticCodec, ch: ChannelModel, dataset, epochs: int,
                rng: Rng, lr: float = 1e-3, batch_size: int = 128,
                val_size: int = 1000) -> tuple[SemanticCodec, list[EpochRow]]:
    """End-to-end training through the stochastic channel; returns per-epoch rows."""
    train_x = np.asarray(dataset.train_x, dtype=np.float64)
    val_x = np.asarray(dataset.test_x, dtype=np.float64)[:val_size]
    if train_x.shape[0] == 0:
        raise ContractViolation("empty training set")
    rows: list[EpochRow] = []
    if epochs == 0:
        return codec, rows
    opt_enc = Adam(codec.encoder, lr=lr)
    opt_dec = Adam(codec.decoder, lr=lr)
    leg = real_channel_leg(ch, rng)
    for epoch in range(epochs):
        order = rng.permutation(train_x.shape[0])
        losses = []
        for lo in range(0, train_x.shape[0], batch_size):
            batch = train_x[order[lo:lo + batch_size]]
            mse, _ = end_to_end_update(codec, batch, leg, opt_enc, opt_dec)
            losses.append(mse)
        _, val_mse, val_psnr = codec_round_trip(codec, ch, val_x, rng)
        if not np.isfinite(val_mse):
            raise TrainingFault("validation loss diverged", epoch=epoch)
        rows.append(EpochRow(epoch, ch.snr_db, float(np.mean(losses)), val_mse, val_psnr))
    codec.snap_to_storage()
    return codec, rows


COMPRESSION_CODEBOOK = (1 / 16, 1 / 8, 1 / 4, 1 / 2, 1.0)


def codebook_symbols(source_dim: int = 784) -> tuple[int, ...]:
    return tuple(int(round(r * source_dim)) for r in COMPRESSION_CODEBOOK)


@dataclass
class QualitySurface:
    """(compression ratio, snr_db) -> (psnr_db, task accuracy) lookup table."""

    rho_values: tuple[float, ...]
    snr_values: tuple[float, ...]
    psnr_grid: np.ndarray  # (n_rho, n_snr)
    acc_grid: np.ndarray  # (n_rho, n_snr) in [0,1]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = (len(self.rho_values), len(self.snr_values))
        if self.psnr_grid.shape != shape or self.acc_grid.shape != shape:
            raise ShapeMismatch("grid shape must match axis lengths")
        if not np.all(np.isfinite(self.psnr_grid)) or not np.all(np.isfinite(self.acc_grid)):
            raise ContractViolation("every surface cell must be populated and finite")
        if self.acc_grid.min() < 0.0 or self.acc_grid.max() > 1.0:
            raise ContractViolation("accuracy cells must lie in [0, 1]")


def _axis_weights(values: Sequence[float], q: float) -> tuple[int, int, float]:
    v = np.asarray(values, dtype=np.float64)
    q = float(np.clip(q, v[0], v[-1]))
    hi = int(np.searchsorted(v, q, side="left"))
    if v[hi] == q:
        return hi, hi, 0.0
    lo = hi - 1
    return lo, hi, float((q - v[lo]) / (v[hi] - v[lo]))


def surface_lookup(surf: QualitySurface, rho: float, snr_db: float) -> tuple[float, float]:
    """Bilinear interpolation with clamping at the grid edges."""
    r0, r1, tr = _axis_weights(surf.rho_values, rho)
    s0, s1, ts = _axis_weights(surf.snr_values, snr_db)

    def blend(grid):
        a = grid[r0, s0] * (1 - ts) + grid[r0, s1] * ts
        b = grid[r1, s0] * (1 - ts) + grid[r1, s1] * ts
        return float(a * (1 - tr) + b * tr)

    return blend(surf.psnr_grid), blend(surf.acc_grid)


def build_quality_surface(codecs: Mapping[float, SemanticCodec],
                          snr_values: Sequence[float],
                          eval_x: np.ndarray, eval_y: np.ndarray,
                          classify: Callable[[np.ndarray], np.ndarray],
                          rng: Rng, n_samples: int = 500) -> QualitySurface:
    """Evaluate each (codec, snr) cell: channel round trip, then task accuracy."""
    rho_values = tuple(sorted(codecs))
    for r in rho_values:
        if codecs[r] is None:
            raise ContractViolation(f"missing codec for compression ratio {r}")
    x = np.asarray(eval_x)[:n_samples]
    y_true = np.asarray(eval_y)[:n_samples]
    snr_values = tuple(snr_values)
    psnr_grid = np.empty((len(rho_values), len(snr_values)))
    acc_grid = np.empty_like(psnr_grid)
    for i, r in enumerate(rho_values):
        for j, snr_db in enumerate(snr_values):
            ch = ChannelModel("awgn", snr_db)
            recon, _, p = codec_round_trip(codecs[r], ch, x, rng)
            psnr_grid[i, j] = p
            acc_grid[i, j] = float(np.mean(classify(recon) == y_true))
    provenance = {
        "codec_digests": {repr(r): codecs[r].digest() for r in rho_values},
        "eval_samples": int(x.shape[0]),
    }
    return QualitySurface(rho_values, snr_values, psnr_grid, acc_grid, provenance)


def train_digit_classifier(train_x: np.ndarray, train_y: np.ndarray,
                           epochs: int, rng: Rng, hidden: int = 128,
                           lr: float = 1e-3, batch_size: int = 128) -> Mlp:
    """Label head for the quality surface's accuracy column.

    Trained on clean images; the surface then probes it with channel-corrupted
    reconstructions, so its accuracy under degradation is the measurement, not
    a training objective.
    """
    dim = train_x.shape[1]
    n_classes = int(train_y.max()) + 1
    net = init_mlp([dim, hidden, n_classes], ["relu", "identity"], rng)
    opt = Adam(net, lr=lr)
    n = train_x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            idx = order[start:start + batch_size]
            _, grads = backward(net, train_x[idx], "cross_entropy", train_y[idx])
            opt.step(net, grads)
    net.snap_to_storage()
    return net


def classifier_labels(net: Mlp, images: np.ndarray) -> np.ndarray:
    return np.argmax(forward(net, np.atleast_2d(images)), axis=1)
