"""Online codec fine-tuning under SNR drift, with a learned channel surrogate.

The surrogate is a conditional GAN that imitates the channel's effect on a
block of transmitted symbols. Once trained on a pool of real transmissions,
it replaces the live channel as the differentiable leg during fine-tuning,
so the codec can keep adapting without spending air time on fresh samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelModel, SnrSchedule, noise_variance, psnr, schedule_snr, transmit
from .codec import (ChannelLeg, SemanticCodec, codec_round_trip, encode,
                    end_to_end_update, real_channel_leg)
from .errors import ContractViolation, ShapeMismatch, TrainingFault
from .nn import (Adam, Mlp, Rng, backward_from_output, backward_with_input_grad,
                 forward, forward_cached, init_mlp)

SNR_FEATURE_SCALE = 30.0
GAN_DISC_HIDDEN = 64

# Bias that parks the generator's noise-path hidden units in the relu's
# active region (prescaled seed inputs have std well under 0.4, so the units
# clip with probability ~1e-8 at the lowest supported SNR).
_NOISE_PATH_BIAS = 2.0

# Fidelity probe acceptance window: variance ratio within x1.3, mean within 0.05.
_PROBE_LOG_RATIO = float(np.log(1.3))
_PROBE_MEAN_TOL = 0.05


def snr_feature(snr_db: float) -> float:
    """Scalar conditioning feature fed to both GAN networks."""
    return float(snr_db) / SNR_FEATURE_SCALE


def feature_noise_scale(f):
    """Noise standard deviation implied by a conditioning feature value.

    Scaling the seed vector by this before the generator sees it means the
    network only has to learn a roughly unit gain, not a 4x dynamic range
    across the SNR sweep.
    """
    return 10.0 ** (-(f * SNR_FEATURE_SCALE) / 20.0)


def generator_input(x: np.ndarray, f_col: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Assemble [symbols, snr feature, prescaled seed] for the generator."""
    return np.concatenate([x, f_col, z * feature_noise_scale(f_col)], axis=1)


@dataclass
class ChannelGan:
    """Residual channel surrogate: simulate() returns x plus a learned residual."""

    generator: Mlp
    discriminator: Mlp
    noise_width: int

    def __post_init__(self):
        n = self.generator.sizes[-1]
        if self.generator.sizes[0] != n + 1 + self.noise_width:
            raise ShapeMismatch("generator input must be symbols + feature + seed")
        if self.discriminator.sizes[0] != 2 * n + 1:
            raise ShapeMismatch("discriminator input must be symbols + feature + received")
        if self.discriminator.sizes[-1] != 1:
            raise ShapeMismatch("discriminator must emit one score")
        if self.discriminator.activations[-1] != "sigmoid":
            raise ContractViolation("discriminator output must be a sigmoid score")
        if self.noise_width < 1:
            raise ContractViolation("seed vector must have positive width")

    @property
    def n_symbols(self) -> int:
        return self.generator.sizes[-1]

    def simulate(self, x: np.ndarray, snr_db: float, rng: Rng) -> np.ndarray:
        """Draw one simulated received block per input row."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.n_symbols:
            raise ShapeMismatch(f"expected {self.n_symbols} symbols, got {x.shape[1]}")
        z = rng.normal(size=(x.shape[0], self.noise_width))
        f_col = np.full((x.shape[0], 1), snr_feature(snr_db))
        return x + forward(self.generator, generator_input(x, f_col, z))

    def copy(self) -> "ChannelGan":
        return ChannelGan(self.generator.copy(), self.discriminator.copy(),
                          self.noise_width)

    def digest(self) -> str:
        return self.generator.digest() + ":" + self.discriminator.digest()

    def snap_to_storage(self) -> None:
        self.generator.snap_to_storage()
        self.discriminator.snap_to_storage()


def make_channel_gan(n_symbols: int, rng: Rng, gen_hidden: int | None = None,
                     disc_hidden: int = GAN_DISC_HIDDEN,
                     noise_width: int | None = None) -> ChannelGan:
    """Fresh surrogate pair.

    The seed vector is as wide as the symbol block by default, and the
    generator's hidden layer at least that wide. Narrowing either one bounds
    the rank of the residual's covariance; the discriminator learns to reject
    the resulting low-rank manifold outright (stalling training before the
    noise power is matched), and a codec fine-tuned against rank-deficient
    noise learns to shunt information into the unexcited directions, which
    does not survive contact with the real channel.

    The first n_symbols hidden units start as a linear noise path: unit j
    reads exactly the j-th prescaled seed component, offset into the relu's
    active region, and feeds exactly output j with the offset cancelled at
    the output bias. The initial residual is therefore already isotropic
    with the conditioning SNR's noise power, which the alternating game then
    only has to refine; asking gradient descent to discover that calibration
    from a cold start is what stalls in practice. The remaining hidden units
    keep their random init and give the game room to shape the distribution.

    The columns of both first layers that would read the transmitted symbols
    start at zero. For the generator this is permanent (enforced by masks
    during training): an additive-noise residual does not depend on the
    symbols, and severing the path keeps the surrogate's gradient leg honest.
    For the discriminator it is only an initialization nudge so early updates
    attend to the residual rather than to symbol structure.
    """
    if noise_width is None:
        noise_width = n_symbols
    if gen_hidden is None:
        gen_hidden = n_symbols + 64
    if gen_hidden < n_symbols:
        raise ContractViolation("generator hidden layer narrower than the noise path")
    if noise_width < n_symbols:
        raise ContractViolation("seed vector narrower than the symbol block")
    gen = init_mlp([n_symbols + 1 + noise_width, gen_hidden, n_symbols],
                   ["relu", "identity"], rng)
    gen.layers[0].weight[:n_symbols, :] = 0.0
    z_start = n_symbols + 1
    gen.layers[0].weight[:, :n_symbols] = 0.0
    gen.layers[0].weight[z_start:z_start + n_symbols, :n_symbols] = np.eye(n_symbols)
    gen.layers[0].bias[:n_symbols] = _NOISE_PATH_BIAS
    gen.layers[1].weight[:n_symbols, :] = np.eye(n_symbols)
    gen.layers[1].bias[:] = -_NOISE_PATH_BIAS
    disc = init_mlp([2 * n_symbols + 1, disc_hidden, 1], ["relu", "sigmoid"], rng)
    disc.layers[0].weight[:n_symbols, :] = 0.0
    return ChannelGan(gen, disc, noise_width)


def generator_update_masks(gan: ChannelGan) -> list[np.ndarray]:
    """Adam masks pinning the generator's symbol-input columns at zero."""
    masks = []
    for i, p in enumerate(gan.generator.params()):
        m = np.ones_like(p)
        if i == 0:
            m[: gan.n_symbols, :] = 0.0
        masks.append(m)
    return masks


@dataclass
class Observations:
    """Pooled real transmissions: per row, sent block, SNR used, received block."""

    x: np.ndarray
    snr_db: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if not (self.x.shape == self.y.shape and self.x.shape[0] == self.snr_db.shape[0]):
            raise ShapeMismatch("observation arrays disagree on row count or width")

    def __len__(self) -> int:
        return self.x.shape[0]


def gather_observations(codec: SemanticCodec, snrs, images: np.ndarray,
                        blocks_per_snr: int, rng: Rng,
                        batch_size: int = 128) -> Observations:
    """Transmit encoded image batches over a live channel at each listed SNR."""
    if blocks_per_snr < 1:
        raise ContractViolation("need at least one observation block per SNR")
    xs, fs, ys = [], [], []
    ch = ChannelModel("awgn", 0.0)
    for snr in snrs:
        ch.snr_db = float(snr)
        for _ in range(blocks_per_snr):
            idx = rng.integers(0, images.shape[0], size=batch_size)
            zn = encode(codec, images[idx])
            y, h = transmit(ch, zn, rng)
            if h != 1.0:
                y = y / h
            xs.append(zn)
            fs.append(np.full(batch_size, float(snr)))
            ys.append(y)
    return Observations(np.concatenate(xs), np.concatenate(fs), np.concatenate(ys))


@dataclass
class GanTraceRow:
    epoch: int
    d_loss: float
    g_loss: float
    fid_score: float
    kept: bool


def _probe_fidelity(gan: ChannelGan, probe_x: np.ndarray,
                    probe_sets: list[tuple[float, np.ndarray, np.ndarray]]) -> float:
    """Worst-case calibration score over the probe SNRs; <= 1 is in-window.

    Scores pooled variance and mean against the acceptance windows, plus the
    normalized covariance gap to the isotropic target (rms of C/sigma^2 - I,
    whose sampling floor at this probe size is well under the 0.3 budget).
    """
    worst = 0.0
    for snr, f_col, z in probe_sets:
        r = forward(gan.generator, generator_input(probe_x, f_col, z))
        var = float(r.var())
        if var < 1e-6:
            raise TrainingFault("generator collapsed: residual variance < 1e-6")
        sig2 = noise_variance(snr)
        centered = r - r.mean(axis=0, keepdims=True)
        cov_gap = centered.T @ centered / r.shape[0] / sig2 - np.eye(r.shape[1])
        worst = max(worst,
                    abs(float(np.log(var / sig2))) / _PROBE_LOG_RATIO,
                    abs(float(r.mean())) / _PROBE_MEAN_TOL,
                    float(np.sqrt(np.mean(cov_gap ** 2))) / 0.3)
    return worst


def train_gan(gan: ChannelGan, observations: Observations, epochs: int, rng: Rng,
              warm_epochs: int = 100, warm_lr: float = 3e-4,
              lr_g: float = 1e-4, lr_d: float = 1e-3,
              batch_size: int = 128) -> tuple[ChannelGan, list[GanTraceRow]]:
    """Two-phase surrogate training; mutates gan in place and returns it.

    Phase one drives each residual component's mean to zero and its variance
    to the SNR level's noise power. Pooled scalar moments are not enough
    here: a generator can fake pooled variance with a static per-component
    pattern that a fine-tuned decoder simply learns to subtract. Full-matrix
    covariance matching overshoots the other way: the off-diagonal sampling
    noise of a batch-sized covariance estimate grows with scale, biasing the
    optimum toward sigma^2/(1 + dim/batch), so cross-component structure is
    left to the noise-path init plus the game rather than penalized directly.
    Phase two runs the alternating bce game. The game sharpens distribution
    shape but tends to wander on raw scale, so each epoch is scored against a
    fixed held-out probe and the best-scoring generator snapshot is what the
    function ultimately keeps.
    """
    if len(observations) < batch_size:
        raise ContractViolation("observation pool smaller than one batch")
    if observations.x.shape[1] != gan.n_symbols:
        raise ShapeMismatch("observation width does not match the generator")
    levels = sorted(set(float(s) for s in observations.snr_db))
    by_level = {s: np.flatnonzero(observations.snr_db == s) for s in levels}
    masks = generator_update_masks(gan)
    opt_warm = Adam(gan.generator, lr=warm_lr)

    for _ in range(warm_epochs):
        for s in levels:
            idx = rng.choice(by_level[s], size=batch_size)
            x = observations.x[idx]
            f_col = np.full((batch_size, 1), snr_feature(s))
            z = rng.normal(size=(batch_size, gan.noise_width))
            r, caches = forward_cached(gan.generator, generator_input(x, f_col, z))
            sig2 = noise_variance(s)
            rows, dim = r.shape
            mu = r.mean(axis=0, keepdims=True)
            centered = r - mu
            var = np.mean(centered ** 2, axis=0, keepdims=True)
            # d/dr of mean_j((var_j - sig2)^2)/sig2^2 + mean_j(mu_j^2)/sig2
            d_r = ((2.0 * (var - sig2) / sig2 ** 2) * (2.0 / rows) * centered
                   + (2.0 * mu / sig2) / rows) / dim
            grads, _ = backward_from_output(gan.generator, caches, d_r)
            opt_warm.step(gan.generator, grads, masks=masks)

    probe_rows = min(500, len(observations))
    probe_x = observations.x[:probe_rows]
    probe_levels = (levels[-1], levels[len(levels) // 2], levels[0])
    probe_sets = []
    for snr in probe_levels:
        probe_sets.append((snr,
                           np.full((probe_rows, 1), snr_feature(snr)),
                           rng.normal(size=(probe_rows, gan.noise_width))))

    best_score = _probe_fidelity(gan, probe_x, probe_sets)
    best_params = [p.copy() for p in gan.generator.params()]
    trace: list[GanTraceRow] = []

    opt_g = Adam(gan.generator, lr=lr_g)
    opt_d = Adam(gan.discriminator, lr=lr_d)
    n = len(observations)
    ones = np.ones((batch_size, 1))
    zeros = np.zeros((batch_size, 1))
    both = np.concatenate([ones, zeros])
    for epoch in range(epochs):
        perm = rng.permutation(n)
        d_losses, g_losses = [], []
        for lo in range(0, n - batch_size + 1, batch_size):
            idx = perm[lo:lo + batch_size]
            x = observations.x[idx]
            f_col = (observations.snr_db[idx] / SNR_FEATURE_SCALE)[:, None]
            real_resid = observations.y[idx] - x

            z = rng.normal(size=(batch_size, gan.noise_width))
            fake_resid = forward(gan.generator, generator_input(x, f_col, z))
            d_in = np.concatenate([
                np.concatenate([x, f_col, real_resid], axis=1),
                np.concatenate([x, f_col, fake_resid], axis=1),
            ])
            d_loss, d_grads, _ = backward_with_input_grad(
                gan.discriminator, d_in, "bce", both)
            opt_d.step(gan.discriminator, d_grads)
            d_losses.append(d_loss)

            z = rng.normal(size=(batch_size, gan.noise_width))
            fake_resid, caches = forward_cached(
                gan.generator, generator_input(x, f_col, z))
            g_loss, _, d_dx = backward_with_input_grad(
                gan.discriminator,
                np.concatenate([x, f_col, fake_resid], axis=1), "bce", ones)
            g_grads, _ = backward_from_output(
                gan.generator, caches, d_dx[:, gan.n_symbols + 1:])
            opt_g.step(gan.generator, g_grads, masks=masks)
            g_losses.append(g_loss)

        score = _probe_fidelity(gan, probe_x, probe_sets)
        kept = score < best_score
        if kept:
            best_score = score
            best_params = [p.copy() for p in gan.generator.params()]
        trace.append(GanTraceRow(epoch, float(np.mean(d_losses)),
                                 float(np.mean(g_losses)), score, kept))

    gan.generator.set_params(best_params)
    gan.snap_to_storage()
    return gan, trace


def gan_leg(gan: ChannelGan, snr_db: float, rng: Rng) -> ChannelLeg:
    """Frozen surrogate as a differentiable channel leg.

    Gradients flow to the transmitted symbols both directly (residual
    structure) and through the generator's symbol inputs; the generator's own
    parameters are read, never written.
    """
    f = snr_feature(snr_db)

    def leg(zn: np.ndarray):
        z = rng.normal(size=(zn.shape[0], gan.noise_width))
        f_col = np.full((zn.shape[0], 1), f)
        resid, caches = forward_cached(gan.generator, generator_input(zn, f_col, z))
        y = zn + resid

        def backward(dy: np.ndarray) -> np.ndarray:
            _, d_in = backward_from_output(gan.generator, caches, dy)
            return dy + d_in[:, : gan.n_symbols]

        return y, backward

    return leg


SAMPLE_SOURCES = ("real_channel", "gan")


@dataclass
class CodecTuner:
    """Codec plus persistent optimizer state for a fine-tuning session."""

    codec: SemanticCodec
    opt_enc: Adam
    opt_dec: Adam
    decoder_only: bool = False


def make_tuner(codec: SemanticCodec, lr: float = 1e-4,
               decoder_only: bool = False) -> CodecTuner:
    return CodecTuner(codec, Adam(codec.encoder, lr=lr),
                      Adam(codec.decoder, lr=lr), decoder_only)


def finetune_step(tuner: CodecTuner, batch: np.ndarray, snr_db: float,
                  sample_source: str, rng: Rng,
                  channel: ChannelModel | None = None,
                  gan: ChannelGan | None = None) -> tuple[float, float]:
    """One end-to-end reconstruction update; returns (mse, psnr).

    With sample_source "real_channel" the live channel is retuned to snr_db
    and transmits the batch; with "gan" the frozen surrogate stands in and no
    transmission happens at all.
    """
    if sample_source not in SAMPLE_SOURCES:
        raise ContractViolation(f"unknown sample source {sample_source!r}")
    if sample_source == "real_channel":
        if channel is None:
            raise ContractViolation("real_channel fine-tuning needs a live channel")
        channel.snr_db = float(snr_db)
        leg = real_channel_leg(channel, rng)
    else:
        if gan is None:
            raise ContractViolation("gan fine-tuning needs a trained surrogate")
        leg = gan_leg(gan, snr_db, rng)
    return end_to_end_update(tuner.codec, batch, leg, tuner.opt_enc,
                             tuner.opt_dec, decoder_only=tuner.decoder_only)


DRIFT_MODES = ("none", "finetune_real", "finetune_gan")


def default_drift_schedule() -> SnrSchedule:
    """21 dB start, stepping down 3 dB at epochs 20, 30, 40, 50."""
    return SnrSchedule(((0, 21.0), (20, 18.0), (30, 15.0), (40, 12.0), (50, 9.0)))


@dataclass
class DriftRow:
    epoch: int
    snr_db: float
    mse: float
    psnr: float
    mode: str


@dataclass
class DriftRun:
    schedule: SnrSchedule
    mode: str
    samples_per_epoch: int
    rows: list[DriftRow]
    live_tune_blocks: int
    codec: SemanticCodec


def run_drift(codec: SemanticCodec, schedule: SnrSchedule, mode: str,
              epochs_total: int, rng: Rng, *, dataset,
              gan: ChannelGan | None = None, samples_per_epoch: int = 20,
              batch_size: int = 128, val_size: int = 1000, lr: float = 1e-4,
              decoder_only: bool = False) -> DriftRun:
    """Walk the SNR schedule, measuring first and adapting second each epoch.

    The input codec is copied, never mutated. Evaluation always uses a live
    channel (it is a measurement, not an adaptation step); the tuning path
    touches a live channel only in finetune_real mode, and live_tune_blocks
    counts exactly those transmissions.
    """
    if mode not in DRIFT_MODES:
        raise ContractViolation(f"unknown drift mode {mode!r}")
    if mode == "finetune_gan" and gan is None:
        raise ContractViolation("finetune_gan needs a trained surrogate")
    work = codec.copy()
    tuner = make_tuner(work, lr=lr, decoder_only=decoder_only) if mode != "none" else None
    eval_ch = ChannelModel("awgn", schedule_snr(schedule, 0))
    tune_ch = ChannelModel("awgn", schedule_snr(schedule, 0)) if mode == "finetune_real" else None
    val = dataset.test_x[:val_size]
    train_x = dataset.train_x
    rows: list[DriftRow] = []
    for epoch in range(epochs_total):
        snr = schedule_snr(schedule, epoch)
        eval_ch.snr_db = snr
        total = 0.0
        for lo in range(0, val.shape[0], 500):
            chunk = val[lo:lo + 500]
            _, chunk_mse, _ = codec_round_trip(work, eval_ch, chunk, rng)
            total += chunk_mse * chunk.shape[0]
        mse = total / val.shape[0]
        rows.append(DriftRow(epoch, snr, mse, psnr(mse), mode))
        if tuner is not None:
            source = "real_channel" if mode == "finetune_real" else "gan"
            for _ in range(samples_per_epoch):
                idx = rng.integers(0, train_x.shape[0], size=batch_size)
                finetune_step(tuner, train_x[idx], snr, source, rng,
                              channel=tune_ch, gan=gan)
    live = tune_ch.transmit_count if tune_ch is not None else 0
    return DriftRun(schedule, mode, samples_per_epoch, rows, live, work)
