"""Lightweight transmission: weight compression and feedback-driven sampling.

Two independent cost levers for a constrained sender. The first shrinks the
model itself (global magnitude pruning with masked fine-tuning, symmetric
per-tensor quantization). The second shrinks the payload: the sender ships a
few image patches per round and the receiver, watching its own classifier
posterior, requests the patches whose absence hurts confidence the most.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelModel, transmit
from .codec import SemanticCodec, encode, end_to_end_update, make_codec, real_channel_leg
from .data import Dataset
from .errors import ContractViolation, ShapeMismatch
from .metrics import MetricsTable
from .nn import (
    Adam,
    Mlp,
    Rng,
    backward_from_output,
    backward_with_input_grad,
    forward,
    forward_cached,
    init_mlp,
)


# ---------------------------------------------------------------------------
# magnitude pruning


@dataclass(frozen=True)
class PruneSpec:
    """Fraction of weight entries to zero, picked globally by magnitude."""

    ratio: float

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ContractViolation(f"prune ratio must lie in [0, 1), got {self.ratio}")


def _global_keep_masks(weights: list[np.ndarray], ratio: float) -> list[np.ndarray]:
    """One keep-mask per weight matrix; the cut set is global across all of them."""
    flat = np.concatenate([np.abs(w).ravel() for w in weights])
    n_cut = int(math.floor(ratio * flat.size))
    keep = np.ones(flat.size)
    if n_cut > 0:
        order = np.argsort(flat, kind="stable")
        keep[order[:n_cut]] = 0.0
    masks = []
    pos = 0
    for w in weights:
        masks.append(keep[pos:pos + w.size].reshape(w.shape))
        pos += w.size
    return masks


def _interleave_bias_none(weight_masks: list[np.ndarray]) -> list:
    """Masks in params() order (w0, b0, w1, b1, ...); biases are never pruned."""
    out: list = []
    for m in weight_masks:
        out.extend([m, None])
    return out


def prune(net: Mlp, spec: PruneSpec) -> tuple[Mlp, list]:
    """Zero the globally smallest-magnitude weights; biases are exempt.

    Returns the pruned copy and masks aligned with params() order, ready to
    hand to the optimizer so fine-tuning cannot resurrect a cut weight.
    """
    pruned = net.copy()
    weight_masks = _global_keep_masks([l.weight for l in pruned.layers], spec.ratio)
    for layer, mask in zip(pruned.layers, weight_masks):
        layer.weight *= mask
    return pruned, _interleave_bias_none(weight_masks)


def sparsity(net: Mlp) -> float:
    """Fraction of exactly-zero entries among weight matrices (biases ignored)."""
    total = sum(l.weight.size for l in net.layers)
    zeros = sum(int(np.count_nonzero(l.weight == 0.0)) for l in net.layers)
    return zeros / total


def prune_codec(codec: SemanticCodec, spec: PruneSpec
                ) -> tuple[SemanticCodec, list, list]:
    """Prune encoder and decoder against one shared magnitude threshold."""
    out = codec.copy()
    nets = [out.encoder, out.decoder]
    weights = [l.weight for net in nets for l in net.layers]
    masks = _global_keep_masks(weights, spec.ratio)
    for w, m in zip(weights, masks):
        w *= m
    split = len(out.encoder.layers)
    return out, _interleave_bias_none(masks[:split]), _interleave_bias_none(masks[split:])


def finetune_pruned(codec: SemanticCodec, enc_masks: list, dec_masks: list,
                    ch: ChannelModel, dataset: Dataset, epochs: int, rng: Rng,
                    lr: float = 1e-3, batch_size: int = 128) -> SemanticCodec:
    """Recovery training after pruning; masked Adam keeps cut weights at zero."""
    codec = codec.copy()
    opt_enc = Adam(codec.encoder, lr=lr)
    opt_dec = Adam(codec.decoder, lr=lr)
    leg = real_channel_leg(ch, rng)
    train_x = np.asarray(dataset.train_x, dtype=np.float64)
    for _ in range(epochs):
        order = rng.permutation(train_x.shape[0])
        for lo in range(0, train_x.shape[0], batch_size):
            batch = train_x[order[lo:lo + batch_size]]
            end_to_end_update(codec, batch, leg, opt_enc, opt_dec,
                              enc_masks=enc_masks, dec_masks=dec_masks)
    codec.snap_to_storage()
    return codec


# ---------------------------------------------------------------------------
# symmetric quantization


QUANT_BITS = (4, 8)


@dataclass(frozen=True)
class QuantSpec:
    bits: int

    def __post_init__(self):
        if self.bits not in QUANT_BITS:
            raise ContractViolation(f"bits must be one of {QUANT_BITS}, got {self.bits}")


@dataclass
class QuantizedTensor:
    """Integer codes plus one scale; dequantized value is codes * scale."""

    codes: np.ndarray  # int8, same shape as the source tensor
    scale: float
    name: str = ""

    def dequantize(self) -> np.ndarray:
        return self.codes.astype(np.float64) * self.scale


def quantize_tensor(w: np.ndarray, spec: QuantSpec, name: str = "") -> QuantizedTensor:
    """Symmetric per-tensor codes; ties round half to even.

    An all-zero tensor has no scale to speak of, so it maps to zero codes and
    zero scale and survives the round trip untouched.
    """
    w = np.asarray(w, dtype=np.float64)
    q_max = 2 ** (spec.bits - 1) - 1
    amax = float(np.max(np.abs(w))) if w.size else 0.0
    if amax == 0.0:
        return QuantizedTensor(np.zeros(w.shape, dtype=np.int8), 0.0, name)
    scale = amax / q_max
    codes = np.clip(np.rint(w / scale), -q_max, q_max).astype(np.int8)
    return QuantizedTensor(codes, scale, name)


def quantize(net: Mlp, spec: QuantSpec) -> tuple[list[QuantizedTensor], Mlp]:
    """Quantize every parameter tensor; returns codes and the dequantized net."""
    tensors = [quantize_tensor(p, spec, name)
               for p, name in zip(net.params(), net.param_names())]
    out = net.copy()
    out.set_params([t.dequantize() for t in tensors])
    return tensors, out


def quantize_codec(codec: SemanticCodec, spec: QuantSpec
                   ) -> tuple[list[QuantizedTensor], SemanticCodec]:
    enc_t, enc = quantize(codec.encoder, spec)
    dec_t, dec = quantize(codec.decoder, spec)
    for t in enc_t:
        t.name = "encoder." + t.name
    for t in dec_t:
        t.name = "decoder." + t.name
    return enc_t + dec_t, SemanticCodec(enc, dec)


def quantized_bytes(tensors: list[QuantizedTensor], bits: int) -> int:
    """Payload size of the code planes alone, packed at the stated width."""
    n = sum(t.codes.size for t in tensors)
    return (n * bits + 7) // 8


# ---------------------------------------------------------------------------
# patch grid geometry


@dataclass(frozen=True)
class PatchGrid:
    """Square image cut into non-overlapping P x P patches, row-major order.

    The source side is zero-padded on the bottom and right edges up to the
    next multiple of the patch side.
    """

    source: int
    patch: int

    def __post_init__(self):
        if self.patch < 1 or self.source < 1:
            raise ContractViolation("grid sides must be positive")

    @property
    def padded(self) -> int:
        return self.patch * math.ceil(self.source / self.patch)

    @property
    def per_side(self) -> int:
        return self.padded // self.patch

    @property
    def count(self) -> int:
        return self.per_side ** 2

    @property
    def pixels(self) -> int:
        return self.padded ** 2

    def pad(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 1:
            img = img.reshape(self.source, self.source)
        if img.shape != (self.source, self.source):
            raise ShapeMismatch(f"expected a {self.source}x{self.source} image")
        grow = self.padded - self.source
        return np.pad(img, ((0, grow), (0, grow)))

    def to_patches(self, padded_image: np.ndarray) -> np.ndarray:
        """(padded, padded) -> (count, patch*patch), row-major patch order."""
        s, p = self.per_side, self.patch
        return (padded_image.reshape(s, p, s, p)
                .transpose(0, 2, 1, 3)
                .reshape(self.count, p * p))

    def from_patches(self, patches: np.ndarray) -> np.ndarray:
        s, p = self.per_side, self.patch
        return (patches.reshape(s, s, p, p)
                .transpose(0, 2, 1, 3)
                .reshape(self.padded, self.padded))

    def mask_plane(self, patch_mask: np.ndarray) -> np.ndarray:
        """Per-patch flags expanded to a per-pixel 0/1 plane."""
        m = np.asarray(patch_mask, dtype=np.float64).reshape(self.per_side, self.per_side)
        return np.kron(m, np.ones((self.patch, self.patch)))


def pad_and_grid(source_side: int, patch_side: int) -> PatchGrid:
    return PatchGrid(source_side, patch_side)


def edge_select_initial(image: np.ndarray, grid: PatchGrid, k: int) -> np.ndarray:
    """Indices of the k patches with the highest pixel variance.

    Variance is a cheap stand-in for edge density on near-binary images.
    Ties resolve toward the lower patch index.
    """
    if k < 1:
        raise ContractViolation("k must be at least 1")
    patches = grid.to_patches(grid.pad(image))
    variance = patches.var(axis=1)
    order = np.argsort(-variance, kind="stable")
    return order[:min(k, grid.count)].astype(np.int64)


# ---------------------------------------------------------------------------
# patch codec and receiver-side classifier


def make_patch_codec(patch_side: int, rng: Rng, n_symbols: int | None = None,
                     hidden: int | None = None) -> SemanticCodec:
    dim = patch_side * patch_side
    if n_symbols is None:
        n_symbols = dim // 2
    if hidden is None:
        hidden = max(32, dim)
    codec = make_codec(n_symbols, rng, source_dim=dim, hidden=hidden)
    # All-background patches would otherwise encode to an exact zero block,
    # which the power-normalization gradient refuses to divide by.
    codec.encoder.layers[-1].bias[:] = 1e-3
    return codec


def patch_crops(images: np.ndarray, grid: PatchGrid, n_crops: int, rng: Rng) -> np.ndarray:
    """Grid-aligned patches sampled uniformly over (image, cell) pairs."""
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    pick_img = rng.integers(0, images.shape[0], size=n_crops)
    pick_cell = rng.integers(0, grid.count, size=n_crops)
    out = np.empty((n_crops, grid.patch ** 2))
    for i, (ii, ci) in enumerate(zip(pick_img, pick_cell)):
        out[i] = grid.to_patches(grid.pad(images[ii]))[ci]
    return out


def patch_dataset(images: np.ndarray, grid: PatchGrid, rng: Rng,
                  n_train: int = 20000, n_val: int = 2000) -> Dataset:
    """Crop corpus shaped like the image corpus so codec training plugs in."""
    train = patch_crops(images, grid, n_train, rng)
    val = patch_crops(images, grid, n_val, rng)
    zeros_t = np.zeros(n_train, dtype=np.int64)
    zeros_v = np.zeros(n_val, dtype=np.int64)
    return Dataset(train, zeros_t, val, zeros_v, side=grid.patch, source="patch-crops")


def make_canvas_classifier(grid: PatchGrid, rng: Rng, hidden: int = 128) -> Mlp:
    """Digit classifier over a partial canvas and its coverage plane."""
    return init_mlp([2 * grid.pixels, hidden, 10], ["relu", "identity"], rng)


def classifier_input(canvas: np.ndarray, mask_plane: np.ndarray) -> np.ndarray:
    canvas = np.atleast_2d(np.asarray(canvas, dtype=np.float64))
    mask_plane = np.atleast_2d(np.asarray(mask_plane, dtype=np.float64))
    if canvas.shape != mask_plane.shape:
        raise ShapeMismatch("canvas and mask planes must match")
    return np.concatenate([canvas, mask_plane], axis=1)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def posterior_entropy(probs: np.ndarray) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), 1e-300, None)
    return float(-np.sum(p * np.log(p)))


def synthesize_canvases(codec: SemanticCodec, ch: ChannelModel, images: np.ndarray,
                        grid: PatchGrid, rng: Rng,
                        coverage: tuple[float, float] = (0.05, 0.85)
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Partially transmitted canvases for classifier training.

    Each image is cut on the grid, a random fraction of its patches is pushed
    through the patch codec and the channel, and the rest stay blank. Returns
    flattened canvases and matching per-pixel coverage planes.
    """
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    n = images.shape[0]
    lo, hi = coverage
    n_sent = np.maximum(1, np.rint(rng.uniform(lo, hi, size=n) * grid.count)).astype(int)

    sel_mask = np.zeros((n, grid.count), dtype=bool)
    all_patches = np.empty((n, grid.count, grid.patch ** 2))
    for i in range(n):
        all_patches[i] = grid.to_patches(grid.pad(images[i]))
        sel_mask[i, rng.choice(grid.count, size=n_sent[i], replace=False)] = True

    sent = all_patches[sel_mask]
    zn = encode(codec, sent)
    y, h = transmit(ch, zn, rng)
    if h != 1.0:
        y = y / h
    decoded = forward(codec.decoder, y)

    canvases_p = np.zeros_like(all_patches)
    canvases_p[sel_mask] = decoded
    canvases = np.stack([grid.from_patches(canvases_p[i]).ravel() for i in range(n)])
    planes = np.stack([grid.mask_plane(sel_mask[i]).ravel() for i in range(n)])
    return canvases, planes


@dataclass
class ClassifierRow:
    epoch: int
    train_loss: float
    val_accuracy: float


def train_canvas_classifier(classifier: Mlp, codec: SemanticCodec, ch: ChannelModel,
                            images: np.ndarray, labels: np.ndarray,
                            val_images: np.ndarray, val_labels: np.ndarray,
                            grid: PatchGrid, epochs: int, rng: Rng,
                            lr: float = 1e-3, batch_size: int = 128,
                            coverage: tuple[float, float] = (0.05, 0.85),
                            ) -> tuple[Mlp, list[ClassifierRow]]:
    """Cross-entropy training on freshly masked, channel-corrupted canvases.

    Masks and channel noise are redrawn every batch so the classifier sees the
    same kind of partial evidence the sampling loop will hand it.
    """
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] != labels.shape[0]:
        raise ShapeMismatch("image/label count mismatch")
    if classifier.in_width != 2 * grid.pixels:
        raise ShapeMismatch("classifier width does not match the grid")

    val_c, val_p = synthesize_canvases(codec, ch, val_images, grid, rng,
                                       coverage=coverage)
    val_in = classifier_input(val_c, val_p)
    val_y = np.asarray(val_labels, dtype=np.int64)

    opt = Adam(classifier, lr=lr)
    rows: list[ClassifierRow] = []
    for epoch in range(epochs):
        order = rng.permutation(images.shape[0])
        losses = []
        for lo_i in range(0, images.shape[0], batch_size):
            idx = order[lo_i:lo_i + batch_size]
            canvases, planes = synthesize_canvases(codec, ch, images[idx], grid, rng,
                                                   coverage=coverage)
            x = classifier_input(canvases, planes)
            loss, grads, _ = backward_with_input_grad(classifier, x, "cross_entropy",
                                                      labels[idx])
            opt.step(classifier, grads)
            losses.append(loss)
        pred = np.argmax(forward(classifier, val_in), axis=1)
        acc = float(np.mean(pred == val_y))
        rows.append(ClassifierRow(epoch, float(np.mean(losses)), acc))
    classifier.snap_to_storage()
    return classifier, rows


# ---------------------------------------------------------------------------
# receiver feedback and the sampling session


STOP_THRESHOLD = 0.95


@dataclass(frozen=True)
class FeedbackMessage:
    """Receiver verdict after a round: either stop, or name the next patches."""

    requested: tuple[int, ...]
    top_class: int
    top_prob: float
    entropy: float
    stop: bool


def receiver_feedback(classifier: Mlp, canvas: np.ndarray, mask: np.ndarray,
                      k: int, grid: PatchGrid,
                      stop_threshold: float = STOP_THRESHOLD) -> FeedbackMessage:
    """Saliency-ranked patch requests from one classifier gradient pass.

    Saliency of an unsent patch is the summed absolute gradient of the
    current top-class logit with respect to its canvas pixels: how much the
    decision would move if those pixels changed at all.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (grid.count,):
        raise ShapeMismatch("mask must carry one flag per patch")
    x = classifier_input(canvas.ravel(), grid.mask_plane(mask).ravel())
    logits, caches = forward_cached(classifier, x)
    probs = _softmax_rows(logits)[0]
    top = int(np.argmax(probs))
    top_prob = float(probs[top])
    entropy = posterior_entropy(probs)

    stop = top_prob >= stop_threshold or bool(mask.all())
    if stop:
        return FeedbackMessage((), top, top_prob, entropy, True)

    seed = np.zeros((1, classifier.out_width))
    seed[0, top] = 1.0
    _, d_in = backward_from_output(classifier, caches, seed)
    pixel_grad = np.abs(d_in[0, :grid.pixels]).reshape(grid.padded, grid.padded)
    saliency = grid.to_patches(pixel_grad).sum(axis=1)

    unsent = np.flatnonzero(~mask)
    ranked = unsent[np.argsort(-saliency[unsent], kind="stable")]
    return FeedbackMessage(tuple(int(i) for i in ranked[:k]), top, top_prob,
                           entropy, False)


@dataclass
class SamplingSession:
    """Everything one progressive-transmission episode produced."""

    grid: PatchGrid
    k: int
    rounds_max: int
    rounds_used: int
    sent: tuple[int, ...]
    symbols_sent: int
    image: np.ndarray
    canvas: np.ndarray  # (padded, padded): reconstructions where sent, zeros elsewhere
    mask: np.ndarray    # (count,) bool
    trace: list[FeedbackMessage] = field(default_factory=list)
    predicted: int = -1
    label: int = -1
    image_id: int = -1
    stopped_early: bool = False

    @property
    def correct(self) -> bool:
        return self.predicted == self.label


def run_session(codec: SemanticCodec, ch: ChannelModel, classifier: Mlp,
                image: np.ndarray, label: int, patch_side: int, rounds: int,
                k: int, rng: Rng, stop_threshold: float = STOP_THRESHOLD,
                image_id: int = -1) -> SamplingSession:
    """Progressive patch transmission with receiver-chosen continuation.

    Round one ships the sender's variance pick; every later round ships
    whatever the receiver asked for, until it is confident, runs out of
    rounds, or has seen everything.
    """
    image = np.asarray(image, dtype=np.float64).ravel()
    side = math.isqrt(image.size)
    if side * side != image.size:
        raise ShapeMismatch("image must be square")
    if rounds < 1:
        raise ContractViolation("need at least one round")
    grid = pad_and_grid(side, patch_side)
    if codec.source_dim != patch_side ** 2:
        raise ShapeMismatch("codec block size does not match the patch")
    if classifier.in_width != 2 * grid.pixels:
        raise ShapeMismatch("classifier width does not match the grid")

    source_patches = grid.to_patches(grid.pad(image))
    canvas_patches = np.zeros_like(source_patches)
    mask = np.zeros(grid.count, dtype=bool)
    sent: list[int] = []
    symbols = 0

    def ship(indices: np.ndarray) -> None:
        nonlocal symbols
        if mask[indices].any():
            raise ContractViolation("patch retransmission is forbidden")
        zn = encode(codec, source_patches[indices])
        y, h = transmit(ch, zn, rng)
        if h != 1.0:
            y = y / h
        canvas_patches[indices] = forward(codec.decoder, y)
        mask[indices] = True
        sent.extend(int(i) for i in indices)
        symbols += len(indices) * codec.n_symbols

    trace: list[FeedbackMessage] = []
    ship(edge_select_initial(image, grid, k))
    fb = receiver_feedback(classifier, grid.from_patches(canvas_patches), mask, k,
                           grid, stop_threshold)
    trace.append(fb)
    rounds_used = 1
    while rounds_used < rounds and not fb.stop and fb.requested:
        ship(np.asarray(fb.requested, dtype=np.int64))
        fb = receiver_feedback(classifier, grid.from_patches(canvas_patches), mask, k,
                               grid, stop_threshold)
        trace.append(fb)
        rounds_used += 1

    return SamplingSession(grid=grid, k=k, rounds_max=rounds,
                           rounds_used=rounds_used, sent=tuple(sent),
                           symbols_sent=symbols, image=image,
                           canvas=grid.from_patches(canvas_patches), mask=mask,
                           trace=trace, predicted=trace[-1].top_class,
                           label=int(label), image_id=image_id,
                           stopped_early=trace[-1].stop and rounds_used < rounds)


def evaluate_sampling(codec: SemanticCodec, ch: ChannelModel, classifier: Mlp,
                      images: np.ndarray, labels: np.ndarray, patch_side: int,
                      rounds: int, k: int, rng: Rng,
                      stop_threshold: float = STOP_THRESHOLD
                      ) -> tuple[float, list[SamplingSession]]:
    """Accuracy of one (patch, rounds) cell over a batch of sessions."""
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    sessions = [run_session(codec, ch, classifier, images[i], int(labels[i]),
                            patch_side, rounds, k, rng, stop_threshold, image_id=i)
                for i in range(images.shape[0])]
    accuracy = float(np.mean([s.correct for s in sessions]))
    return accuracy, sessions


def session_table(sessions: list[SamplingSession]) -> MetricsTable:
    """Flatten session traces into the shared delimited-table container."""
    rounds_max = max((s.rounds_max for s in sessions), default=0)
    header = ["image_id", "patch", "rounds_max", "rounds_used", "correct",
              "symbols_sent"]
    header += [f"entropy_round_{r}" for r in range(1, rounds_max + 1)]
    rows = []
    for s in sessions:
        ent = [s.trace[r].entropy if r < len(s.trace) else ""
               for r in range(rounds_max)]
        rows.append(tuple([s.image_id, s.grid.patch, s.rounds_max, s.rounds_used,
                           s.correct, s.symbols_sent] + ent))
    return MetricsTable(tuple(header), rows)
