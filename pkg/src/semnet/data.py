"""Dataset ingestion: IDX-format loader plus a deterministic synthetic fallback.

The image corpus contract is 28x28 grayscale digits in [0,1] with labels 0-9.
When no IDX directory is supplied (flag or SEMNET_DATA), a procedural
dot-matrix digit corpus stands in; it is seed-deterministic so every
experiment remains byte-reproducible without any files on disk.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError
from .nn import named_stream

IDX_UBYTE = 0x08

# 5x7 dot-matrix glyphs, row-major, one string per row
_GLYPHS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


@dataclass
class Dataset:
    train_x: np.ndarray  # (n_train, side*side) float64 in [0,1]
    train_y: np.ndarray  # (n_train,) int labels 0-9
    test_x: np.ndarray
    test_y: np.ndarray
    source: str  # "idx" or "synthetic"
    side: int = 28


def read_idx(path: str) -> np.ndarray:
    """Parse one IDX unsigned-byte file into an ndarray of its declared shape."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4:
        raise DataFormatError(f"{path}: header truncated", offset=len(blob))
    if blob[0] != 0 or blob[1] != 0:
        raise DataFormatError(f"{path}: bad magic bytes {blob[:2]!r}", offset=0)
    if blob[2] != IDX_UBYTE:
        raise DataFormatError(f"{path}: unsupported element type 0x{blob[2]:02x}", offset=2)
    ndim = blob[3]
    header_end = 4 + 4 * ndim
    if len(blob) < header_end:
        raise DataFormatError(f"{path}: dimension table truncated", offset=len(blob))
    dims = struct.unpack(f">{ndim}I", blob[4:header_end])
    count = int(np.prod(dims, dtype=np.int64)) if dims else 0
    if len(blob) < header_end + count:
        raise DataFormatError(
            f"{path}: payload ends early, expected {header_end + count} bytes",
            offset=len(blob),
        )
    data = np.frombuffer(blob, dtype=np.uint8, count=count, offset=header_end)
    return data.reshape(dims)


def _find_idx_file(root: str, stem: str) -> str:
    # both common spellings: train-images-idx3-ubyte and train-images.idx3-ubyte
    for name in (stem.replace(".", "-"), stem):
        p = os.path.join(root, name)
        if os.path.exists(p):
            return p
        if os.path.exists(p + ".gz"):
            raise DataFormatError(f"{p}.gz found; decompress it first")
    raise DataFormatError(f"no IDX file for {stem!r} under {root}")


def load_mnist(path: str) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Load the four standard IDX files; pixels scaled to [0,1], images flattened."""
    pairs = []
    for split in ("train", "t10k"):
        images = read_idx(_find_idx_file(path, f"{split}-images.idx3-ubyte"))
        labels = read_idx(_find_idx_file(path, f"{split}-labels.idx1-ubyte"))
        if images.ndim != 3:
            raise DataFormatError(f"{split} images: expected 3 dimensions, got {images.ndim}")
        if labels.ndim != 1:
            raise DataFormatError(f"{split} labels: expected 1 dimension, got {labels.ndim}")
        if images.shape[0] != labels.shape[0]:
            raise DataFormatError(
                f"{split}: {images.shape[0]} images vs {labels.shape[0]} labels")
        x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
        pairs.append((x, labels.astype(np.int64)))
    return pairs[0], pairs[1]


def _smooth(img: np.ndarray) -> np.ndarray:
    # separable [0.25, 0.5, 0.25] blur, edge-padded
    k = np.array([0.25, 0.5, 0.25])
    p = np.pad(img, 1, mode="edge")
    h = k[0] * p[:, :-2] + k[1] * p[:, 1:-1] + k[2] * p[:, 2:]
    return k[0] * h[:-2, :] + k[1] * h[1:-1, :] + k[2] * h[2:, :]


def synthetic_digits(n: int, rng: np.random.Generator, side: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """Procedural dot-matrix digit images: glyph at a random offset, blurred, noisy."""
    scale = 3
    gh, gw = 7 * scale, 5 * scale
    xs = np.empty((n, side * side))
    ys = rng.integers(0, 10, size=n)
    for i in range(n):
        glyph = np.array([[int(c) for c in row] for row in _GLYPHS[int(ys[i])]], dtype=np.float64)
        glyph = glyph * rng.uniform(0.85, 1.0, size=glyph.shape)  # per-dot jitter
        big = np.kron(glyph, np.ones((scale, scale)))
        canvas = np.zeros((side, side))
        # near-centered with small positional jitter, like center-of-mass-normalized corpora
        r0 = (side - gh) // 2 + int(rng.integers(-2, 3))
        c0 = (side - gw) // 2 + int(rng.integers(-2, 3))
        canvas[r0:r0 + gh, c0:c0 + gw] = big * rng.uniform(0.75, 1.0)
        canvas = _smooth(canvas)
        canvas += rng.normal(0.0, 0.03, size=canvas.shape)
        xs[i] = np.clip(canvas, 0.0, 1.0).ravel()
    return xs, ys.astype(np.int64)


def upscale2x(images: np.ndarray, side: int = 28) -> np.ndarray:
    """Bilinear 2x upscale of flattened square images (e.g. 28x28 -> 56x56)."""
    n = images.shape[0]
    out_side = 2 * side
    img = images.reshape(n, side, side)
    # output sample centers map to input coordinates (i + 0.5)/2 - 0.5
    coords = (np.arange(out_side) + 0.5) / 2.0 - 0.5
    lo = np.clip(np.floor(coords).astype(int), 0, side - 1)
    hi = np.clip(lo + 1, 0, side - 1)
    frac = np.clip(coords - lo, 0.0, 1.0)
    rows = img[:, lo, :] * (1 - frac)[None, :, None] + img[:, hi, :] * frac[None, :, None]
    full = (rows[:, :, lo] * (1 - frac)[None, None, :]
            + rows[:, :, hi] * frac[None, None, :])
    return full.reshape(n, out_side * out_side)


DEFAULT_N_TRAIN = 8192
DEFAULT_N_TEST = 2000


def load_dataset(data_dir: str | None = None, seed: int = 0,
                 n_train: int = DEFAULT_N_TRAIN, n_test: int = DEFAULT_N_TEST) -> Dataset:
    """Resolve the corpus: explicit directory, then SEMNET_DATA, then synthetic.

    IDX loads are subsampled deterministically to (n_train, n_test) so run
    times stay desk-scale regardless of source.
    """
    root = data_dir or os.environ.get("SEMNET_DATA")
    if root:
        (tx, ty), (ex, ey) = load_mnist(root)
        rng = named_stream(seed, "data.subsample")
        ti = rng.permutation(tx.shape[0])[:n_train]
        ei = rng.permutation(ex.shape[0])[:n_test]
        return Dataset(tx[ti], ty[ti], ex[ei], ey[ei], source="idx")
    tx, ty = synthetic_digits(n_train, named_stream(seed, "data.synthetic.train"))
    ex, ey = synthetic_digits(n_test, named_stream(seed, "data.synthetic.test"))
    return Dataset(tx, ty, ex, ey, source="synthetic")
