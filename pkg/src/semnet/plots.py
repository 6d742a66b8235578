"""SVG line charts rendered from metrics tables.

The CSV is the authoritative artifact; these figures are reading aids. Each
known table schema gets one chart. Classification is by header shape, so the
report command can be pointed at any mix of run outputs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

CODEC_TRAINING_HEADER = ("epoch", "snr_db", "train_mse", "val_mse", "val_psnr")
DRIFT_HEADER = ("epoch", "snr_db", "mse", "psnr", "mode")
SAMPLING_HEADER_PREFIX = ("image_id", "patch", "rounds_max", "rounds_used",
                          "correct", "symbols_sent")
ORCHESTRATION_HEADER_PREFIX = ("slot", "qoe_0")
COMPRESS_HEADER = ("variant", "setting", "val_psnr", "delta_db", "sparsity",
                   "payload_bytes")


def classify_table(header: tuple[str, ...]) -> str:
    if header == CODEC_TRAINING_HEADER:
        return "codec-training"
    if header == DRIFT_HEADER:
        return "drift"
    if header[:len(SAMPLING_HEADER_PREFIX)] == SAMPLING_HEADER_PREFIX:
        return "sampling"
    if header[:len(ORCHESTRATION_HEADER_PREFIX)] == ORCHESTRATION_HEADER_PREFIX:
        return "orchestration"
    if header == COMPRESS_HEADER:
        return "compress"
    return "unknown"


def _column(header, rows, name, cast=float):
    ix = header.index(name)
    return np.array([cast(r[ix]) for r in rows])


def _new_axes(title, xlabel, ylabel):
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    return fig, ax


def plot_codec_training(header, rows, path: str) -> None:
    epoch = _column(header, rows, "epoch")
    fig, ax = _new_axes("codec training", "epoch", "dB")
    ax.plot(epoch, _column(header, rows, "val_psnr"), marker="o", label="val PSNR")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_drift(header, rows, path: str) -> None:
    epoch = _column(header, rows, "epoch")
    fig, ax = _new_axes("psnr under snr drift", "epoch", "dB")
    ax.plot(epoch, _column(header, rows, "psnr"), label="val PSNR")
    ax.plot(epoch, _column(header, rows, "snr_db"), linestyle="--",
            label="channel SNR", drawstyle="steps-post")
    mode = rows[0][header.index("mode")] if rows else "?"
    ax.legend(title=f"mode: {mode}")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_sampling(header, rows, path: str) -> None:
    entropy_cols = [h for h in header if h.startswith("entropy_round_")]
    means, labels = [], []
    for col in entropy_cols:
        ix = header.index(col)
        vals = [float(r[ix]) for r in rows if r[ix] != ""]
        if vals:
            means.append(float(np.mean(vals)))
            labels.append(int(col.rsplit("_", 1)[1]))
    acc = float(np.mean(_column(header, rows, "correct")))
    fig, ax = _new_axes(f"receiver entropy by round (accuracy {acc:.3f})",
                        "round", "posterior entropy (nats)")
    ax.plot(labels, means, marker="o")
    ax.set_xticks(labels)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_orchestration(header, rows, path: str) -> None:
    slot = _column(header, rows, "slot")
    mean_q = _column(header, rows, "mean_qoe")
    window = max(1, len(mean_q) // 100)
    kernel = np.ones(window) / window
    smooth = np.convolve(mean_q, kernel, mode="valid")
    fig, ax = _new_axes("network mean QoE over training", "slot", "QoE")
    ax.plot(slot, mean_q, alpha=0.25, linewidth=0.6, label="per slot")
    ax.plot(slot[window - 1:], smooth, label=f"rolling mean ({window} slots)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_compress(header, rows, path: str) -> None:
    labels = [f"{r[header.index('variant')]}\n{r[header.index('setting')]}".strip()
              for r in rows]
    delta = _column(header, rows, "delta_db")
    fig, ax = _new_axes("psnr cost of weight compression", "", "delta vs baseline (dB)")
    ax.plot(range(len(delta)), delta, marker="s")
    ax.set_xticks(range(len(delta)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.axhline(0.0, color="gray", linewidth=0.8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


_RENDERERS = {
    "codec-training": plot_codec_training,
    "drift": plot_drift,
    "sampling": plot_sampling,
    "orchestration": plot_orchestration,
    "compress": plot_compress,
}


def render_table(header: tuple[str, ...], rows, path: str) -> str:
    """Render the chart matching the table's schema; returns the table kind."""
    kind = classify_table(tuple(header))
    renderer = _RENDERERS.get(kind)
    if renderer is not None and rows:
        renderer(tuple(header), rows, path)
    return kind


def headline(kind: str, header: tuple[str, ...], rows) -> str:
    """One human-oriented number per table for the report summary."""
    if not rows:
        return "empty"
    if kind == "codec-training":
        ix = header.index("val_psnr")
        return f"final val PSNR {float(rows[-1][ix]):.2f} dB"
    if kind == "drift":
        ix = header.index("psnr")
        return f"final PSNR {float(rows[-1][ix]):.2f} dB"
    if kind == "sampling":
        ix = header.index("correct")
        acc = float(np.mean([float(r[ix]) for r in rows]))
        return f"accuracy {acc:.3f}"
    if kind == "orchestration":
        ix = header.index("mean_qoe")
        vals = np.array([float(r[ix]) for r in rows])
        n = max(1, len(vals) // 10)
        return f"final-window mean QoE {float(vals[-n:].mean()):.4f}"
    if kind == "compress":
        ix = header.index("delta_db")
        worst = min(float(r[ix]) for r in rows[1:]) if len(rows) > 1 else 0.0
        return f"worst delta {worst:.2f} dB"
    return "unrecognized schema"
