"""Experiment drivers: one function per CLI subcommand, artifacts on disk.

Each run owns its output directory: resolved config first, then metrics CSV,
checkpoints, run metadata, and (for report) rendered figures. Any module
fault becomes an error.json plus a nonzero exit status rather than a stack
trace, so sweep scripts can triage failed cells.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import __version__
from .adaptation import (
    default_drift_schedule,
    gather_observations,
    make_channel_gan,
    run_drift,
    train_gan,
)
from .channel import ChannelModel
from .checkpoint import save_checkpoint
from .codec import (
    COMPRESSION_CODEBOOK,
    build_quality_surface,
    classifier_labels,
    codebook_symbols,
    codec_round_trip,
    make_codec,
    train_codec,
    train_digit_classifier,
)
from .config import ExperimentConfig
from .data import load_dataset, upscale2x
from .errors import ConfigError, SemnetError
from .lightweight import (
    PruneSpec,
    QuantSpec,
    finetune_pruned,
    make_canvas_classifier,
    make_patch_codec,
    pad_and_grid,
    patch_dataset,
    prune_codec,
    quantize_codec,
    quantized_bytes,
    session_table,
    sparsity,
    evaluate_sampling,
    train_canvas_classifier,
)
from .metrics import MetricsTable, load_table
from .nn import named_stream
from .orchestration import (
    NetworkConfig,
    QoeParams,
    analytic_quality_surface,
    make_agent,
    run_baseline,
    trace_table,
    train_hierarchy,
)
from .plots import headline, render_table

SURFACE_SNR_GRID = (-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0)


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_data(config: ExperimentConfig):
    p = config.params
    return load_dataset(config.data_dir, seed=0,
                        n_train=p["data.n_train"], n_test=p["data.n_test"])


def _train_base_codec(config: ExperimentConfig, ds, label: str):
    p = config.params
    codec = make_codec(p["codec.n_symbols"],
                       named_stream(config.seed, f"{label}.codec.init"),
                       hidden=p["codec.hidden"])
    ch = ChannelModel("awgn", p["codec.snr_db"])
    codec, rows = train_codec(codec, ch, ds, p["codec.epochs"],
                              named_stream(config.seed, f"{label}.codec.train"),
                              lr=p["codec.lr"], batch_size=p["codec.batch_size"])
    return codec, rows


def _epoch_table(rows) -> MetricsTable:
    table = MetricsTable(("epoch", "snr_db", "train_mse", "val_mse", "val_psnr"), [])
    for r in rows:
        table.append((r.epoch, r.snr_db, r.train_mse, r.val_mse, r.val_psnr))
    return table


def _drive_train_codec(config: ExperimentConfig) -> None:
    ds = _load_data(config)
    codec, rows = _train_base_codec(config, ds, "train-codec")
    out = config.out_dir
    _epoch_table(rows).save(os.path.join(out, "metrics.csv"))
    save_checkpoint(codec, os.path.join(out, "codec.ckpt"),
                    seed=config.seed, config_digest=config.digest())


def _drive_drift(config: ExperimentConfig) -> None:
    p = config.params
    ds = _load_data(config)
    codec, _ = _train_base_codec(config, ds, "drift")
    schedule = default_drift_schedule()
    gan = None
    out = config.out_dir
    if p["drift.mode"] == "finetune_gan":
        snrs = sorted({snr for _, snr in schedule.entries})
        obs = gather_observations(codec, snrs, ds.train_x, p["gan.blocks_per_snr"],
                                  named_stream(config.seed, "drift.gan.observe"))
        gan = make_channel_gan(codec.n_symbols,
                               named_stream(config.seed, "drift.gan.init"))
        gan, _ = train_gan(gan, obs, p["gan.epochs"],
                           named_stream(config.seed, "drift.gan.train"))
        save_checkpoint(gan.generator, os.path.join(out, "gan_generator.ckpt"),
                        seed=config.seed, config_digest=config.digest())
        save_checkpoint(gan.discriminator,
                        os.path.join(out, "gan_discriminator.ckpt"),
                        seed=config.seed, config_digest=config.digest())
    run = run_drift(codec, schedule, p["drift.mode"], p["drift.epochs_total"],
                    named_stream(config.seed, "drift.run"), dataset=ds, gan=gan,
                    samples_per_epoch=p["drift.samples_per_epoch"],
                    lr=p["drift.lr"], decoder_only=p["drift.decoder_only"])
    table = MetricsTable(("epoch", "snr_db", "mse", "psnr", "mode"), [])
    for r in run.rows:
        table.append((r.epoch, r.snr_db, r.mse, r.psnr, r.mode))
    table.save(os.path.join(out, "metrics.csv"))
    save_checkpoint(run.codec, os.path.join(out, "codec.ckpt"),
                    seed=config.seed, config_digest=config.digest())
    _write_json(os.path.join(out, "run_meta.json"), {
        "live_tune_blocks": run.live_tune_blocks,
        "mode": run.mode,
    })


def _drive_sampling(config: ExperimentConfig) -> None:
    p = config.params
    ds = _load_data(config)
    side = p["sampling.source_side"]
    if side == 2 * ds.side:
        train_x = upscale2x(ds.train_x, ds.side)
        test_x = upscale2x(ds.test_x[:p["sampling.images"]], ds.side)
    elif side == ds.side:
        train_x = ds.train_x
        test_x = ds.test_x[:p["sampling.images"]]
    else:
        raise ConfigError(f"sampling.source_side must be {ds.side} or "
                          f"{2 * ds.side}, got {side}")
    test_y = ds.test_y[:p["sampling.images"]]
    grid = pad_and_grid(side, p["sampling.patch"])
    ch = ChannelModel("awgn", p["sampling.snr_db"])
    seed = config.seed

    crops = patch_dataset(train_x, grid, named_stream(seed, "sampling.crops"))
    codec = make_patch_codec(p["sampling.patch"],
                             named_stream(seed, "sampling.codec.init"),
                             n_symbols=p["sampling.n_symbols"] or None,
                             hidden=p["sampling.codec_hidden"] or None)
    codec, codec_rows = train_codec(codec, ch, crops, p["sampling.codec_epochs"],
                                    named_stream(seed, "sampling.codec.train"))
    classifier = make_canvas_classifier(grid, named_stream(seed, "sampling.cls.init"))
    coverage = (p["sampling.coverage_lo"], p["sampling.coverage_hi"])
    classifier, cls_rows = train_canvas_classifier(
        classifier, codec, ch, train_x, ds.train_y, test_x, test_y, grid,
        p["sampling.classifier_epochs"], named_stream(seed, "sampling.cls.train"),
        coverage=coverage)
    accuracy, sessions = evaluate_sampling(
        codec, ch, classifier, test_x, test_y, p["sampling.patch"],
        p["sampling.rounds"], p["sampling.request_size"],
        named_stream(seed, "sampling.eval"),
        stop_threshold=p["sampling.stop_threshold"])

    out = config.out_dir
    session_table(sessions).save(os.path.join(out, "metrics.csv"))
    save_checkpoint(codec, os.path.join(out, "patch_codec.ckpt"),
                    seed=seed, config_digest=config.digest())
    save_checkpoint(classifier, os.path.join(out, "classifier.ckpt"),
                    seed=seed, config_digest=config.digest())
    _write_json(os.path.join(out, "run_meta.json"), {
        "accuracy": accuracy,
        "codec_val_psnr": codec_rows[-1].val_psnr,
        "classifier_val_accuracy": cls_rows[-1].val_accuracy,
        "grid_cells": grid.count,
    })


def _build_surface(config: ExperimentConfig, ds):
    p = config.params
    seed = config.seed
    if p["surface.kind"] == "analytic":
        return analytic_quality_surface()
    if p["surface.kind"] != "trained":
        raise ConfigError(f"surface.kind must be trained or analytic, "
                          f"got {p['surface.kind']!r}")
    classifier = train_digit_classifier(
        ds.train_x, ds.train_y, p["surface.classifier_epochs"],
        named_stream(seed, "orchestrate.surface.cls"))
    ch = ChannelModel("awgn", p["surface.snr_db"])
    codecs = {}
    for rho, nsym in zip(COMPRESSION_CODEBOOK, codebook_symbols(ds.train_x.shape[1])):
        codec = make_codec(nsym, named_stream(seed, f"orchestrate.surface.c{nsym}.init"))
        codec, _ = train_codec(codec, ch, ds, p["surface.codec_epochs"],
                               named_stream(seed, f"orchestrate.surface.c{nsym}.train"))
        codecs[rho] = codec
    return build_quality_surface(
        codecs, SURFACE_SNR_GRID, ds.test_x, ds.test_y,
        lambda im: classifier_labels(classifier, im),
        named_stream(seed, "orchestrate.surface.eval"),
        n_samples=p["surface.eval_samples"])


def _drive_orchestrate(config: ExperimentConfig) -> None:
    p = config.params
    seed = config.seed
    ds = _load_data(config) if p["surface.kind"] == "trained" else None
    surface = _build_surface(config, ds)
    params = QoeParams(surface=surface, alpha=p["orchestrate.alpha"],
                       beta=p["orchestrate.beta"])
    net_cfg = NetworkConfig(
        links=p["orchestrate.links"], n_t=p["orchestrate.n_t"],
        beam_count=p["orchestrate.beam_count"],
        noise_power=p["orchestrate.noise_power"],
        frame_slots=p["orchestrate.frame_slots"],
        episode_slots=p["orchestrate.slots"])
    channel_seed = p["orchestrate.channel_seed"]
    if channel_seed < 0:
        channel_seed = seed
    method = p["orchestrate.method"]
    if method == "hierarchy":
        agents = [make_agent(net_cfg, named_stream(seed, "orchestrate.agents"),
                             lr=p["orchestrate.lr"])
                  for _ in range(net_cfg.links)]
        trace = train_hierarchy(net_cfg, agents, params,
                                named_stream(seed, "orchestrate.train"),
                                channel_seed=channel_seed,
                                block_slots=p["orchestrate.block_slots"],
                                warmup_blocks=p["orchestrate.warmup_blocks"])
    else:
        trace = run_baseline(net_cfg, params, method,
                             named_stream(seed, f"orchestrate.{method}"),
                             channel_seed=channel_seed, lr=p["orchestrate.lr"])
    out = config.out_dir
    trace_table(trace).save(os.path.join(out, "metrics.csv"))
    _write_json(os.path.join(out, "run_meta.json"), {
        "method": trace.method,
        "channel_seed": trace.channel_seed,
        "first_window_mean_qoe": trace.window_mean(True),
        "final_window_mean_qoe": trace.window_mean(False),
        "surface_kind": p["surface.kind"],
    })


def _drive_compress(config: ExperimentConfig) -> None:
    p = config.params
    ds = _load_data(config)
    codec, _ = _train_base_codec(config, ds, "compress")
    ch = ChannelModel("awgn", p["codec.snr_db"])
    eval_x = ds.test_x[:1000]
    seed = config.seed

    def measure(c):
        # fresh identically-labeled stream per variant: every variant sees
        # the same channel noise, so deltas isolate the weight damage
        _, _, val = codec_round_trip(c, ch, eval_x,
                                     named_stream(seed, "compress.eval"))
        return val

    base_psnr = measure(codec)
    f32_bytes = 4 * (codec.encoder.n_params + codec.decoder.n_params)
    table = MetricsTable(("variant", "setting", "val_psnr", "delta_db",
                          "sparsity", "payload_bytes"), [])
    table.append(("baseline", "", base_psnr, 0.0, 0.0, f32_bytes))

    spec = PruneSpec(p["compress.prune_ratio"])
    pruned, enc_masks, dec_masks = prune_codec(codec, spec)
    pruned_sparsity = (sparsity(pruned.encoder) * pruned.encoder.n_params
                       + sparsity(pruned.decoder) * pruned.decoder.n_params
                       ) / (pruned.encoder.n_params + pruned.decoder.n_params)
    pruned_psnr = measure(pruned)
    table.append(("pruned", f"ratio={spec.ratio}", pruned_psnr,
                  pruned_psnr - base_psnr, pruned_sparsity, f32_bytes))

    tuned = finetune_pruned(pruned, enc_masks, dec_masks, ch, ds,
                            p["compress.finetune_epochs"],
                            named_stream(seed, "compress.finetune"))
    tuned_psnr = measure(tuned)
    table.append(("pruned_finetuned",
                  f"ratio={spec.ratio} epochs={p['compress.finetune_epochs']}",
                  tuned_psnr, tuned_psnr - base_psnr, pruned_sparsity, f32_bytes))

    for bits in p["compress.quant_bits"]:
        tensors, dq = quantize_codec(codec, QuantSpec(int(bits)))
        q_psnr = measure(dq)
        table.append(("quantized", f"bits={bits}", q_psnr, q_psnr - base_psnr,
                      0.0, quantized_bytes(tensors, int(bits))))

    out = config.out_dir
    table.save(os.path.join(out, "metrics.csv"))
    save_checkpoint(tuned, os.path.join(out, "pruned_codec.ckpt"),
                    seed=seed, config_digest=config.digest())


def _drive_report(config: ExperimentConfig) -> None:
    inputs = config.params["report.inputs"]
    if not inputs:
        raise ConfigError("report needs at least one metrics CSV")
    out = config.out_dir
    summary = MetricsTable(("source", "kind", "rows", "headline"), [])
    for path in inputs:
        header, rows = load_table(path)
        stem = os.path.splitext(os.path.basename(path))[0]
        parent = os.path.basename(os.path.dirname(os.path.abspath(path)))
        name = f"{parent}-{stem}" if parent else stem
        svg_path = os.path.join(out, f"{name}.svg")
        kind = render_table(header, rows, svg_path)
        summary.append((name.replace(",", "_"), kind, len(rows),
                        headline(kind, header, rows).replace(",", ";")))
    summary.save(os.path.join(out, "summary.csv"))


_DRIVERS = {
    "train-codec": _drive_train_codec,
    "drift": _drive_drift,
    "sampling": _drive_sampling,
    "orchestrate": _drive_orchestrate,
    "compress": _drive_compress,
    "report": _drive_report,
}


def run_experiment(config: ExperimentConfig) -> int:
    """Execute one configured run; 0 on success, 1 with error.json on fault."""
    os.makedirs(config.out_dir, exist_ok=True)
    config.save(os.path.join(config.out_dir, "resolved_config.json"))
    try:
        _DRIVERS[config.kind](config)
    except SemnetError as e:
        _write_json(os.path.join(config.out_dir, "error.json"), {
            "error": type(e).__name__,
            "message": str(e),
            "tool_version": __version__,
        })
        return 1
    return 0
