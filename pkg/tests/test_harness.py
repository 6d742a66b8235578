"""Drivers, CLI, and figure rendering exercised end to end at toy scale."""

import json
import os

import numpy as np
import pytest

from semnet.checkpoint import load_checkpoint
from semnet.cli import main
from semnet.config import resolve_config
from semnet.drivers import run_experiment
from semnet.metrics import MetricsTable, load_table
from semnet.plots import (
    CODEC_TRAINING_HEADER,
    COMPRESS_HEADER,
    DRIFT_HEADER,
    classify_table,
    headline,
    render_table,
)

TINY_CODEC = {"codec.epochs": 1, "codec.n_symbols": 49, "codec.hidden": 32,
              "data.n_train": 512, "data.n_test": 128}


def run_into(kind, seed, overrides, out):
    cfg = resolve_config(kind, seed, out_dir=str(out), overrides=overrides)
    return run_experiment(cfg), cfg


@pytest.fixture(scope="module")
def tc_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tc")
    rc, cfg = run_into("train-codec", 11, TINY_CODEC, out)
    assert rc == 0
    return cfg


@pytest.fixture(scope="module")
def orc_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("orc")
    rc, cfg = run_into("orchestrate", 11,
                       {"surface.kind": "analytic", "orchestrate.links": 2,
                        "orchestrate.slots": 400,
                        "orchestrate.block_slots": 200}, out)
    assert rc == 0
    return cfg


class TestTrainCodecDriver:
    def test_artifact_set(self, tc_run):
        assert sorted(os.listdir(tc_run.out_dir)) == [
            "codec.ckpt", "metrics.csv", "resolved_config.json"]

    def test_metrics_schema(self, tc_run):
        header, rows = load_table(os.path.join(tc_run.out_dir, "metrics.csv"))
        assert header == CODEC_TRAINING_HEADER
        assert [r[0] for r in rows] == ["0"]

    def test_resolved_config_first_class(self, tc_run):
        doc = json.loads(open(os.path.join(
            tc_run.out_dir, "resolved_config.json")).read())
        assert doc["kind"] == "train-codec" and doc["seed"] == 11
        assert doc["params"]["codec.n_symbols"] == 49
        assert doc["tool_version"]

    def test_checkpoint_loads(self, tc_run):
        codec, meta = load_checkpoint(os.path.join(tc_run.out_dir, "codec.ckpt"))
        assert codec.n_symbols == 49
        assert meta["seed"] == 11
        assert meta["config_digest"] == tc_run.digest()


class TestDriftDriver:
    def test_mode_none_run(self, tmp_path):
        rc, cfg = run_into("drift", 7, {**TINY_CODEC, "drift.mode": "none",
                                        "drift.epochs_total": 6,
                                        "drift.samples_per_epoch": 2}, tmp_path)
        assert rc == 0
        header, rows = load_table(os.path.join(cfg.out_dir, "metrics.csv"))
        assert header == DRIFT_HEADER
        assert len(rows) == 6
        assert all(r[header.index("mode")] == "none" for r in rows)
        # the first schedule leg holds 21 dB through these epochs
        assert all(float(r[header.index("snr_db")]) == 21.0 for r in rows)
        meta = json.loads(open(os.path.join(cfg.out_dir, "run_meta.json")).read())
        assert meta["live_tune_blocks"] == 0
        assert meta["mode"] == "none"


class TestSamplingDriver:
    def test_tiny_run(self, tmp_path):
        rc, cfg = run_into("sampling", 5,
                           {"sampling.images": 8, "sampling.rounds": 2,
                            "sampling.codec_epochs": 1,
                            "sampling.classifier_epochs": 1,
                            "data.n_train": 512, "data.n_test": 128}, tmp_path)
        assert rc == 0
        header, rows = load_table(os.path.join(cfg.out_dir, "metrics.csv"))
        assert header[:6] == ("image_id", "patch", "rounds_max", "rounds_used",
                              "correct", "symbols_sent")
        assert len(rows) == 8
        assert {r[4] for r in rows} <= {"0", "1"}
        meta = json.loads(open(os.path.join(cfg.out_dir, "run_meta.json")).read())
        assert set(meta) == {"accuracy", "codec_val_psnr",
                             "classifier_val_accuracy", "grid_cells"}
        assert meta["grid_cells"] == 49

    def test_bad_source_side(self, tmp_path):
        rc, cfg = run_into("sampling", 5, {"sampling.source_side": 14,
                                           "data.n_train": 512,
                                           "data.n_test": 128}, tmp_path)
        assert rc == 1
        doc = json.loads(open(os.path.join(cfg.out_dir, "error.json")).read())
        assert doc["error"] == "ConfigError"


class TestOrchestrateDriver:
    def test_artifact_set(self, orc_run):
        assert sorted(os.listdir(orc_run.out_dir)) == [
            "metrics.csv", "resolved_config.json", "run_meta.json"]
        meta = json.loads(open(os.path.join(
            orc_run.out_dir, "run_meta.json")).read())
        assert meta["method"] == "hierarchy"
        assert meta["channel_seed"] == 11  # -1 sentinel falls back to the seed
        assert meta["surface_kind"] == "analytic"
        assert isinstance(meta["final_window_mean_qoe"], float)

    def test_rerun_reproduces_csv_bytes(self, orc_run, tmp_path):
        rc, cfg = run_into("orchestrate", 11,
                           {"surface.kind": "analytic", "orchestrate.links": 2,
                            "orchestrate.slots": 400,
                            "orchestrate.block_slots": 200}, tmp_path)
        assert rc == 0
        a = open(os.path.join(orc_run.out_dir, "metrics.csv"), "rb").read()
        b = open(os.path.join(cfg.out_dir, "metrics.csv"), "rb").read()
        assert a == b

    def test_seed_changes_trace(self, orc_run, tmp_path):
        rc, cfg = run_into("orchestrate", 12,
                           {"surface.kind": "analytic", "orchestrate.links": 2,
                            "orchestrate.slots": 400,
                            "orchestrate.block_slots": 200}, tmp_path)
        assert rc == 0
        a = open(os.path.join(orc_run.out_dir, "metrics.csv"), "rb").read()
        b = open(os.path.join(cfg.out_dir, "metrics.csv"), "rb").read()
        assert a != b

    def test_baseline_method(self, tmp_path):
        rc, cfg = run_into("orchestrate", 11,
                           {"surface.kind": "analytic",
                            "orchestrate.method": "fixed",
                            "orchestrate.links": 2,
                            "orchestrate.slots": 200}, tmp_path)
        assert rc == 0
        meta = json.loads(open(os.path.join(cfg.out_dir, "run_meta.json")).read())
        assert meta["method"] == "fixed"

    def test_fault_writes_error_json(self, tmp_path):
        rc, cfg = run_into("orchestrate", 11,
                           {"surface.kind": "analytic",
                            "orchestrate.links": 0}, tmp_path)
        assert rc == 1
        assert sorted(os.listdir(cfg.out_dir)) == ["error.json",
                                                   "resolved_config.json"]
        doc = json.loads(open(os.path.join(cfg.out_dir, "error.json")).read())
        assert doc["error"] == "ContractViolation"
        assert doc["message"]
        assert doc["tool_version"]


class TestCompressDriver:
    def test_run_and_schema(self, tmp_path):
        rc, cfg = run_into("compress", 9,
                           {**TINY_CODEC, "compress.finetune_epochs": 1}, tmp_path)
        assert rc == 0
        header, rows = load_table(os.path.join(cfg.out_dir, "metrics.csv"))
        assert header == COMPRESS_HEADER
        assert [r[0] for r in rows] == ["baseline", "pruned", "pruned_finetuned",
                                        "quantized", "quantized"]
        sp = header.index("sparsity")
        assert 0.45 < float(rows[1][sp]) < 0.55
        assert 0.45 < float(rows[2][sp]) < 0.55
        pay = header.index("payload_bytes")
        base, q8, q4 = (int(rows[i][pay]) for i in (0, 3, 4))
        assert q4 < q8 < base
        codec, _ = load_checkpoint(os.path.join(cfg.out_dir, "pruned_codec.ckpt"))
        assert codec.n_symbols == 49


class TestReportDriver:
    def test_report_over_mixed_tables(self, tc_run, orc_run, tmp_path):
        rc, cfg = run_into("report", 0, {"report.inputs": [
            os.path.join(tc_run.out_dir, "metrics.csv"),
            os.path.join(orc_run.out_dir, "metrics.csv")]}, tmp_path)
        assert rc == 0
        files = sorted(os.listdir(cfg.out_dir))
        svgs = [f for f in files if f.endswith(".svg")]
        assert len(svgs) == 2
        for f in svgs:
            blob = open(os.path.join(cfg.out_dir, f), "rb").read()
            assert b"<svg" in blob[:600]
        header, rows = load_table(os.path.join(cfg.out_dir, "summary.csv"))
        assert header == ("source", "kind", "rows", "headline")
        kinds = {r[1] for r in rows}
        assert kinds == {"codec-training", "orchestration"}

    def test_empty_inputs_fault(self, tmp_path):
        rc, cfg = run_into("report", 0, {"report.inputs": []}, tmp_path)
        assert rc == 1
        doc = json.loads(open(os.path.join(cfg.out_dir, "error.json")).read())
        assert doc["error"] == "ConfigError"


class TestCli:
    def test_flags_override_config_file(self, tc_run, tmp_path, capsys):
        cfgfile = tmp_path / "c.json"
        cfgfile.write_text(json.dumps({"kind": "train-codec", "seed": 3,
                                       "params": TINY_CODEC}))
        out = tmp_path / "run"
        rc = main(["train-codec", "--config", str(cfgfile),
                   "--seed", "7", "--out", str(out)])
        assert rc == 0
        doc = json.loads((out / "resolved_config.json").read_text())
        assert doc["seed"] == 7
        assert "artifacts written" in capsys.readouterr().out

    def test_kind_mismatch_exits_2(self, tmp_path, capsys):
        cfgfile = tmp_path / "c.json"
        cfgfile.write_text(json.dumps({"kind": "train-codec"}))
        rc = main(["drift", "--config", str(cfgfile)])
        assert rc == 2
        assert "train-codec" in capsys.readouterr().err

    def test_unknown_param_exits_2(self, tmp_path, capsys):
        cfgfile = tmp_path / "c.json"
        cfgfile.write_text(json.dumps({"kind": "drift",
                                       "params": {"drift.mood": "none"}}))
        rc = main(["drift", "--config", str(cfgfile)])
        assert rc == 2
        assert "unknown parameter" in capsys.readouterr().err

    def test_report_positional_csvs(self, tc_run, tmp_path):
        out = tmp_path / "rep"
        rc = main(["report", "--out", str(out),
                   os.path.join(tc_run.out_dir, "metrics.csv")])
        assert rc == 0
        assert (out / "summary.csv").exists()

    def test_failed_run_exits_1(self, tmp_path, capsys):
        cfgfile = tmp_path / "c.json"
        cfgfile.write_text(json.dumps(
            {"kind": "orchestrate",
             "params": {"surface.kind": "analytic", "orchestrate.links": 0}}))
        rc = main(["orchestrate", "--config", str(cfgfile),
                   "--out", str(tmp_path / "run")])
        assert rc == 1
        assert "error.json" in capsys.readouterr().err


class TestPlots:
    def test_classify_known_schemas(self):
        assert classify_table(CODEC_TRAINING_HEADER) == "codec-training"
        assert classify_table(DRIFT_HEADER) == "drift"
        assert classify_table(("image_id", "patch", "rounds_max", "rounds_used",
                               "correct", "symbols_sent",
                               "entropy_round_1")) == "sampling"
        assert classify_table(("slot", "qoe_0", "qoe_1", "mean_qoe")) == "orchestration"
        assert classify_table(COMPRESS_HEADER) == "compress"
        assert classify_table(("a", "b")) == "unknown"

    def test_unknown_schema_renders_nothing(self, tmp_path):
        path = tmp_path / "x.svg"
        kind = render_table(("a", "b"), [(1, 2)], str(path))
        assert kind == "unknown"
        assert not path.exists()

    def test_empty_rows_render_nothing(self, tmp_path):
        path = tmp_path / "x.svg"
        kind = render_table(CODEC_TRAINING_HEADER, [], str(path))
        assert kind == "codec-training"
        assert not path.exists()

    def test_sampling_plot_skips_blank_entropy_cells(self, tmp_path):
        header = ("image_id", "patch", "rounds_max", "rounds_used", "correct",
                  "symbols_sent", "entropy_round_1", "entropy_round_2")
        rows = [("0", "4", "2", "1", "1", "16", "2.1", ""),
                ("1", "4", "2", "2", "0", "32", "2.0", "1.5")]
        path = tmp_path / "s.svg"
        assert render_table(header, rows, str(path)) == "sampling"
        assert path.exists()

    def test_headlines(self):
        assert headline("codec-training", CODEC_TRAINING_HEADER,
                        [("1", "21", "0.1", "0.1", "18.5")]) == \
            "final val PSNR 18.50 dB"
        assert headline("compress", COMPRESS_HEADER, []) == "empty"
        got = headline("orchestration", ("slot", "qoe_0", "mean_qoe"),
                       [("0", "0.5", "0.5"), ("1", "0.7", "0.7")])
        assert got == "final-window mean QoE 0.7000"
        assert headline("mystery", ("a",), [("1",)]) == "unrecognized schema"

    def test_headline_matches_summary_numbers(self):
        rows = [(str(i), "0.4", str(0.1 * i)) for i in range(20)]
        got = headline("orchestration", ("slot", "qoe_0", "mean_qoe"), rows)
        want = float(np.mean([0.1 * i for i in range(18, 20)]))
        assert got == f"final-window mean QoE {want:.4f}"
