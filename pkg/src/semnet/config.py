"""Experiment configuration: namespaced keys, strict validation, stable digests.

Every run resolves its parameters against a per-experiment schema of known
keys, then writes the resolved document beside its outputs so any artifact
directory is self-describing.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from . import __version__
from .errors import ConfigError

EXPERIMENT_KINDS = ("train-codec", "drift", "sampling", "orchestrate",
                    "compress", "report")

# default value doubles as the type witness for validation
_CODEC_PARAMS = {
    "codec.n_symbols": 196,
    "codec.hidden": 256,
    "codec.epochs": 12,
    "codec.snr_db": 21.0,
    "codec.lr": 1e-3,
    "codec.batch_size": 128,
}

_DATA_PARAMS = {
    "data.n_train": 8192,
    "data.n_test": 2000,
}

PARAM_SCHEMAS: dict[str, dict] = {
    "train-codec": {**_CODEC_PARAMS, **_DATA_PARAMS},
    "drift": {
        **_CODEC_PARAMS, **_DATA_PARAMS,
        "drift.mode": "finetune_real",
        "drift.epochs_total": 60,
        "drift.samples_per_epoch": 20,
        "drift.lr": 1e-3,
        "drift.decoder_only": False,
        "gan.epochs": 8,
        "gan.blocks_per_snr": 10,
    },
    "sampling": {
        **_DATA_PARAMS,
        "sampling.source_side": 28,
        "sampling.patch": 4,
        "sampling.rounds": 3,
        "sampling.request_size": 4,
        "sampling.snr_db": 10.0,
        "sampling.images": 1000,
        "sampling.stop_threshold": 0.95,
        "sampling.n_symbols": 0,       # 0 = half the patch dimension
        "sampling.codec_hidden": 0,    # 0 = sized from the patch dimension
        "sampling.codec_epochs": 8,
        "sampling.classifier_epochs": 8,
        "sampling.coverage_lo": 0.05,
        "sampling.coverage_hi": 1.0,
    },
    "orchestrate": {
        **_DATA_PARAMS,
        "orchestrate.method": "hierarchy",
        "orchestrate.links": 4,
        "orchestrate.n_t": 4,
        "orchestrate.beam_count": 8,
        "orchestrate.noise_power": 0.2,
        "orchestrate.frame_slots": 10,
        "orchestrate.slots": 20000,
        "orchestrate.block_slots": 2000,
        "orchestrate.warmup_blocks": 1,
        "orchestrate.channel_seed": -1,  # -1 = reuse the experiment seed
        "orchestrate.alpha": 1.0,
        "orchestrate.beta": 0.3,
        "orchestrate.lr": 1e-3,
        "surface.kind": "trained",       # or "analytic" for data-free smoke runs
        "surface.codec_epochs": 8,
        "surface.classifier_epochs": 6,
        "surface.snr_db": 10.0,
        "surface.eval_samples": 500,
    },
    "compress": {
        **_CODEC_PARAMS, **_DATA_PARAMS,
        "compress.prune_ratio": 0.5,
        "compress.finetune_epochs": 5,
        "compress.quant_bits": [8, 4],
    },
    "report": {
        "report.inputs": [],
    },
}


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    out_dir: str
    data_dir: str | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; "
                              f"expected one of {EXPERIMENT_KINDS}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) \
                or self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if not self.out_dir:
            raise ConfigError("output directory must be set")

    def resolved_document(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "data_dir": self.data_dir,
            "params": dict(sorted(self.params.items())),
            "tool_version": __version__,
        }

    def digest(self) -> str:
        doc = self.resolved_document()
        doc.pop("out_dir")  # where artifacts land does not change what they are
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.resolved_document(), f, indent=2, sort_keys=True)
            f.write("\n")


def _check_type(key: str, value, default):
    """Coerce a JSON value against the schema default's type."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    raise ConfigError(f"{key}: unsupported schema type {type(default).__name__}")


def resolve_config(kind: str, seed: int = 0, out_dir: str = "",
                   data_dir: str | None = None,
                   overrides: dict | None = None) -> ExperimentConfig:
    """Fill defaults for the experiment kind; reject keys outside its schema."""
    if kind not in PARAM_SCHEMAS:
        raise ConfigError(f"unknown experiment kind {kind!r}; "
                          f"expected one of {EXPERIMENT_KINDS}")
    schema = PARAM_SCHEMAS[kind]
    params = dict(schema)
    for key, value in (overrides or {}).items():
        if key not in schema:
            raise ConfigError(f"unknown parameter {key!r} for experiment {kind!r}")
        params[key] = _check_type(key, value, schema[key])
    return ExperimentConfig(kind=kind, seed=seed,
                            out_dir=out_dir or f"semnet-runs/{kind}-seed{seed}",
                            data_dir=data_dir, params=params)


def load_config_file(path: str) -> dict:
    """Parse a JSON config document mirroring ExperimentConfig."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    allowed = {"kind", "seed", "out_dir", "data_dir", "params"}
    extra = set(doc) - allowed
    if extra:
        raise ConfigError(f"config file {path} has unknown fields {sorted(extra)}")
    if "params" in doc and not isinstance(doc["params"], dict):
        raise ConfigError(f"config file {path}: params must be an object")
    return doc
