"""Binary checkpoint container: magic, version, JSON metadata, packed f32 payload.

Models are snapped to the f32 grid when training finishes, so save -> load
round-trips are parameter-wise bit-identical and re-saving reproduces the
file byte for byte.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .codec import SemanticCodec
from .errors import CheckpointError
from .nn import Layer, Mlp

MAGIC = b"SEMC"
VERSION = 1


def _net_meta(net: Mlp) -> dict:
    return {
        "sizes": list(net.sizes),
        "activations": list(net.activations),
        "init_spec": net.init_spec,
    }


def _net_payload(net: Mlp) -> bytes:
    return b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in net.params())


def _net_param_count(meta: dict) -> int:
    sizes = meta["sizes"]
    return sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))


def _net_from_payload(meta: dict, buf: memoryview, offset: int) -> tuple[Mlp, int]:
    sizes, acts = meta["sizes"], meta["activations"]
    layers = []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        w_n, b_n = fan_in * fan_out, fan_out
        w = np.frombuffer(buf, dtype="<f4", count=w_n, offset=offset).astype(np.float64)
        offset += 4 * w_n
        b = np.frombuffer(buf, dtype="<f4", count=b_n, offset=offset).astype(np.float64)
        offset += 4 * b_n
        layers.append(Layer(w.reshape(fan_in, fan_out).copy(), b.copy(), acts[i]))
    return Mlp(layers, init_spec=meta.get("init_spec", "glorot_uniform")), offset


def save_checkpoint(model, path: str, seed: int = 0, config_digest: str = "") -> None:
    """Write an Mlp or SemanticCodec; parameters stored as little-endian f32."""
    if isinstance(model, SemanticCodec):
        kind, nets = "codec", [model.encoder, model.decoder]
    elif isinstance(model, Mlp):
        kind, nets = "mlp", [model]
    else:
        raise CheckpointError(f"unsupported model type {type(model).__name__}")
    meta = {
        "kind": kind,
        "nets": [_net_meta(n) for n in nets],
        "seed": int(seed),
        "config_digest": config_digest,
    }
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = b"".join(_net_payload(n) for n in nets)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(meta_blob)))
        f.write(meta_blob)
        f.write(payload)


def load_checkpoint(path: str):
    """Read a checkpoint; returns (model, metadata). Never coerces versions."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise CheckpointError("file too short for header")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}")
    version, meta_len = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    if len(blob) < 12 + meta_len:
        raise CheckpointError("metadata truncated")
    try:
        meta = json.loads(blob[12:12 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"metadata unreadable: {e}") from None
    expected = sum(_net_param_count(m) for m in meta["nets"])
    payload = memoryview(blob)[12 + meta_len:]
    if len(payload) != 4 * expected:
        raise CheckpointError(
            f"payload holds {len(payload)} bytes, metadata declares {4 * expected}")
    nets, offset = [], 12 + meta_len
    buf = memoryview(blob)
    for m in meta["nets"]:
        net, offset = _net_from_payload(m, buf, offset)
        nets.append(net)
    if meta["kind"] == "codec":
        if len(nets) != 2:
            raise CheckpointError("codec checkpoint must hold exactly two networks")
        return SemanticCodec(nets[0], nets[1]), meta
    if meta["kind"] == "mlp":
        if len(nets) != 1:
            raise CheckpointError("mlp checkpoint must hold exactly one network")
        return nets[0], meta
    raise CheckpointError(f"unknown model kind {meta['kind']!r}")
