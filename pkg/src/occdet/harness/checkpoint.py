"""Checkpoints as canonical JSON: named row-major parameter records, the
config snapshot and the RNG state. Python's float repr round-trips exactly,
so save -> load -> save reproduces the file byte for byte."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import MissingCheckpoint, ShapeMismatch

FORMAT_VERSION = 1


def checkpoint_bytes(detector, config: dict | None = None, rng_state: dict | None = None) -> bytes:
    records = [
        {"name": name, "shape": list(p.shape), "values": p.reshape(-1).tolist()}
        for name, p, _ in detector.named_params()
    ]
    doc = {
        "format_version": FORMAT_VERSION,
        "params": records,
        "config": config or {},
        "rng_state": rng_state or {},
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path, detector, config: dict | None = None, rng_state: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(detector, config, rng_state))
    return path


def load_checkpoint(path, detector):
    """Copy stored values into ``detector``; returns (config, rng_state).

    Any difference in parameter names, order or shapes raises ShapeMismatch.
    """
    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(f"no checkpoint at {path}")
    doc = json.loads(path.read_bytes())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')}")
    params = detector.named_params()
    if len(params) != len(doc["params"]):
        raise ShapeMismatch(f"checkpoint holds {len(doc['params'])} tensors, model has {len(params)}")
    for (name, p, _), rec in zip(params, doc["params"]):
        if rec["name"] != name or tuple(rec["shape"]) != p.shape:
            raise ShapeMismatch(f"checkpoint tensor {rec['name']} {rec['shape']} does not fit {name} {list(p.shape)}")
    for (_, p, _), rec in zip(params, doc["params"]):
        p[...] = np.asarray(rec["values"], dtype=np.float64).reshape(p.shape)
    detector.params_updated()
    return doc["config"], doc["rng_state"]
