"""Versioned, self-describing checkpoint documents.

Layout (JSON)::

    {"format": "multiexit-checkpoint", "schema_version": 1,
     "tensors": [{"name": ..., "shape": [...], "dtype": "<f8", "data": <base64>}]}

Payloads are little-endian float64 bytes, so a round trip is bit-exact.
"""
from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

FORMAT = "multiexit-checkpoint"
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_array(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def decode_array(payload: str, shape) -> np.ndarray:
    raw = base64.b64decode(payload.encode("ascii"))
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"payload holds {arr.size} values, shape {shape} needs more/less")
    return arr.reshape(shape)


def dumps(named: dict[str, np.ndarray], meta: dict | None = None) -> str:
    doc = {
        "format": FORMAT,
        "schema_version": SCHEMA_VERSION,
        "meta": meta or {},
        "tensors": [
            {"name": k, "shape": list(np.shape(v)), "dtype": "<f8", "data": encode_array(v)}
            for k, v in named.items()
        ],
    }
    return json.dumps(doc, indent=1)


def loads(text: str) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(text)
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"not a checkpoint document (format={doc.get('format')!r})")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported schema_version {doc.get('schema_version')}")
    out = {}
    for entry in doc["tensors"]:
        out[entry["name"]] = decode_array(entry["data"], tuple(entry["shape"]))
    return out, doc.get("meta", {})


def save_checkpoint(path, named: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_text(dumps(named, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_text())
