"""Parameter checkpoints as versioned JSON.

Layout::

    {"format": "capkit-checkpoint", "version": 1,
     "params": [{"name": ..., "shape": [...], "values": [...]}, ...]}

Values are row-major and written with Python's shortest round-trip float
repr, so save/load is bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT = "capkit-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: Mapping[str, np.ndarray]) -> str:
    entries = []
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value), dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "values": arr.reshape(-1).tolist()})
    return json.dumps({"format": FORMAT, "version": VERSION, "params": entries}) + "\n"


def loads(text: str) -> dict[str, np.ndarray]:
    doc = json.loads(text)
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"not a checkpoint (format={doc.get('format')!r})")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    out = {}
    for e in doc["params"]:
        arr = np.array(e["values"], dtype=np.float64)
        shape = tuple(e["shape"])
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"parameter {e['name']!r}: {arr.size} values for shape {shape}")
        out[e["name"]] = arr.reshape(shape)
    return out


def save_checkpoint(params: Mapping[str, np.ndarray], path) -> None:
    Path(path).write_text(dumps(params), encoding="utf-8", newline="\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_text(encoding="utf-8"))
