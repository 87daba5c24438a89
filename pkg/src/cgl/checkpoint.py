"""Checksummed checkpoint files.

Layout::

    CGLCKPT/1\\n
    {"sha256": ..., "size": ...}\\n
    <body>

``body`` is an 8-byte big-endian length, a JSON metadata block of that length,
then an ``.npz`` archive with every array.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import config_mismatches
from .engine import CollabTrainer
from .errors import CheckpointError, IntegrityError
from .nn import DenseBlock
from .routing import ModuleGrid, load_structure, serialize_structure

MAGIC = b"CGLCKPT/1\n"


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict

    @property
    def config(self):
        return self.meta.get("config")

    @property
    def epoch(self):
        return self.meta["epoch"]

    def pool(self):
        return load_structure(self.meta["structure"])

    def grid(self) -> ModuleGrid:
        layers = self.meta["grid"]["layers"]
        M = self.meta["grid"]["M"]
        params = _indexed(self.arrays, "param")
        modules, i = [], 0
        for l, (fan_in, fan_out, act) in enumerate(layers):
            row = []
            for m in range(M):
                row.append(DenseBlock(params[i], params[i + 1], act, name=f"layer{l}.module{m}"))
                i += 2
            modules.append(row)
        return ModuleGrid(modules)

    def trainer_state(self) -> dict:
        state = dict(self.meta["trainer"])
        state["params"] = _indexed(self.arrays, "param")
        state["adam_m"] = _indexed(self.arrays, "adam_m")
        state["adam_v"] = _indexed(self.arrays, "adam_v")
        state["subsets"] = _indexed(self.arrays, "subset")
        state["counter_forward"] = self.arrays["counter_forward"]
        state["counter_backward"] = self.arrays["counter_backward"]
        return state


def _indexed(arrays, prefix):
    keys = sorted((k for k in arrays if k.startswith(prefix + "_")), key=lambda k: int(k.rsplit("_", 1)[1]))
    return [arrays[k] for k in keys]


def save_checkpoint(path, trainer: CollabTrainer, config: dict | None = None):
    state = trainer.state_dict()
    arrays = {}
    for name in ("params", "adam_m", "adam_v", "subsets"):
        prefix = {"params": "param", "subsets": "subset"}.get(name, name)
        for i, a in enumerate(state.pop(name)):
            arrays[f"{prefix}_{i}"] = np.asarray(a)
    arrays["counter_forward"] = state.pop("counter_forward")
    arrays["counter_backward"] = state.pop("counter_backward")
    grid = trainer.grid
    meta = {
        "epoch": trainer.epoch,
        "config": config,
        "structure": serialize_structure(trainer.pool),
        "grid": {
            "M": grid.M,
            "layers": [[layer[0].fan_in, layer[0].fan_out, layer[0].activation] for layer in grid.modules],
        },
        "trainer": state,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    body = struct.pack(">Q", len(meta_bytes)) + meta_bytes + buf.getvalue()
    header = json.dumps({"sha256": hashlib.sha256(body).hexdigest(), "size": len(body)}).encode() + b"\n"
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(MAGIC + header + body)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise IntegrityError(f"{path}: not a checkpoint (bad magic)")
    end = raw.find(b"\n", len(MAGIC))
    if end < 0:
        raise IntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(raw[len(MAGIC):end])
    except json.JSONDecodeError:
        raise IntegrityError(f"{path}: corrupt header") from None
    body = raw[end + 1:]
    if len(body) != header.get("size") or hashlib.sha256(body).hexdigest() != header.get("sha256"):
        raise IntegrityError(f"{path}: checksum mismatch (file truncated or modified)")
    (n_meta,) = struct.unpack(">Q", body[:8])
    meta = json.loads(body[8:8 + n_meta])
    with np.load(io.BytesIO(body[8 + n_meta:])) as npz:
        arrays = {k: npz[k] for k in npz.files}
    return Checkpoint(meta, arrays)


def check_config(ckpt: Checkpoint, config: dict, force=False):
    """Refuse to resume under a different configuration unless ``force``."""
    saved = ckpt.config
    if saved is None or force:
        return []
    diff = config_mismatches(saved, config)
    if diff:
        hint = ("; schedule.ramp_end follows train.epochs unless set explicitly"
                if "schedule.ramp_end" in diff else "")
        raise CheckpointError("checkpoint was written with a different configuration; mismatched fields: "
                              + ", ".join(diff) + hint + " (use --force to override)")
    return diff
