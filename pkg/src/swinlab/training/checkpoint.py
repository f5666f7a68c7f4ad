"""SCKPT v1 checkpoints: length-prefixed JSON header followed by little-endian tensor blobs."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..model import ModelConfig, SwinUNETR

MAGIC = "SCKPT"
VERSION = 1
_LEN = struct.Struct("<I")


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


@dataclass
class Checkpoint:
    header: dict
    model: SwinUNETR
    optimizer_state: Optional[dict]
    step: int
    train_config: Optional[dict]
    state: dict = field(default_factory=dict)


def save_checkpoint(path, model: SwinUNETR, optimizer=None, step: int = 0, train_config=None,
                    state: Optional[dict] = None) -> None:
    """Write parameters (and optimizer moments when given); replaces ``path`` atomically."""
    entries, blobs, offset = [], [], 0

    def add(name, group, arr):
        nonlocal offset
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        entries.append({"name": name, "group": group, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    named = list(model.named_parameters())
    for name, p in named:
        add(name, "param", p.data)
    opt_meta = None
    if optimizer is not None:
        if len(optimizer.params) != len(named):
            raise ValueError("optimizer does not track the model's parameters")
        for (name, _), m, v in zip(named, optimizer.m, optimizer.v):
            add(name, "adam_m", m)
            add(name, "adam_v", v)
        opt_meta = {"t": optimizer.t, **optimizer.hyperparameters()}
    if train_config is not None and not isinstance(train_config, dict):
        train_config = train_config.to_dict()
    header = {
        "magic": MAGIC,
        "version": VERSION,
        "model_config": model.config.to_dict(),
        "train_config": train_config,
        "step": int(step),
        "optimizer": opt_meta,
        "state": state or {},
        "tensors": entries,
    }
    blob = json.dumps(header).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_LEN.pack(len(blob)))
        fh.write(blob)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def read_header(path) -> tuple:
    """``(header, payload bytes)`` after structural validation."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    raw = path.read_bytes()
    if len(raw) < _LEN.size:
        raise CheckpointError(f"{path}: file too short for a header")
    (n,) = _LEN.unpack_from(raw)
    try:
        header = json.loads(raw[_LEN.size : _LEN.size + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic, expected {MAGIC!r}")
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')!r}")
    payload = raw[_LEN.size + n :]
    need = sum(t["nbytes"] for t in header.get("tensors", []))
    if len(payload) != need:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, header declares {need}")
    return header, payload


def _tensor(payload: bytes, entry: dict) -> np.ndarray:
    dt = np.dtype(entry["dtype"])
    arr = np.frombuffer(payload, dtype=dt, count=entry["nbytes"] // dt.itemsize, offset=entry["offset"])
    return arr.reshape(entry["shape"]).astype(dt.newbyteorder("="), copy=True)


def load_checkpoint(path) -> Checkpoint:
    header, payload = read_header(path)
    try:
        config = ModelConfig.from_dict(header["model_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid model config ({exc})") from None
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["tensors"]:
        groups.setdefault(entry["group"], {})[entry["name"]] = _tensor(payload, entry)
    model = SwinUNETR(config, init_mode="zeros")
    try:
        model.load_state_dict(groups["param"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    opt_state = None
    if header.get("optimizer"):
        names = [n for n, _ in model.named_parameters()]
        try:
            opt_state = {"t": header["optimizer"]["t"],
                         "m": [groups["adam_m"][n] for n in names],
                         "v": [groups["adam_v"][n] for n in names]}
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing optimizer moment {exc}") from None
    return Checkpoint(header, model, opt_state, int(header["step"]), header.get("train_config"),
                      header.get("state") or {})


def load_model(path) -> SwinUNETR:
    return load_checkpoint(path).model
