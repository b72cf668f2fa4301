"""Versioned binary checkpoint container.

Layout: 4-byte magic, 8-byte little-endian manifest length, JSON manifest
(schema version, model config, array directory with shapes/dtypes/offsets,
optional optimizer state, step counter), then the raw array payload.
Arrays round-trip bitwise.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .errors import CorruptCheckpointError, SchemaVersionError, ShapeMismatchError

MAGIC = b"SMCT"
SCHEMA_VERSION = 1
_HEADER = struct.Struct("<Q")


def _le_dtype(dtype: np.dtype) -> np.dtype:
    if dtype.byteorder == ">":
        return dtype.newbyteorder("<")
    return dtype


def _jsonable(value):
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, torch.Tensor):
        return value.item()
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    return value


def save_checkpoint(
    path,
    model,
    *,
    optimizer=None,
    step: int = 0,
    extra: dict | None = None,
) -> None:
    """Serialize model parameters/buffers (and optional optimizer state) to ``path``.

    The write is atomic: a temporary file is renamed into place.
    """
    arrays: list[tuple[str, np.ndarray]] = []
    for name, tensor in model.state_dict().items():
        arrays.append((name, tensor.detach().cpu().numpy()))

    opt_manifest = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        state = {}
        for idx, entry in sd["state"].items():
            packed = {}
            for key, value in entry.items():
                if torch.is_tensor(value):
                    ref = f"optim.state.{idx}.{key}"
                    arrays.append((ref, value.detach().cpu().numpy()))
                    packed[key] = {"__array__": ref}
                else:
                    packed[key] = _jsonable(value)
            state[str(idx)] = packed
        opt_manifest = {"param_groups": _jsonable(sd["param_groups"]), "state": state}

    directory = []
    payload = bytearray()
    for name, arr in arrays:
        if arr.ndim:
            arr = np.ascontiguousarray(arr)
        dtype = _le_dtype(arr.dtype)
        data = arr.astype(dtype, copy=False).tobytes()
        directory.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dtype.str,
                "offset": len(payload),
                "nbytes": len(data),
            }
        )
        payload += data

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": model.config.to_dict(),
        "step": int(step),
        "arrays": directory,
        "optimizer": opt_manifest,
        "extra": extra or {},
    }
    blob = json.dumps(manifest).encode("utf-8")

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(_HEADER.pack(len(blob)))
        f.write(blob)
        f.write(bytes(payload))
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    """Parsed checkpoint: config snapshot, named arrays, optional optimizer state."""

    schema_version: int
    config: ModelConfig
    step: int
    arrays: dict[str, np.ndarray]
    optimizer: dict | None = None
    extra: dict = field(default_factory=dict)

    def restore(self, model) -> None:
        """Copy every stored model array into ``model`` (bitwise for same dtype).

        Raises ShapeMismatchError when the checkpoint and model disagree on
        parameter names or shapes (e.g. different channel widths).
        """
        state = model.state_dict()
        stored = {k for k in self.arrays if not k.startswith("optim.")}
        missing = sorted(set(state) - stored)
        unexpected = sorted(stored - set(state))
        if missing or unexpected:
            raise ShapeMismatchError(
                f"checkpoint/model parameter sets differ (missing: {missing[:5]}, "
                f"unexpected: {unexpected[:5]})"
            )
        with torch.no_grad():
            for name, tensor in state.items():
                arr = self.arrays[name]
                if tuple(arr.shape) != tuple(tensor.shape):
                    raise ShapeMismatchError(
                        f"parameter {name!r}: checkpoint shape {tuple(arr.shape)} "
                        f"!= model shape {tuple(tensor.shape)}"
                    )
                tensor.copy_(torch.from_numpy(arr.copy()))

    def build_model(self):
        """Construct a model from the stored config and load the stored weights."""
        from .model import build_model

        model = build_model(self.config)
        self.restore(model)
        return model

    def restore_optimizer(self, optimizer) -> None:
        if self.optimizer is None:
            raise ValueError("checkpoint holds no optimizer state")
        state = {}
        for idx, entry in self.optimizer["state"].items():
            unpacked = {}
            for key, value in entry.items():
                if isinstance(value, dict) and "__array__" in value:
                    unpacked[key] = torch.from_numpy(self.arrays[value["__array__"]].copy())
                else:
                    unpacked[key] = value
            state[int(idx)] = unpacked
        optimizer.load_state_dict(
            {"state": state, "param_groups": self.optimizer["param_groups"]}
        )


def load_checkpoint(path) -> Checkpoint:
    """Parse a checkpoint file; distinguishes corrupt files from version skew."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + _HEADER.size or data[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    (manifest_len,) = _HEADER.unpack_from(data, len(MAGIC))
    body = len(MAGIC) + _HEADER.size
    if body + manifest_len > len(data):
        raise CorruptCheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[body : body + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"{path}: unreadable manifest ({e})") from e
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path}: schema version {version!r} unsupported (expected {SCHEMA_VERSION})"
        )
    payload = data[body + manifest_len :]
    arrays = {}
    for entry in manifest["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        dtype = np.dtype(entry["dtype"])
        if start + nbytes > len(payload) or nbytes % dtype.itemsize:
            raise CorruptCheckpointError(f"{path}: truncated payload at {entry['name']!r}")
        arr = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(
        schema_version=version,
        config=ModelConfig.from_dict(manifest["config"]),
        step=manifest.get("step", 0),
        arrays=arrays,
        optimizer=manifest.get("optimizer"),
        extra=manifest.get("extra", {}),
    )
