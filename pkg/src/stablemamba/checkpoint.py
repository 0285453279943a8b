"""Self-describing checkpoint container.

Layout: the magic line, an 8-byte little-endian header length, a UTF-8 JSON
header, then the raw little-endian float32 arrays back to back. The header
lists each array's name, shape, byte offset and SHA-256 digest.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .model import ModelConfig, ModelParams, init_params, param_shapes
from .params import named_parameters
from .train import AdamState

MAGIC = b"STABLEMAMBA-CKPT\n"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointError(OSError):
    """Unreadable, corrupted or mismatched checkpoint."""


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: ModelParams
    adam: AdamState | None
    train_config: dict[str, Any] | None
    epoch: int
    step: int
    rng_state: dict | None
    extra: dict[str, Any]


def _digest(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def save_checkpoint(path: str | Path, model_config: ModelConfig, params: ModelParams,
                    adam: AdamState | None = None, train_config: dict[str, Any] | None = None,
                    epoch: int = 0, step: int = 0, rng_state: dict | None = None,
                    extra: dict[str, Any] | None = None) -> None:
    """Write atomically (temp file then rename)."""
    named = list(named_parameters(params))
    blobs: list[tuple[str, np.ndarray]] = [(f"params/{n}", t.data) for n, t in named]
    if adam is not None:
        blobs += [(f"adam_m/{n}", m) for (n, _), m in zip(named, adam.m)]
        blobs += [(f"adam_v/{n}", v) for (n, _), v in zip(named, adam.v)]

    entries, chunks, offset = [], [], 0
    for name, arr in blobs:
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": _DTYPE.str,
                        "offset": offset, "nbytes": len(raw), "sha256": _digest(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": model_config.to_dict(),
        "train_config": train_config,
        "epoch": epoch,
        "step": step,
        "adam_t": adam.t if adam is not None else None,
        "rng_state": rng_state,
        "extra": extra or {},
        "arrays": entries,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)


def read_header(path: str | Path) -> tuple[dict[str, Any], int]:
    """Parsed JSON header and the byte offset where array data starts."""
    try:
        with open(path, "rb") as fh:
            if fh.read(len(MAGIC)) != MAGIC:
                raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
            (n,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(n).decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: malformed header ({e})") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    return header, len(MAGIC) + 8 + n


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None) -> Checkpoint:
    """Read, verify every digest and check the parameter inventory against the config."""
    header, start = read_header(path)
    config = ModelConfig.from_dict(header["model_config"])
    if expected_config is not None and expected_config.to_dict() != config.to_dict():
        diff = sorted(k for k, v in expected_config.to_dict().items() if header["model_config"].get(k) != v)
        raise CheckpointError(f"{path}: checkpoint config differs from the requested one in {diff}")

    data = Path(path).read_bytes()[start:]
    arrays: dict[str, np.ndarray] = {}
    for e in header["arrays"]:
        raw = data[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: array {e['name']} is truncated")
        if _digest(raw) != e["sha256"]:
            raise CheckpointError(f"{path}: digest mismatch for {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()

    inventory = param_shapes(config)
    stored = {k[len("params/"):]: v for k, v in arrays.items() if k.startswith("params/")}
    if set(stored) != set(inventory):
        missing = sorted(set(inventory) - set(stored))
        unexpected = sorted(set(stored) - set(inventory))
        raise CheckpointError(f"{path}: parameter names differ from config (missing {missing}, unexpected {unexpected})")
    for name, shape in inventory.items():
        if stored[name].shape != tuple(shape):
            raise CheckpointError(f"{path}: {name} has shape {stored[name].shape}, config expects {tuple(shape)}")

    params = init_params(config, 0)
    named = list(named_parameters(params))
    for name, t in named:
        t.data = stored[name]
    adam = None
    if header.get("adam_t") is not None:
        adam = AdamState([arrays[f"adam_m/{n}"] for n, _ in named], [arrays[f"adam_v/{n}"] for n, _ in named],
                         header["adam_t"])
    return Checkpoint(config, params, adam, header.get("train_config"), header["epoch"], header["step"],
                      header.get("rng_state"), header.get("extra", {}))
