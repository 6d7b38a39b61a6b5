"""Self-describing checkpoint files.

Layout: one JSON header line (format tag, model kind, architecture dims,
vocab hash, config hash, parameter manifest) followed by the raw
little-endian float64 parameter blob in manifest order.  Loading rejects
vocab-hash mismatches, and config-hash mismatches when the caller pins one.
"""

from __future__ import annotations

import json
import os
from typing import Optional

import numpy as np
import torch
from torch import nn

from .errors import CheckpointMismatchError, MissingArtifactError

FORMAT_TAG = "spinlab-ckpt-1"


def save_checkpoint(path, kind: str, arch: dict, vocab_hash: str,
                    config_hash: str, model: nn.Module, extra: Optional[dict] = None) -> None:
    names = sorted(name for name, _ in model.named_parameters())
    params = dict(model.named_parameters())
    manifest = [{"name": n, "shape": list(params[n].shape)} for n in names]
    header = {
        "format": FORMAT_TAG,
        "kind": kind,
        "arch": arch,
        "vocab_hash": vocab_hash,
        "config_hash": config_hash,
        "extra": extra or {},
        "params": manifest,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for name in names:
            fh.write(params[name].detach().cpu().numpy().astype("<f8").tobytes())


def load_checkpoint(path, expected_kind: Optional[str] = None,
                    expected_vocab_hash: Optional[str] = None,
                    expected_config_hash: Optional[str] = None) -> tuple[dict, dict[str, np.ndarray]]:
    if not os.path.exists(path):
        raise MissingArtifactError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointMismatchError(f"unreadable checkpoint header in {path}") from None
    if header.get("format") != FORMAT_TAG:
        raise CheckpointMismatchError(f"unknown checkpoint format in {path}")
    if expected_kind is not None and header.get("kind") != expected_kind:
        raise CheckpointMismatchError(
            f"{path}: expected a {expected_kind!r} checkpoint, found {header.get('kind')!r}")
    if expected_vocab_hash is not None and header.get("vocab_hash") != expected_vocab_hash:
        raise CheckpointMismatchError(
            f"{path}: vocabulary hash mismatch ({header.get('vocab_hash')} != {expected_vocab_hash})")
    if expected_config_hash is not None and header.get("config_hash") != expected_config_hash:
        raise CheckpointMismatchError(
            f"{path}: config hash mismatch ({header.get('config_hash')} != {expected_config_hash})")
    params: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        size = count * 8
        if offset + size > len(blob):
            raise CheckpointMismatchError(f"{path}: truncated parameter blob")
        params[entry["name"]] = np.frombuffer(
            blob[offset : offset + size], dtype="<f8").reshape(shape).copy()
        offset += size
    if offset != len(blob):
        raise CheckpointMismatchError(f"{path}: trailing bytes after parameter blob")
    return header, params


def apply_params(model: nn.Module, params: dict[str, np.ndarray]) -> None:
    own = dict(model.named_parameters())
    if set(own) != set(params):
        missing = set(own) ^ set(params)
        raise CheckpointMismatchError(f"parameter set mismatch: {sorted(missing)}")
    with torch.no_grad():
        for name, value in params.items():
            if tuple(own[name].shape) != value.shape:
                raise CheckpointMismatchError(f"shape mismatch for {name}")
            own[name].copy_(torch.from_numpy(value))
