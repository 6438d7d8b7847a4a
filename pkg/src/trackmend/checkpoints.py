"""Versioned checkpoint files and parameter checksums."""

from __future__ import annotations

import hashlib
from pathlib import Path

import torch
from torch import nn

CHECKPOINT_VERSION = 1


def save_checkpoint(path: Path, kind: str, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format_version": CHECKPOINT_VERSION, "kind": kind, **payload}, path)
    return path


def load_checkpoint(path: Path, expected_kind: str | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    data = torch.load(path, map_location="cpu", weights_only=False)
    version = data.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r} in {path}")
    if expected_kind is not None and data.get("kind") != expected_kind:
        raise ValueError(f"expected a {expected_kind!r} checkpoint, found {data.get('kind')!r} in {path}")
    return data


def checkpoint_sha(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def parameter_checksum(module: nn.Module) -> str:
    """Digest of all parameters and buffers; any training-induced change shows up."""
    digest = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
