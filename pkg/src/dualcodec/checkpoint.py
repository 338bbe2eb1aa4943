"""Digest-stamped checkpoint files for experts and collaboration modules.

The digest is a SHA-256 over every parameter/buffer (name, shape, dtype,
little-endian bytes), so it identifies the weights themselves, not the file.
Loading re-derives the digest and refuses silently corrupted checkpoints.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import torch

from .errors import ArtifactMissingError, ContractError, DigestMismatchError

FORMAT_VERSION = 1


def state_digest(state_dict: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state_dict):
        t = state_dict[name]
        arr = t.detach().cpu().contiguous().numpy()
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(np.asarray(arr.shape, dtype="<i8").tobytes())
        h.update(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return h.hexdigest()


def module_digest(module: torch.nn.Module) -> str:
    return state_digest(module.state_dict())


def save_checkpoint(path, kind: str, config: dict, module: torch.nn.Module,
                    extra: dict | None = None) -> str:
    state = module.state_dict()
    digest = state_digest(state)
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "state": state,
        "digest": digest,
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return digest


def load_checkpoint(path, kind: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise ArtifactMissingError(
            f"checkpoint {path} not found; produce it with the pretrain/train commands")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint format in {path}")
    if payload.get("kind") != kind:
        raise ContractError(f"{path} holds a {payload.get('kind')!r} checkpoint, expected {kind!r}")
    recomputed = state_digest(payload["state"])
    if recomputed != payload["digest"]:
        raise DigestMismatchError(f"{path}: stored digest does not match weights")
    return payload
