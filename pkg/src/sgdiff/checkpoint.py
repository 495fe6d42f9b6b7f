"""Checkpoint files, content hashes and the latent cache format."""

from __future__ import annotations

import hashlib
import json
import pickle
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

from sgdiff.errors import ConfigError, DataValidationError, DependencyError

FORMAT = "sgdiff-checkpoint-1"
LATENT_MAGIC = b"SGLC"
LATENT_VERSION = 1
# magic, version, count, h, w, c, 64-char source checkpoint id
_LATENT_HEADER = struct.Struct("<4sIIIII64s")


def tensor_digest(groups: dict[str, dict[str, torch.Tensor]]) -> str:
    """sha256 over names, dtypes, shapes and raw bytes of every tensor."""
    h = hashlib.sha256()
    for group in sorted(groups):
        for name in sorted(groups[group]):
            t = groups[group][name].detach().contiguous().cpu()
            h.update(f"{group}/{name}:{t.dtype}:{tuple(t.shape)}".encode())
            h.update(t.numpy().tobytes())
    return h.hexdigest()


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(path: str | Path, modules: dict[str, nn.Module], optimizer=None,
                    step: int = 0, meta: dict | None = None) -> str:
    """Write named parameter groups with a shape manifest; returns the tensor digest."""
    tensors = {name: {k: v.detach().clone() for k, v in m.state_dict().items()} for name, m in modules.items()}
    shapes = {g: {k: list(v.shape) for k, v in t.items()} for g, t in tensors.items()}
    digest = tensor_digest(tensors)
    payload = {
        "format": FORMAT,
        "step": int(step),
        "tensors": tensors,
        "shapes": shapes,
        "digest": digest,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "meta": meta or {},
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return digest


def load_checkpoint(path: str | Path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, ValueError, pickle.UnpicklingError) as exc:
        raise DependencyError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise DependencyError(f"{path} is not an sgdiff checkpoint")
    return payload


def restore(modules: dict[str, nn.Module], payload: dict, strict_groups: bool = True) -> None:
    """Load tensors into modules after checking every shape against the module."""
    for name, module in modules.items():
        if name not in payload["tensors"]:
            if strict_groups:
                raise ConfigError(f"checkpoint has no parameter group {name!r}")
            continue
        saved = payload["tensors"][name]
        expected = module.state_dict()
        missing = set(expected) - set(saved)
        extra = set(saved) - set(expected)
        if missing or extra:
            raise ConfigError(f"group {name!r}: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        for key, tensor in saved.items():
            if tuple(tensor.shape) != tuple(expected[key].shape):
                raise ConfigError(
                    f"group {name!r}: {key} has shape {tuple(tensor.shape)}, "
                    f"config expects {tuple(expected[key].shape)}"
                )
        module.load_state_dict(saved)


def latest_checkpoint(directory: str | Path) -> Path | None:
    paths = sorted(Path(directory).glob("ckpt_*.pt"))
    return paths[-1] if paths else None


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step:08d}.pt"


# ---------------------------------------------------------------------------
# stage manifests


def write_manifest(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def read_manifest(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise DependencyError(f"missing or unreadable stage manifest {path}") from exc


# ---------------------------------------------------------------------------
# latent cache


def write_latent_cache(path: str | Path, latents, source_id: str) -> None:
    """Latents ``(N, c, h, w)`` stored as little-endian float32 in ``(N, h, w, c)`` order."""
    arr = np.asarray(latents.detach().cpu() if torch.is_tensor(latents) else latents, dtype=np.float32)
    if arr.ndim != 4:
        raise ValueError("latents must be (N, c, h, w)")
    n, c, h, w = arr.shape
    sid = source_id.encode("ascii")
    if len(sid) > 64:
        raise ValueError("source id longer than 64 characters")
    header = _LATENT_HEADER.pack(LATENT_MAGIC, LATENT_VERSION, n, h, w, c, sid.ljust(64, b"\0"))
    body = np.ascontiguousarray(arr.transpose(0, 2, 3, 1)).astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_latent_cache(path: str | Path) -> tuple[np.ndarray, dict]:
    """Returns latents ``(N, c, h, w)`` and the header fields."""
    data = Path(path).read_bytes()
    if len(data) < _LATENT_HEADER.size:
        raise DataValidationError(f"{path}: truncated latent cache")
    magic, version, n, h, w, c, sid = _LATENT_HEADER.unpack_from(data)
    if magic != LATENT_MAGIC or version != LATENT_VERSION:
        raise DataValidationError(f"{path}: not a latent cache file")
    body = np.frombuffer(data, dtype="<f4", offset=_LATENT_HEADER.size)
    if body.size != n * h * w * c:
        raise DataValidationError(f"{path}: expected {n * h * w * c} floats, found {body.size}")
    latents = body.reshape(n, h, w, c).transpose(0, 3, 1, 2).astype(np.float32)
    header = {"count": n, "h": h, "w": w, "c": c, "source": sid.rstrip(b"\0").decode("ascii")}
    return latents, header
