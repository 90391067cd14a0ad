"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"BDCK" | u8 version | u32 len | descriptor JSON (UTF-8)
    | u32 n_params | n x (u16 len | name | u8 ndim | ndim x u32 | float32 payload)
    | u64 checksum of every preceding byte (BLAKE2b, 8-byte digest)
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .backbone import Architecture, GatedBackbone
from .nn import Module
from .policy import PolicyNetwork

MAGIC = b"BDCK"
VERSION = 1
KINDS = ("backbone", "policy", "gates")


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class ArchitectureError(CheckpointError):
    pass


def _checksum(buf: bytes) -> bytes:
    return hashlib.blake2b(buf, digest_size=8).digest()


def encode(kind: str, descriptor: dict[str, Any], params: dict[str, np.ndarray]) -> bytes:
    if kind not in KINDS:
        raise CheckpointError(f"unknown model kind {kind!r}")
    desc = json.dumps({"kind": kind, **descriptor}, sort_keys=True, separators=(",", ":")).encode()
    out = bytearray(MAGIC)
    out += struct.pack("<BI", VERSION, len(desc)) + desc
    out += struct.pack("<I", len(params))
    for name in sorted(params):
        arr = np.asarray(params[name])
        if arr.dtype != np.float32:
            raise CheckpointError(f"{name}: checkpoints store float32, got {arr.dtype}")
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape)
        out += arr.astype("<f4").tobytes()
    out += _checksum(bytes(out))
    return bytes(out)


def decode(buf: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    if len(buf) < 4 + 1 + 4 + 4 + 8 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = buf[4]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body, tail = buf[:-8], buf[-8:]
    if _checksum(body) != tail:
        raise ChecksumError("checkpoint checksum mismatch; file is corrupt")
    pos = 5
    (dlen,) = struct.unpack_from("<I", body, pos)
    pos += 4
    descriptor = json.loads(body[pos : pos + dlen].decode())
    pos += dlen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + nlen].decode()
        pos += nlen
        ndim = body[pos]
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after parameter sections")
    return descriptor, params


def _describe(model: Module) -> tuple[str, dict[str, Any]]:
    if isinstance(model, PolicyNetwork):
        return "policy", {"arch": model.arch.to_dict(), "alpha": model.alpha}
    if isinstance(model, GatedBackbone):
        return "backbone", {"arch": model.arch.to_dict()}
    from .sequential import SequentialGates

    if isinstance(model, SequentialGates):
        return "gates", {"channels": [g.channels for g in model.gates]}
    raise CheckpointError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(model: Module, path, summary: dict[str, Any] | None = None) -> Path:
    kind, desc = _describe(model)
    desc["summary"] = summary or {}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(kind, desc, model.state_dict()))
    return path


def read_checkpoint(path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def load_checkpoint(path, expect: str | None = None, backbone: GatedBackbone | None = None):
    """Rebuild the stored model. ``expect`` guards against loading the wrong kind.

    Gate checkpoints need the ``backbone`` they were trained for.
    """
    desc, params = read_checkpoint(path)
    kind = desc.get("kind")
    if expect is not None and kind != expect:
        raise ArchitectureError(f"{path}: holds a {kind} checkpoint, expected {expect}")
    rng = np.random.default_rng(0)
    if kind == "backbone":
        model: Module = GatedBackbone(Architecture.from_dict(desc["arch"]), rng)
    elif kind == "policy":
        model = PolicyNetwork(Architecture.from_dict(desc["arch"]), rng, alpha=desc["alpha"])
    elif kind == "gates":
        from .sequential import SequentialGates

        if backbone is None:
            raise ArchitectureError("gate checkpoints need the backbone they control")
        model = SequentialGates(backbone, rng)
        if [g.channels for g in model.gates] != desc["channels"]:
            raise ArchitectureError("gate widths do not match the backbone")
    else:
        raise CheckpointError(f"unknown model kind {kind!r}")
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise ArchitectureError(f"{path}: parameters do not fit the architecture: {exc}") from exc
    return model


def load_into(model: Module, path) -> None:
    """Load parameters into an existing model, refusing kind or shape mismatches."""
    kind, desc = _describe(model)
    stored, params = read_checkpoint(path)
    if stored.get("kind") != kind:
        raise ArchitectureError(f"{path}: holds a {stored.get('kind')} checkpoint, target is a {kind}")
    if "arch" in desc and stored.get("arch") != desc["arch"]:
        raise ArchitectureError(f"{path}: architecture {stored.get('arch')} != {desc['arch']}")
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise ArchitectureError(str(exc)) from exc
