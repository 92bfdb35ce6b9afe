"""Binary checkpoint format.

Layout: magic "MCCK", version, sha256 config digest, training step
counter, then a named parameter table of row-major arrays, then an
optional optimizer-state table in the same layout.  Writes are atomic
(temp file + rename) and loads round-trip every array bitwise.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

MCCK_MAGIC = b"MCCK"
MCCK_VERSION = 1
_DTYPES = {0: np.float32, 1: np.float64}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

__all__ = ["config_digest", "save_checkpoint", "load_checkpoint", "CheckpointMismatch"]


class CheckpointMismatch(Exception):
    pass


def config_digest(config: dict) -> bytes:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).digest()


def _write_table(f, arrays: dict):
    f.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype not in _TAGS:
            raise ValueError(f"unsupported checkpoint dtype {arr.dtype} for {name}")
        nb = name.encode()
        f.write(struct.pack("<H", len(nb)))
        f.write(nb)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        f.write(struct.pack("<I", _TAGS[arr.dtype]))
        f.write(arr.tobytes(order="C"))


def _read_table(f) -> dict:
    (count,) = struct.unpack("<I", f.read(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", f.read(2))
        name = f.read(nlen).decode()
        (ndim,) = struct.unpack("<I", f.read(4))
        shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
        (tag,) = struct.unpack("<I", f.read(4))
        dtype = _DTYPES[tag]
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(f.read(n * dtype().itemsize), dtype=dtype, count=n)
        out[name] = data.reshape(shape).copy()
    return out


def save_checkpoint(
    path: str,
    params: dict,
    config: dict,
    step: int,
    optimizer_arrays: dict | None = None,
) -> None:
    """Atomically persist named parameters (Tensor or ndarray values)."""
    arrays = {k: (v.data if hasattr(v, "data") and not isinstance(v, np.ndarray) else np.asarray(v)) for k, v in params.items()}
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MCCK_MAGIC)
        f.write(struct.pack("<I", MCCK_VERSION))
        f.write(config_digest(config))
        f.write(struct.pack("<Q", step))
        _write_table(f, arrays)
        f.write(struct.pack("<B", 1 if optimizer_arrays else 0))
        if optimizer_arrays:
            _write_table(f, optimizer_arrays)
    os.replace(tmp, path)


def load_checkpoint(path: str, config: dict | None = None, strict_digest: bool = False):
    """Read a checkpoint; returns (params, step, optimizer_arrays, digest_ok)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MCCK_MAGIC:
            raise CheckpointMismatch(f"bad checkpoint magic {magic!r} in {path}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != MCCK_VERSION:
            raise CheckpointMismatch(f"unsupported checkpoint version {version}")
        digest = f.read(32)
        (step,) = struct.unpack("<Q", f.read(8))
        params = _read_table(f)
        (has_opt,) = struct.unpack("<B", f.read(1))
        opt = _read_table(f) if has_opt else None
    digest_ok = True
    if config is not None:
        digest_ok = digest == config_digest(config)
        if not digest_ok:
            msg = f"checkpoint {path} was written under a different config"
            if strict_digest:
                raise CheckpointMismatch(msg)
            import warnings

            warnings.warn(msg, stacklevel=2)
    return params, step, opt, digest_ok


def restore_into(named_params: dict, arrays: dict) -> None:
    """Copy loaded arrays into live parameters, shape-checked by name."""
    missing = set(named_params) - set(arrays)
    if missing:
        raise CheckpointMismatch(f"checkpoint missing parameters: {sorted(missing)[:5]}")
    for name, p in named_params.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointMismatch(
                f"shape mismatch for {name}: checkpoint {arr.shape}, model {p.data.shape}"
            )
        p.data = arr.astype(p.data.dtype, copy=True)
