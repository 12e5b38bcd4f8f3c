"""Binary checkpoint and optimizer-state files.

Checkpoint (little endian)::

    b"SANCK1" u32 n_params
    per parameter (sorted by name): u16 name_len, utf-8 name, u32 rank,
                                    u32 dims[rank], f32 values (row major)

Optimizer state uses magic ``b"SANOS1"``, then a u64 step counter, then the
same parameter layout holding the first moments (``m/<name>``) and second
moments (``v/<name>``).
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError

CKPT_MAGIC = b"SANCK1"
OPT_MAGIC = b"SANOS1"


def to_f32(x: np.ndarray) -> np.ndarray:
    """Round to single precision, returned as float64."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def _unpack_tensors(buf: bytes, pos: int, path) -> dict[str, np.ndarray]:
    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated {what} at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "parameter count"))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(n, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: parameter name is not UTF-8 at byte {pos - n}") from None
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        size = int(np.prod(dims)) if rank else 1
        vals = np.frombuffer(take(4 * size, f"values of {name}"), dtype="<f4")
        if name in out:
            raise FormatError(f"{path}: duplicate parameter {name}")
        out[name] = vals.reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes at byte {pos}")
    return out


def _atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray]) -> None:
    _atomic_write(path, CKPT_MAGIC + _pack_tensors(params))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:6] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    return _unpack_tensors(buf, 6, path)


def save_optimizer_state(path: str | Path, step: int, m: dict[str, np.ndarray], v: dict[str, np.ndarray]) -> None:
    tensors = {f"m/{k}": a for k, a in m.items()}
    tensors.update({f"v/{k}": a for k, a in v.items()})
    _atomic_write(path, OPT_MAGIC + struct.pack("<Q", step) + _pack_tensors(tensors))


def load_optimizer_state(path: str | Path) -> tuple[int, dict[str, np.ndarray], dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:6] != OPT_MAGIC:
        raise FormatError(f"{path}: bad optimizer-state magic")
    if len(buf) < 14:
        raise FormatError(f"{path}: truncated step counter at byte 6")
    (step,) = struct.unpack("<Q", buf[6:14])
    tensors = _unpack_tensors(buf, 14, path)
    m = {k[2:]: a for k, a in tensors.items() if k.startswith("m/")}
    v = {k[2:]: a for k, a in tensors.items() if k.startswith("v/")}
    if len(m) + len(v) != len(tensors) or set(m) != set(v):
        raise FormatError(f"{path}: moment tensors do not pair up")
    return step, m, v


def average_checkpoints(paths: Sequence[str | Path]) -> dict[str, np.ndarray]:
    """Arithmetic mean of each parameter across checkpoints."""
    if not paths:
        raise ValueError("need at least one checkpoint to average")
    first = load_checkpoint(paths[0])
    total = {k: v.copy() for k, v in first.items()}
    for path in paths[1:]:
        other = load_checkpoint(path)
        if set(other) != set(total):
            missing = sorted(set(total) ^ set(other))[0]
            raise FormatError(f"{path}: parameter {missing} not present in every checkpoint")
        for name, arr in other.items():
            if arr.shape != total[name].shape:
                raise FormatError(f"{path}: parameter {name} has shape {arr.shape}, expected {total[name].shape}")
            total[name] += arr
    return {k: v / len(paths) for k, v in total.items()}
