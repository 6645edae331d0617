"""Binary checkpoint container.

Layout (little-endian)::

    b"PMUD"  u32 version  u32 entry_count
    entry*: u16 name_len, name (utf-8), u8 ndim, u32 dims[ndim], f32 data[prod(dims)]
    u32 crc32 of every preceding byte
"""
from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch

from .errors import CorruptFile, IncompatibleCheckpoint

MAGIC = b"PMUD"
VERSION = 1


def _as_array(v) -> np.ndarray:
    if isinstance(v, torch.Tensor):
        v = v.detach().cpu().numpy()
    return np.asarray(v, dtype="<f4", order="C")


def save_checkpoint(bundle: Mapping[str, object], path) -> None:
    """Write ``name -> array`` entries as 32-bit floats; the write is atomic."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(bundle))]
    for name in sorted(bundle):
        arr = _as_array(bundle[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    os.replace(tmp, path)


def load_checkpoint(path, expected: Optional[Mapping[str, tuple]] = None) -> dict[str, np.ndarray]:
    """Read a checkpoint; ``expected`` maps entry names to shapes that must match."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CorruptFile(f"{path}: not a checkpoint (bad magic or truncated)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptFile(f"{path}: checksum mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise IncompatibleCheckpoint(f"{path}: format version {version}, reader supports {VERSION}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 4 * n > len(body):
                raise CorruptFile(f"{path}: entry {name!r} overruns the file")
            out[name] = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape).copy()
            off += 4 * n
    except (struct.error, UnicodeDecodeError) as e:
        raise CorruptFile(f"{path}: malformed entry table ({e})") from e
    if off != len(body):
        raise CorruptFile(f"{path}: {len(body) - off} trailing bytes")
    if expected is not None:
        check_shapes(out, expected, str(path))
    return out


def check_shapes(entries: Mapping[str, np.ndarray], expected: Mapping[str, tuple], where: str = "checkpoint") -> None:
    for name, shape in expected.items():
        if name not in entries:
            raise IncompatibleCheckpoint(f"{where}: missing entry {name!r}")
        if tuple(entries[name].shape) != tuple(shape):
            raise IncompatibleCheckpoint(
                f"{where}: entry {name!r} has shape {tuple(entries[name].shape)}, config expects {tuple(shape)}")


def module_bundle(**modules: torch.nn.Module) -> dict[str, torch.Tensor]:
    """Flatten ``prefix -> module`` into ``prefix.param`` entries (buffers included)."""
    out = {}
    for prefix, m in modules.items():
        for k, v in m.state_dict().items():
            out[f"{prefix}.{k}"] = v
    return out


def expected_shapes(**modules: torch.nn.Module) -> dict[str, tuple]:
    return {k: tuple(v.shape) for k, v in module_bundle(**modules).items()}


def load_into(module: torch.nn.Module, entries: Mapping[str, np.ndarray], prefix: str) -> None:
    state = module.state_dict()
    check_shapes({k[len(prefix) + 1:]: v for k, v in entries.items() if k.startswith(prefix + ".")},
                 {k: tuple(v.shape) for k, v in state.items()}, prefix)
    module.load_state_dict({k: torch.as_tensor(entries[f"{prefix}.{k}"]).to(v.dtype) for k, v in state.items()})
