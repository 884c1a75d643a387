"""Self-describing binary checkpoints.

Layout (all integers little-endian):

    b"HYLM"  magic
    u32      format version
    u64 + bytes   config text (UTF-8, the flat [section] format)
    u64 + bytes   metadata text (UTF-8, "key = value" per line)
    u64      array count
    per array:
        u16 + bytes   name
        u16 + bytes   numpy dtype string (little-endian form, e.g. "<f8")
        u8            ndim
        u64 * ndim    shape
        u64 + bytes   raw C-order data

Writing is deterministic for equal inputs, so saving identical state twice
produces byte-identical files.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .configfile import (
    dataclass_from_dict,
    dataclass_to_dict,
    parse_sections,
    render_sections,
)
from .model import HybridModelConfig, ModelParams, build_model

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "CheckpointData",
    "save_checkpoint",
    "load_checkpoint",
    "save_model",
    "load_model",
]

MAGIC = b"HYLM"
FORMAT_VERSION = 1


def _write_block(f, payload: bytes) -> None:
    f.write(struct.pack("<Q", len(payload)))
    f.write(payload)


def _write_short(f, payload: bytes) -> None:
    if len(payload) > 0xFFFF:
        raise ValueError("name or dtype string too long")
    f.write(struct.pack("<H", len(payload)))
    f.write(payload)


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValueError("truncated checkpoint file")
    return data


def _read_block(f) -> bytes:
    (n,) = struct.unpack("<Q", _read_exact(f, 8))
    return _read_exact(f, n)


def _read_short(f) -> bytes:
    (n,) = struct.unpack("<H", _read_exact(f, 2))
    return _read_exact(f, n)


def _render_meta(meta: dict[str, str]) -> str:
    for k, v in meta.items():
        if "\n" in k or "\n" in v or "=" in k:
            raise ValueError(f"metadata entry not representable: {k!r}")
    return "\n".join(f"{k} = {v}" for k, v in meta.items())


def _parse_meta(text: str) -> dict[str, str]:
    meta = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    return meta


@dataclass
class CheckpointData:
    config_text: str
    meta: dict[str, str]
    arrays: dict[str, np.ndarray]


def save_checkpoint(path, arrays: dict[str, np.ndarray], config_text: str = "",
                    meta: dict[str, str] | None = None) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        _write_block(f, config_text.encode("utf-8"))
        _write_block(f, _render_meta(meta or {}).encode("utf-8"))
        f.write(struct.pack("<Q", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, order="C")  # keeps 0-d shapes, unlike ascontiguousarray
            le = arr.dtype.newbyteorder("<")
            _write_short(f, name.encode("utf-8"))
            _write_short(f, le.str.encode("ascii"))
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            _write_block(f, arr.astype(le, copy=False).tobytes())


def load_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        config_text = _read_block(f).decode("utf-8")
        meta = _parse_meta(_read_block(f).decode("utf-8"))
        (count,) = struct.unpack("<Q", _read_exact(f, 8))
        arrays = {}
        for _ in range(count):
            name = _read_short(f).decode("utf-8")
            dtype = np.dtype(_read_short(f).decode("ascii"))
            (ndim,) = struct.unpack("<B", _read_exact(f, 1))
            shape = tuple(struct.unpack("<Q", _read_exact(f, 8))[0] for _ in range(ndim))
            raw = _read_block(f)
            arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        if f.read(1):
            raise ValueError("trailing bytes after checkpoint payload")
    return CheckpointData(config_text=config_text, meta=meta, arrays=arrays)


def save_model(path, config: HybridModelConfig, params: ModelParams,
               extra: dict[str, np.ndarray] | None = None,
               meta: dict[str, str] | None = None) -> None:
    """Weights plus enough config text to rebuild the model from the file."""
    arrays = {name: t.data for name, t in params.named_tensors().items()}
    for name, arr in (extra or {}).items():
        if name in arrays:
            raise ValueError(f"extra array name collides with a weight: {name!r}")
        arrays[name] = arr
    config_text = render_sections({"model": dataclass_to_dict(config)})
    save_checkpoint(path, arrays, config_text=config_text, meta=meta)


def load_model(path):
    """Returns (config, params, extra_arrays, meta)."""
    data = load_checkpoint(path)
    sections = parse_sections(data.config_text)
    if "model" not in sections:
        raise ValueError("checkpoint has no [model] config section")
    config = dataclass_from_dict(HybridModelConfig, sections["model"])
    dtypes = {a.dtype for a in data.arrays.values() if a.dtype.kind == "f"}
    dtype = dtypes.pop() if len(dtypes) == 1 else np.float64
    params = build_model(config, seed=0, dtype=dtype)
    extra = dict(data.arrays)
    for name, t in params.named_tensors().items():
        if name not in extra:
            raise ValueError(f"checkpoint missing weight {name!r}")
        arr = extra.pop(name)
        if arr.shape != t.data.shape:
            raise ValueError(f"weight {name!r} has shape {arr.shape}, "
                             f"expected {t.data.shape}")
        t.data = arr.astype(t.data.dtype, copy=False)
    return config, params, extra, data.meta
