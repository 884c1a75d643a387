"""Byte-level tokenizer: ids 0..255 are raw bytes, plus BOS/EOS specials."""

from __future__ import annotations

import numpy as np

__all__ = ["BOS_ID", "EOS_ID", "VOCAB_SIZE", "encode", "decode"]

BOS_ID = 256
EOS_ID = 257
VOCAB_SIZE = 258


def encode(text: str | bytes, bos: bool = False, eos: bool = False) -> np.ndarray:
    """UTF-8 bytes as int64 ids, optionally wrapped in BOS/EOS."""
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    ids = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    parts = []
    if bos:
        parts.append(np.array([BOS_ID], dtype=np.int64))
    parts.append(ids)
    if eos:
        parts.append(np.array([EOS_ID], dtype=np.int64))
    return np.concatenate(parts) if len(parts) > 1 else ids


def decode(ids) -> str:
    """Bytes back to text; specials are dropped, invalid UTF-8 replaced."""
    arr = np.asarray(ids, dtype=np.int64).reshape(-1)
    arr = arr[arr < 256]
    return arr.astype(np.uint8).tobytes().decode("utf-8", errors="replace")
