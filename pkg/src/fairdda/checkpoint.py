"""Checkpoint container: a plain-text header describing each tensor
(`name shape dtype offset` per line), a blank line, then the raw
little-endian values back to back. Reload is bit-exact.

A single JSON metadata line (prefixed `#meta `) carries run configuration
snapshots alongside the tensors.
"""
from __future__ import annotations

import json

import numpy as np

_DTYPES = {"<f4": np.dtype("<f4"), "<i8": np.dtype("<i8")}


def _dtype_token(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "<f4"
    if arr.dtype == np.int64:
        return "<i8"
    raise TypeError(f"unsupported checkpoint dtype {arr.dtype}")


def _shape_token(arr: np.ndarray) -> str:
    if arr.ndim == 1:
        return str(arr.shape[0])
    if arr.ndim == 2:
        return f"{arr.shape[0]}x{arr.shape[1]}"
    raise TypeError("only 1-d and 2-d arrays are checkpointed")


def save_checkpoint(path: str, tensors: dict, meta: dict | None = None):
    """Write named arrays (float32 or int64, 1-d or 2-d) plus metadata."""
    lines = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        if " " in name:
            raise ValueError("tensor names must not contain spaces")
        arr = np.ascontiguousarray(arr)
        token = _dtype_token(arr)
        raw = arr.astype(_DTYPES[token], copy=False).tobytes()
        lines.append(f"{name} {_shape_token(arr)} {token} {offset}")
        blobs.append(raw)
        offset += len(raw)
    header = ""
    if meta is not None:
        header += "#meta " + json.dumps(meta, sort_keys=True) + "\n"
    header += "\n".join(lines) + "\n\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str):
    """Read back (tensors dict, meta dict)."""
    with open(path, "rb") as fh:
        payload = fh.read()
    sep = payload.find(b"\n\n")
    if sep < 0:
        raise ValueError("malformed checkpoint: missing header terminator")
    header = payload[:sep].decode("utf-8")
    body = payload[sep + 2:]
    tensors = {}
    meta: dict = {}
    for line in header.splitlines():
        if not line.strip():
            continue
        if line.startswith("#meta "):
            meta = json.loads(line[len("#meta "):])
            continue
        name, shape_tok, dtype_tok, off_tok = line.split(" ")
        if dtype_tok not in _DTYPES:
            raise ValueError(f"unknown dtype token {dtype_tok}")
        shape = tuple(int(s) for s in shape_tok.split("x"))
        count = int(np.prod(shape)) if shape else 0
        dt = _DTYPES[dtype_tok]
        off = int(off_tok)
        arr = np.frombuffer(body, dtype=dt, count=count, offset=off).reshape(shape)
        tensors[name] = arr.copy()
    return tensors, meta
