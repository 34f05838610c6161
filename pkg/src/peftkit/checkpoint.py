"""Adapter checkpoint files ("PFTA") and model checkpoint directories."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .adalora import AdaLoraAdapter
from .errors import FormatError
from .linalg import decode_tensor, encode_tensor
from .lora import LoraAdapter
from .model import PROJECTIONS
from .quantize import QuantizedTensor, save_qtensor

ADAPTER_MAGIC = b"PFTA"
KIND_LORA = 0
KIND_ADALORA = 1
_HEADER = struct.Struct("<4sBQQQ")


def encode_adapter(adapter) -> bytes:
    if isinstance(adapter, LoraAdapter):
        kind, parts = KIND_LORA, (adapter.a, adapter.b)
    elif isinstance(adapter, AdaLoraAdapter):
        kind, parts = KIND_ADALORA, (adapter.p, adapter.lam.reshape(1, -1), adapter.q)
    else:
        raise TypeError(f"not an adapter: {type(adapter).__name__}")
    header = _HEADER.pack(ADAPTER_MAGIC, kind, adapter.n, adapter.k, adapter.rank)
    return header + b"".join(encode_tensor(m) for m in parts)


def decode_adapter(buf: bytes, gamma: float = 0.0):
    if buf[:4] != ADAPTER_MAGIC:
        raise FormatError("bad magic, expected PFTA adapter checkpoint")
    if len(buf) < _HEADER.size:
        raise FormatError("truncated adapter header")
    _, kind, n, k, r = _HEADER.unpack_from(buf)
    if kind not in (KIND_LORA, KIND_ADALORA):
        raise FormatError(f"unknown adapter kind byte {kind}")
    pos = _HEADER.size
    mats = []
    for _ in range(2 if kind == KIND_LORA else 3):
        m, pos = decode_tensor(buf, pos)
        mats.append(m)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after adapter")
    if kind == KIND_LORA:
        a, b = mats
        if a.shape != (n, r) or b.shape != (r, k):
            raise FormatError(f"factor shapes {a.shape}, {b.shape} do not match header ({n}, {k}, r={r})")
        return LoraAdapter(a, b)
    p, lam, q = mats
    if p.shape != (n, r) or lam.shape != (1, r) or q.shape != (r, k):
        raise FormatError(f"factor shapes {p.shape}, {lam.shape}, {q.shape} do not match header ({n}, {k}, r={r})")
    return AdaLoraAdapter(p, lam.ravel().copy(), q, gamma)


def save_adapter(path, adapter) -> None:
    Path(path).write_bytes(encode_adapter(adapter))


def load_adapter(path, gamma: float = 0.0):
    return decode_adapter(Path(path).read_bytes(), gamma)


def save_checkpoint(model, directory) -> list[Path]:
    """Write adapters, quantized bases and a trainable head; returns the files written."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in PROJECTIONS:
        layer = model.projection(name)
        if layer.adapter is not None:
            path = out / f"adapter_{name}.pfta"
            save_adapter(path, layer.adapter)
            written.append(path)
        if isinstance(layer.weight, QuantizedTensor):
            path = out / f"base_{name}.pftq"
            save_qtensor(path, layer.weight)
            written.append(path)
    if model.head_trainable:
        path = out / "head.pft1"
        path.write_bytes(encode_tensor(np.asarray(model.head)))
        written.append(path)
    return written
