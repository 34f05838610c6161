"""Toy single-head attention model whose projections can carry adapters.

Sequences of equal length are stacked row-wise into one matrix, so the
projections run as single matmuls over a whole batch and only the softmax
attention loops over sequences.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError
from .layers import Linear
from .linalg import DTYPE, attention_core, matmul
from .quantize import QuantizedTensor, dequantize, encode_qtensor

PROJECTIONS = ("q", "k", "v")


def _dense(w, dtype) -> np.ndarray:
    if isinstance(w, QuantizedTensor):
        return dequantize(w).astype(dtype, copy=False)
    return np.asarray(w, dtype=dtype)


def _weight_bytes(w) -> bytes:
    if isinstance(w, QuantizedTensor):
        return encode_qtensor(w)
    return np.ascontiguousarray(w).tobytes()


@dataclass
class ForwardCache:
    hidden: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attended: np.ndarray
    weights: list


@dataclass
class AdapterizedModel:
    """embedding -> {Q, K, V} projections -> attention -> output head."""

    embedding: np.ndarray | QuantizedTensor  # d_model x d_model, frozen
    q: Linear
    k: Linear
    v: Linear
    head: np.ndarray | QuantizedTensor  # d_k x d_model
    seq_len: int
    head_trainable: bool = False

    def __post_init__(self):
        if self.head_trainable and isinstance(self.head, QuantizedTensor):
            raise ValueError("a trainable head cannot be quantized")

    @property
    def d_model(self) -> int:
        return self.q.in_features

    @property
    def d_k(self) -> int:
        return self.q.out_features

    def projection(self, name: str) -> Linear:
        if name not in PROJECTIONS:
            raise ValueError(f"unknown projection {name!r}")
        return getattr(self, name)

    def with_projections(self, **layers) -> "AdapterizedModel":
        return replace(self, **layers)

    def adapters(self) -> dict:
        return {name: getattr(self, name).adapter for name in PROJECTIONS if getattr(self, name).adapter is not None}

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays keyed ``"<projection>.<factor>"`` (plus ``"head"``)."""
        params = {}
        for name, adapter in self.adapters().items():
            for key, value in adapter.parameters().items():
                params[f"{name}.{key}"] = value
        if self.head_trainable:
            params["head"] = self.head
        return params

    def n_trainable(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def frozen_weights(self) -> dict[str, bytes]:
        out = {"embedding": _weight_bytes(self.embedding)}
        for name in PROJECTIONS:
            out[name] = getattr(self, name).frozen_bytes()
        if not self.head_trainable:
            out["head"] = _weight_bytes(self.head)
        return out

    def frozen_digest(self) -> str:
        h = hashlib.sha256()
        for name, blob in sorted(self.frozen_weights().items()):
            h.update(name.encode())
            h.update(blob)
        return h.hexdigest()

    def n_frozen(self) -> int:
        total = self.embedding.size + (0 if self.head_trainable else self.head.size)
        return total + sum(getattr(self, n).in_features * getattr(self, n).out_features for n in PROJECTIONS)

    def astype(self, dtype) -> "AdapterizedModel":
        """Copy with dense weights and adapters cast to ``dtype`` (quantized weights kept)."""

        def cast_layer(layer: Linear) -> Linear:
            weight = layer.weight if isinstance(layer.weight, QuantizedTensor) else layer.weight.astype(dtype)
            adapter = layer.adapter.astype(dtype) if layer.adapter is not None else None
            return replace(layer, weight=weight, adapter=adapter)

        def cast(w):
            return w if isinstance(w, QuantizedTensor) else np.asarray(w).astype(dtype)

        return replace(
            self,
            embedding=cast(self.embedding),
            q=cast_layer(self.q),
            k=cast_layer(self.k),
            v=cast_layer(self.v),
            head=cast(self.head),
        )

    # ------------------------------------------------------------ passes

    def forward(self, x: np.ndarray, return_cache: bool = False):
        """Outputs for a row-stack of sequences of length ``seq_len``."""
        if x.ndim != 2 or x.shape[1] != self.d_model:
            raise ShapeError(f"input {x.shape} does not have {self.d_model} columns")
        if x.shape[0] % self.seq_len:
            raise ShapeError(f"{x.shape[0]} rows is not a multiple of seq_len={self.seq_len}")
        dtype = x.dtype
        hidden = matmul(x, _dense(self.embedding, dtype))
        q, k, v = (getattr(self, n).forward(hidden) for n in PROJECTIONS)
        attended = np.empty((x.shape[0], v.shape[1]), dtype=dtype)
        weights = []
        for start in range(0, x.shape[0], self.seq_len):
            rows = slice(start, start + self.seq_len)
            attended[rows], w = attention_core(q[rows], k[rows], v[rows], return_weights=True)
            weights.append(w)
        y = matmul(attended, _dense(self.head, dtype))
        if return_cache:
            return y, ForwardCache(hidden, q, k, v, attended, weights)
        return y

    def backward(self, cache: ForwardCache, grad_y: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of the loss w.r.t. :meth:`parameters` given ``dL/dy``."""
        dtype = grad_y.dtype
        grads = {}
        head = _dense(self.head, dtype)
        if self.head_trainable:
            grads["head"] = matmul(np.ascontiguousarray(cache.attended.T), grad_y)
        g_att = matmul(grad_y, np.ascontiguousarray(head.T))
        g_q = np.empty_like(cache.q)
        g_k = np.empty_like(cache.k)
        g_v = np.empty_like(cache.v)
        scale = dtype.type(1.0 / np.sqrt(self.d_k))
        for i, start in enumerate(range(0, g_att.shape[0], self.seq_len)):
            rows = slice(start, start + self.seq_len)
            w = cache.weights[i]
            g_v[rows] = matmul(np.ascontiguousarray(w.T), g_att[rows])
            g_w = matmul(g_att[rows], np.ascontiguousarray(cache.v[rows].T))
            g_s = w * (g_w - np.sum(g_w * w, axis=1, keepdims=True)) * scale
            g_q[rows] = matmul(g_s, cache.k[rows])
            g_k[rows] = matmul(np.ascontiguousarray(g_s.T), cache.q[rows])
        for name, g in zip(PROJECTIONS, (g_q, g_k, g_v)):
            layer = getattr(self, name)
            if layer.adapter is None:
                continue
            layer_grads, _ = layer.adapter.backward(cache.hidden, g)
            for key, value in layer_grads.items():
                grads[f"{name}.{key}"] = value
        return grads
