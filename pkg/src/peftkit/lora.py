"""LoRA adapters: a trainable product ``A B`` added to a frozen weight."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ShapeError
from .linalg import DTYPE, matmul

DEFAULT_SIGMA = 0.02


@dataclass
class LoraAdapter:
    a: np.ndarray  # n x r, zero at init
    b: np.ndarray  # r x k, N(0, sigma^2) at init
    init_sigma: float = DEFAULT_SIGMA

    kind = "lora"

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def k(self) -> int:
        return self.b.shape[1]

    @property
    def n_params(self) -> int:
        return self.a.size + self.b.size

    def parameters(self) -> dict[str, np.ndarray]:
        return {"a": self.a, "b": self.b}

    def delta(self) -> np.ndarray:
        return matmul(self.a, self.b)

    def forward_delta(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.n:
            raise ShapeError(f"input has {x.shape[1]} columns, adapter expects {self.n}")
        return matmul(matmul(x, self.a), self.b)

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> tuple[dict, np.ndarray]:
        return lora_backward(x, self, grad_out)

    def astype(self, dtype) -> "LoraAdapter":
        return LoraAdapter(self.a.astype(dtype), self.b.astype(dtype), self.init_sigma)


def init_lora(n: int, k: int, r: int, sigma: float = DEFAULT_SIGMA, seed=0) -> LoraAdapter:
    """Zero ``A`` and Gaussian ``B`` so the initial delta is exactly zero."""
    if not 1 <= r <= min(n, k):
        raise ValueError(f"rank r={r} outside [1, min(n, k)={min(n, k)}]")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    rng = np.random.default_rng(seed)
    a = np.zeros((n, r), dtype=DTYPE)
    b = (sigma * rng.standard_normal((r, k))).astype(DTYPE)
    return LoraAdapter(a, b, sigma)


def lora_forward(x: np.ndarray, w: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """``x W + (x A) B`` without forming ``A B``."""
    if w.shape != (adapter.n, adapter.k):
        raise ShapeError(f"weight {w.shape} does not match adapter ({adapter.n}, {adapter.k})")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"cannot multiply {x.shape} by {w.shape}")
    return matmul(x, w) + adapter.forward_delta(x)


def lora_backward(x: np.ndarray, adapter: LoraAdapter, grad_out: np.ndarray) -> tuple[dict, np.ndarray]:
    """Gradients of the adapter path for upstream gradient ``grad_out``.

    Returns ``({"a": dL/dA, "b": dL/dB}, dL/dx through the adapter only)``.
    """
    if grad_out.shape != (x.shape[0], adapter.k):
        raise ShapeError(f"upstream gradient {grad_out.shape} != output shape {(x.shape[0], adapter.k)}")
    xa = matmul(x, adapter.a)
    g_xa = matmul(grad_out, np.ascontiguousarray(adapter.b.T))
    grads = {
        "a": matmul(np.ascontiguousarray(x.T), g_xa),
        "b": matmul(np.ascontiguousarray(xa.T), grad_out),
    }
    return grads, matmul(g_xa, np.ascontiguousarray(adapter.a.T))


def param_ratio(n: int, k: int, r: int) -> Fraction:
    """Full-matrix to adapter parameter ratio ``n k / ((n + k) r)``, exactly."""
    if min(n, k, r) <= 0:
        raise ValueError("n, k and r must be positive")
    return Fraction(n * k, (n + k) * r)


def attach_adapters(model, targets, r: int, sigma: float = DEFAULT_SIGMA, seed=0,
                    kind: str = "lora", gamma: float = 0.0):
    """Return a copy of ``model`` with fresh adapters on the named projections.

    ``targets`` is any subset of ``{"q", "k", "v"}`` (case-insensitive).
    Each target gets its own generator stream derived from ``seed``.
    """
    from .adalora import init_adalora
    from .model import PROJECTIONS

    chosen = []
    for t in targets:
        name = str(t).lower()
        if name not in PROJECTIONS:
            raise ValueError(f"unknown adapter target {t!r}; expected a subset of Q, K, V")
        if name not in chosen:
            chosen.append(name)
    updates = {}
    for name in PROJECTIONS:
        if name not in chosen:
            continue
        layer = model.projection(name)
        n, k = layer.in_features, layer.out_features
        stream = [seed, PROJECTIONS.index(name)]
        if kind == "lora":
            adapter = init_lora(n, k, r, sigma, stream)
        elif kind == "adalora":
            adapter = init_adalora(n, k, r, gamma, stream)
        else:
            raise ValueError(f"unknown adapter kind {kind!r}")
        updates[name] = layer.with_adapter(adapter)
    return model.with_projections(**updates)
