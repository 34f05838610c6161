"""Linear layers with an optional low-rank adapter on a frozen base weight."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .linalg import matmul


@dataclass
class Linear:
    """``y = x W + adapter(x)`` with ``W`` frozen."""

    weight: np.ndarray
    adapter: object | None = None

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def dense_weight(self, dtype=np.float32) -> np.ndarray:
        return np.asarray(self.weight, dtype=dtype)

    def forward(self, x: np.ndarray) -> np.ndarray:
        y = matmul(x, self.dense_weight(x.dtype))
        if self.adapter is not None:
            y = y + self.adapter.forward_delta(x)
        return y

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> tuple[dict, np.ndarray]:
        """Adapter gradients and the input gradient; the base weight gets none."""
        w = self.dense_weight(grad_out.dtype)
        grad_in = matmul(grad_out, np.ascontiguousarray(w.T))
        if self.adapter is None:
            return {}, grad_in
        grads, adapter_grad_in = self.adapter.backward(x, grad_out)
        return grads, grad_in + adapter_grad_in

    def frozen_bytes(self) -> bytes:
        return np.ascontiguousarray(self.weight).tobytes()

    def with_adapter(self, adapter) -> "Linear":
        return replace(self, adapter=adapter)
