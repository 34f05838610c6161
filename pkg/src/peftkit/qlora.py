"""QLoRA linear layer: quantized frozen weight, full-precision adapter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .layers import Linear
from .quantize import QuantizedTensor, dequantize, encode_qtensor


@dataclass
class QuantizedLinear(Linear):
    """``y = x dequant(W_q) + adapter(x)``.

    The base weight is decoded into the input's dtype on every call and
    never stored in decoded form, so there is nothing to go stale when
    constants change.
    """

    weight: QuantizedTensor

    @property
    def w_q(self) -> QuantizedTensor:
        return self.weight

    @property
    def in_features(self) -> int:
        return self.weight.rows

    @property
    def out_features(self) -> int:
        return self.weight.cols

    def dense_weight(self, dtype=np.float32) -> np.ndarray:
        return dequantize(self.weight).astype(dtype, copy=False)

    def frozen_bytes(self) -> bytes:
        return encode_qtensor(self.weight)


def _check_input(x: np.ndarray, layer: QuantizedLinear) -> None:
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise ShapeError(f"input {x.shape} does not match layer with {layer.in_features} inputs")


def qlora_forward(x: np.ndarray, layer: QuantizedLinear) -> np.ndarray:
    _check_input(x, layer)
    return layer.forward(x)


def qlora_backward(x: np.ndarray, layer: QuantizedLinear, upstream_grad: np.ndarray) -> tuple[dict, np.ndarray]:
    """Adapter gradients and input gradient. No gradient exists for ``w_q``."""
    _check_input(x, layer)
    if upstream_grad.shape != (x.shape[0], layer.out_features):
        raise ShapeError(f"upstream gradient {upstream_grad.shape} != output {(x.shape[0], layer.out_features)}")
    return layer.backward(x, upstream_grad)
