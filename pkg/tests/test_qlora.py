import numpy as np
import pytest

from peftkit.adalora import AdaLoraAdapter, init_adalora
from peftkit.errors import ShapeError
from peftkit.lora import LoraAdapter, init_lora, lora_forward
from peftkit.qlora import QuantizedLinear, qlora_backward, qlora_forward
from peftkit.quantize import NF4, dequantize, encode_qtensor, quantize


def _layer(rng, n=4, k=4, codec="nf4", adapter=None):
    w = rng.standard_normal((n, k)).astype(np.float32)
    return QuantizedLinear(quantize(w, codec, 8), adapter), w


def _fd_audit(layer, x, g, eps=1e-4):
    """Max relative error of adapter grads vs central differences of sum(y * g)."""
    grads, _ = qlora_backward(x, layer, g)
    worst = 0.0
    for name, arr in layer.adapter.parameters().items():
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            fp = float(np.sum(qlora_forward(x, layer) * g))
            arr[idx] = old - eps
            fm = float(np.sum(qlora_forward(x, layer) * g))
            arr[idx] = old
            num = (fp - fm) / (2 * eps)
            got = float(grads[name][idx])
            worst = max(worst, abs(got - num) / max(abs(got), abs(num), 1e-8))
    return worst


class TestForward:
    def test_fresh_adapter_is_dequantized_matmul(self, rng):
        layer, _ = _layer(rng, adapter=init_lora(4, 4, 2, seed=0))
        x = rng.standard_normal((3, 4)).astype(np.float32)
        assert qlora_forward(x, layer).tobytes() == (QuantizedLinear(layer.w_q).forward(x)).tobytes()
        np.testing.assert_allclose(qlora_forward(x, layer), x @ dequantize(layer.w_q), rtol=1e-5, atol=1e-6)

    def test_codebook_weights_match_lora(self, rng):
        idx = rng.integers(0, 16, size=(4, 8))
        idx[:, 0] = 15
        w = (NF4.levels[idx] * 0.5).astype(np.float32)
        ad = LoraAdapter(rng.standard_normal((4, 2)).astype(np.float32), rng.standard_normal((2, 8)).astype(np.float32))
        layer = QuantizedLinear(quantize(w, "nf4", 8), ad)
        x = rng.standard_normal((5, 4)).astype(np.float32)
        assert qlora_forward(x, layer).tobytes() == lora_forward(x, w, ad).tobytes()

    def test_zero_input(self, rng):
        layer, _ = _layer(rng, adapter=init_lora(4, 4, 2))
        assert not qlora_forward(np.zeros((2, 4), np.float32), layer).any()

    def test_repeatable(self, rng):
        layer, _ = _layer(rng, adapter=init_adalora(4, 4, 2, seed=1))
        x = rng.standard_normal((3, 4)).astype(np.float32)
        assert qlora_forward(x, layer).tobytes() == qlora_forward(x, layer).tobytes()

    @pytest.mark.parametrize("codec", ["int8", "int4", "nf4"])
    def test_transparency_within_quantization_error(self, rng, codec):
        layer, w = _layer(rng, 16, 8, codec, init_lora(16, 8, 4))
        x = rng.standard_normal((6, 16)).astype(np.float32)
        max_err = np.max(np.abs(dequantize(layer.w_q) - w))
        bound = np.abs(x).sum(axis=1, keepdims=True) * max_err
        assert np.all(np.abs(qlora_forward(x, layer) - x @ w) <= bound * (1 + 1e-5) + 1e-6)

    def test_shape_error(self, rng):
        layer, _ = _layer(rng, adapter=init_lora(4, 4, 2))
        with pytest.raises(ShapeError):
            qlora_forward(np.zeros((2, 5), np.float32), layer)
        with pytest.raises(ShapeError):
            qlora_backward(np.zeros((2, 4), np.float32), layer, np.zeros((2, 5), np.float32))


class TestBackward:
    def test_lora_finite_differences(self, rng):
        ad = LoraAdapter(rng.standard_normal((4, 2)), rng.standard_normal((2, 4)))
        layer, _ = _layer(rng, adapter=ad)
        x = rng.standard_normal((3, 4))
        g = rng.standard_normal((3, 4))
        assert _fd_audit(layer, x, g) < 1e-3

    def test_adalora_finite_differences(self, rng):
        ad = AdaLoraAdapter(rng.standard_normal((4, 3)), rng.standard_normal(3), rng.standard_normal((3, 4)), 0.0)
        layer, _ = _layer(rng, codec="int4", adapter=ad)
        x = rng.standard_normal((3, 4))
        g = rng.standard_normal((3, 4))
        assert _fd_audit(layer, x, g) < 1e-3

    def test_no_weight_gradient(self, rng):
        layer, _ = _layer(rng, adapter=init_lora(4, 4, 2))
        grads, gx = qlora_backward(np.ones((2, 4), np.float32), layer, np.ones((2, 4), np.float32))
        assert set(grads) == {"a", "b"}
        np.testing.assert_allclose(gx, np.ones((2, 4)) @ dequantize(layer.w_q).T, rtol=1e-6)

    def test_zero_upstream(self, rng):
        ad = LoraAdapter(rng.standard_normal((4, 2)).astype(np.float32), rng.standard_normal((2, 4)).astype(np.float32))
        layer, _ = _layer(rng, adapter=ad)
        grads, _ = qlora_backward(np.ones((2, 4), np.float32), layer, np.zeros((2, 4), np.float32))
        assert all(not v.any() for v in grads.values())

    def test_training_leaves_codes_alone_and_reduces_loss(self, rng):
        layer, w = _layer(rng, 8, 6, "nf4", init_lora(8, 6, 3, sigma=0.5, seed=2))
        before = encode_qtensor(layer.w_q)
        x = rng.standard_normal((32, 8)).astype(np.float32)
        target = x @ (w + 0.3 * rng.standard_normal((8, 6)).astype(np.float32))
        losses = []
        for _ in range(200):
            y = qlora_forward(x, layer)
            losses.append(float(np.mean((y - target) ** 2)))
            grads, _ = qlora_backward(x, layer, (2 * (y - target) / y.size).astype(np.float32))
            for name, arr in layer.adapter.parameters().items():
                arr -= np.float32(0.1) * grads[name]
        assert encode_qtensor(layer.w_q) == before
        assert all(b < a for a, b in zip(losses, losses[1:]))
        assert losses[-1] < losses[0]
