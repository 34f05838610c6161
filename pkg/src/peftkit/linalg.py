"""Dense linear algebra for the toy attention model.

Matrices are plain 2-D numpy arrays. The compute path is float32; the
gradient audit runs the same functions in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConvergenceError, FormatError, ShapeError

DTYPE = np.float32

TENSOR_MAGIC = b"PFT1"
_DIMS = struct.Struct("<QQ")

SVD_MAX_SWEEPS = 100
SVD_TOL = 1e-10


def as_matrix(data, dtype=DTYPE) -> np.ndarray:
    """Coerce ``data`` to a C-contiguous 2-D array of ``dtype``."""
    m = np.ascontiguousarray(data, dtype=dtype)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed accumulation order.

    Each output entry is summed over the inner index in ascending order, so
    results are bit-reproducible across runs and across kernel backends.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    if a.shape[0] == 0 or b.shape[1] == 0 or a.shape[1] == 0:
        return np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    return kernels.matmul(np.ascontiguousarray(a, dtype=dtype), np.ascontiguousarray(b, dtype=dtype))


def frobenius_norm(m: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(m, dtype=np.float64))))


def softmax_rows(s: np.ndarray) -> np.ndarray:
    z = s - s.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def attention_core(q, k, v, return_weights=False):
    """softmax(q kᵀ / sqrt(d_k)) v for one sequence.

    With ``return_weights`` the row-stochastic attention matrix is returned
    as well; tests and the backward pass use it.
    """
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query dim {q.shape[1]} != key dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"{k.shape[0]} keys but {v.shape[0]} values")
    scale = q.dtype.type(1.0 / np.sqrt(q.shape[1]))
    weights = softmax_rows(matmul(q, k.T) * scale)
    out = matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def self_attention(x, wq, wk, wv, return_weights=False):
    """Single-head self-attention of the rows of ``x``."""
    for name, w in (("W^Q", wq), ("W^K", wk), ("W^V", wv)):
        if w.shape[0] != x.shape[1]:
            raise ShapeError(f"{name} has shape {w.shape}, input has {x.shape[1]} columns")
    if wq.shape[1] != wk.shape[1]:
        raise ShapeError(f"W^Q {wq.shape} and W^K {wk.shape} disagree on d_k")
    return attention_core(matmul(x, wq), matmul(x, wk), matmul(x, wv), return_weights)


# ---------------------------------------------------------------- SVD


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt


def _complete_orthonormal(cols: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace the columns not flagged ``good`` with an orthonormal completion."""
    m = cols.shape[0]
    basis = [cols[:, i] for i in range(cols.shape[1]) if good[i]]
    out = cols.copy()
    candidates = iter(np.eye(m))
    for i in range(cols.shape[1]):
        if good[i]:
            continue
        for e in candidates:
            w = e.copy()
            for _ in range(2):
                for b in basis:
                    w -= (b @ w) * b
            norm = np.linalg.norm(w)
            if norm > 1e-6:
                w /= norm
                basis.append(w)
                out[:, i] = w
                break
    return out


def _jacobi_tall(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    m, n = a.shape
    u = a.copy()
    v = np.eye(n)
    for _ in range(SVD_MAX_SWEEPS):
        if kernels.jacobi_sweep(u, v, SVD_TOL) <= SVD_TOL:
            break
    else:
        residual = kernels.jacobi_sweep(u.copy(), v.copy(), SVD_TOL)
        raise ConvergenceError(
            f"Jacobi SVD did not converge in {SVD_MAX_SWEEPS} sweeps (max coupling {residual:.3e})"
        )
    sigma = np.sqrt(np.sum(u * u, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma, u, v = sigma[order], u[:, order], v[:, order]
    scale = sigma.max() if n else 0.0
    good = sigma > max(scale * 1e-12, 1e-300)
    u[:, good] /= sigma[good]
    u = _complete_orthonormal(u, good)
    sigma[~good] = 0.0
    return u, sigma, v.T


def svd(m: np.ndarray) -> SvdResult:
    """Thin SVD by one-sided Jacobi rotations (float64 internally)."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("svd input has non-finite entries")
    out_dtype = m.dtype if np.issubdtype(np.asarray(m).dtype, np.floating) else DTYPE
    if a.shape[0] >= a.shape[1]:
        u, sigma, vt = _jacobi_tall(a)
    else:
        # aᵀ = U S Vᵀ  =>  a = V S Uᵀ
        ut_u, sigma, ut_vt = _jacobi_tall(a.T)
        u, vt = ut_vt.T, ut_u.T
    return SvdResult(u.astype(out_dtype), sigma.astype(out_dtype), vt.astype(out_dtype))


# ---------------------------------------------------------- tensor files


def encode_tensor(m: np.ndarray) -> bytes:
    m = as_matrix(m)
    return TENSOR_MAGIC + _DIMS.pack(*m.shape) + m.astype("<f4").tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor record at ``offset``; returns it and the next offset."""
    if buf[offset : offset + 4] != TENSOR_MAGIC:
        raise FormatError("bad magic, expected PFT1 tensor")
    offset += 4
    if len(buf) < offset + _DIMS.size:
        raise FormatError("truncated tensor header")
    rows, cols = _DIMS.unpack_from(buf, offset)
    offset += _DIMS.size
    nbytes = rows * cols * 4
    if len(buf) < offset + nbytes:
        raise FormatError(f"truncated tensor data: need {nbytes} bytes for {rows}x{cols}")
    data = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=offset)
    return data.astype(DTYPE).reshape(rows, cols), offset + nbytes


def save_tensor(path, m: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(m))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    m, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor")
    return m
