"""Affine and NF4 block quantization of weight matrices.

Blocks run over the row-major flattening of a matrix; the last block may be
short. Per-block scales are stored as float16, rounded *up* so that the
stored scale still covers the block range. Optionally the scales
themselves are quantized again (8-bit symmetric, one float32 scale per
super-block).
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist

import numpy as np

from . import kernels
from .errors import FormatError
from .linalg import DTYPE, as_matrix

ASYMMETRIC = "asymmetric"
SYMMETRIC = "symmetric"
MODES = (ASYMMETRIC, SYMMETRIC)

DEFAULT_SUPER_BLOCK = 256

QTENSOR_MAGIC = b"PFTQ"
_QHEADER = struct.Struct("<4sBBQQQ")
FLAG_DOUBLE_QUANT = 0x01
FLAG_ZERO_POINTS = 0x02


class Codec(enum.IntEnum):
    AFFINE_INT8 = 0
    AFFINE_INT4 = 1
    NF4 = 2

    @property
    def bits(self) -> int:
        return 8 if self is Codec.AFFINE_INT8 else 4

    @classmethod
    def from_name(cls, name: str) -> "Codec":
        names = {"int8": cls.AFFINE_INT8, "int4": cls.AFFINE_INT4, "nf4": cls.NF4}
        try:
            return names[name]
        except KeyError:
            raise ValueError(f"unknown codec {name!r}; expected one of {sorted(names)}") from None


def code_range(bits: int, mode: str) -> tuple[int, int]:
    if bits not in (4, 8):
        raise ValueError(f"bits must be 4 or 8, got {bits}")
    half = 1 << (bits - 1)
    if mode == ASYMMETRIC:
        return -half, half - 1
    if mode == SYMMETRIC:
        # one code is given up so the range is symmetric about zero
        return -(half - 1), half - 1
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------- affine


@dataclass(frozen=True)
class AffineParams:
    scale: float
    zero_point: int
    q_min: int
    q_max: int
    r_min: float
    r_max: float
    mode: str


def compute_affine_params(values, bits: int, mode: str) -> AffineParams:
    """Scale and zero point from the value range.

    The asymmetric range is widened to contain 0 so the zero point always
    lands inside the code range. A range of width zero falls back to
    scale 1, zero point 0.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot compute quantization parameters of an empty input")
    q_min, q_max = code_range(bits, mode)
    if mode == SYMMETRIC:
        r_max = float(np.max(np.abs(v)))
        if r_max == 0.0:
            return AffineParams(1.0, 0, q_min, q_max, -0.0, 0.0, mode)
        return AffineParams(r_max / q_max, 0, q_min, q_max, -r_max, r_max, mode)
    r_min = min(float(v.min()), 0.0)
    r_max = max(float(v.max()), 0.0)
    if r_max == r_min:
        return AffineParams(1.0, 0, q_min, q_max, r_min, r_max, mode)
    span = q_max - q_min
    scale = (r_max - r_min) / span
    # q_min - r_min / S, written without the rounded reciprocal of S
    zero = int(np.rint(q_min - r_min * span / (r_max - r_min)))
    return AffineParams(scale, min(max(zero, q_min), q_max), q_min, q_max, r_min, r_max, mode)


def quantize_affine(x, params: AffineParams) -> np.ndarray:
    """Integer codes ``clamp(round(x / S + Z))`` with round-half-to-even."""
    x = np.asarray(x, dtype=np.float64)
    q = np.rint(x / params.scale + params.zero_point)
    return np.clip(q, params.q_min, params.q_max).astype(np.int32)


def dequantize_affine(codes, params: AffineParams) -> np.ndarray:
    c = np.asarray(codes, dtype=np.float64)
    out = (params.scale * (c - params.zero_point)).astype(DTYPE)
    return out if out.ndim != 1 else out.reshape(1, -1)


# ------------------------------------------------------------- NF4


@dataclass(frozen=True)
class Nf4Codebook:
    levels: np.ndarray

    def __post_init__(self):
        lv = np.asarray(self.levels, dtype=np.float64)
        if lv.shape != (16,):
            raise ValueError("an NF4 codebook has exactly 16 levels")
        if not np.all(np.diff(lv) > 0):
            raise ValueError("codebook levels must be strictly increasing")
        if lv[0] != -1.0 or lv[-1] != 1.0 or 0.0 not in lv:
            raise ValueError("codebook must contain -1, 0 and 1 exactly")
        if np.sum((lv > -1) & (lv < 0)) != 7 or np.sum((lv > 0) & (lv < 1)) != 6:
            raise ValueError("codebook must have 7 negative and 6 positive interior levels")
        object.__setattr__(self, "levels", lv)

    @property
    def zero_index(self) -> int:
        return int(np.flatnonzero(self.levels == 0.0)[0])

    def max_gap(self) -> float:
        return float(np.max(np.diff(self.levels)))


def _half_normal_levels(count: int, side: float) -> list[float]:
    # ``count`` quantiles of N(0, 1) evenly spaced in probability over one half
    # of the line, normalized so the outermost one sits at exactly +-1.
    nd = NormalDist()
    probs = [0.5 + side * 0.5 * (count - i - 0.5) / count for i in range(count)]
    q = [nd.inv_cdf(p) for p in probs]
    extreme = abs(q[0])
    levels = [x / extreme for x in q]
    levels[0] = side * 1.0
    return levels


def build_nf4_codebook() -> Nf4Codebook:
    """16 levels: -1, 7 negative, 0, 6 positive, 1."""
    negative = _half_normal_levels(8, -1.0)
    positive = _half_normal_levels(7, 1.0)
    return Nf4Codebook(np.array(sorted(negative + [0.0] + positive)))


NF4 = build_nf4_codebook()


# ------------------------------------------------------- block tensors


@dataclass(frozen=True)
class QuantizedTensor:
    """Packed codes plus per-block constants.

    ``scales`` is a float16 array with one entry per block, or, when the
    scales were double-quantized, a second-level 1-row ``QuantizedTensor``
    (int8 symmetric, float32 scales) that decodes to them.
    """

    codec: Codec
    rows: int
    cols: int
    block_size: int
    codes: np.ndarray
    scales: "np.ndarray | QuantizedTensor"
    zero_points: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @property
    def n_blocks(self) -> int:
        return math.ceil(self.size / self.block_size) if self.size else 0

    @property
    def mode(self) -> str | None:
        if self.codec is Codec.NF4:
            return None
        return ASYMMETRIC if self.zero_points is not None else SYMMETRIC

    @property
    def double_quantized(self) -> bool:
        return isinstance(self.scales, QuantizedTensor)

    def block_scales(self) -> np.ndarray:
        if isinstance(self.scales, QuantizedTensor):
            return dequantize(self.scales).ravel()
        return self.scales.astype(DTYPE)

    def unpacked_codes(self) -> np.ndarray:
        """Codes as unsigned storage values (level index or code + 2^(N-1))."""
        if self.codec.bits == 4:
            return kernels.unpack_nibbles(self.codes, self.size)
        return self.codes[: self.size].copy()


def _half_up(s: np.ndarray) -> np.ndarray:
    """Smallest float16 values >= ``s`` (elementwise, s > 0)."""
    h = s.astype(np.float16)
    low = h.astype(np.float64) < s
    h[low] = np.nextafter(h[low], np.float16(np.inf))
    if not np.all(np.isfinite(h)):
        raise ValueError("block range too large for a float16 scale")
    return h


def _blocked(x: np.ndarray, block_size: int) -> np.ndarray:
    """Row-major flattening reshaped to (n_blocks, block_size), zero-padded."""
    if block_size < 1:
        raise ValueError(f"block_size must be >= 1, got {block_size}")
    flat = np.asarray(x, dtype=np.float64).ravel()
    n_blocks = math.ceil(flat.size / block_size)
    padded = np.zeros(n_blocks * block_size)
    padded[: flat.size] = flat
    return padded.reshape(n_blocks, block_size)


def _offset_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    unsigned = (codes + (1 << (bits - 1))).astype(np.uint8)
    return kernels.pack_nibbles(unsigned) if bits == 4 else unsigned


def quantize_blockwise_affine(x, bits: int, mode: str, block_size: int) -> QuantizedTensor:
    x = as_matrix(x) if np.ndim(x) else as_matrix([[x]])
    codec = Codec.AFFINE_INT8 if bits == 8 else Codec.AFFINE_INT4
    q_min, q_max = code_range(bits, mode)
    blocks = _blocked(x, block_size)
    if mode == SYMMETRIC:
        raw = np.max(np.abs(blocks), axis=1) / q_max if blocks.size else np.zeros(0)
    else:
        r_min = np.minimum(blocks.min(axis=1, initial=0.0), 0.0)
        r_max = np.maximum(blocks.max(axis=1, initial=0.0), 0.0)
        raw = (r_max - r_min) / (q_max - q_min)
    raw = np.where(raw > 0, raw, 1.0)
    scales = _half_up(raw)
    s = scales.astype(np.float64)[:, None]
    if mode == SYMMETRIC:
        zero = np.zeros((blocks.shape[0], 1))
    else:
        zero = np.clip(np.rint(q_min - r_min[:, None] / s), q_min, q_max)
    codes = np.clip(np.rint(blocks / s + zero), q_min, q_max).astype(np.int32)
    codes = codes.ravel()[: x.size]
    return QuantizedTensor(
        codec=codec,
        rows=x.shape[0],
        cols=x.shape[1],
        block_size=block_size,
        codes=_offset_codes(codes, bits),
        scales=scales,
        zero_points=None if mode == SYMMETRIC else zero.ravel().astype(np.int8),
    )


def quantize_nf4(x, block_size: int) -> QuantizedTensor:
    """Absmax-scaled nearest-level NF4 codes, two per byte, low nibble first."""
    x = as_matrix(x)
    blocks = _blocked(x, block_size)
    absmax = np.max(np.abs(blocks), axis=1) if blocks.size else np.zeros(0)
    scales = _half_up(np.where(absmax > 0, absmax, 1.0))
    normalized = (blocks / scales.astype(np.float64)[:, None]).ravel()[: x.size]
    codes = kernels.nearest_level(np.ascontiguousarray(normalized), NF4.levels)
    return QuantizedTensor(
        codec=Codec.NF4,
        rows=x.shape[0],
        cols=x.shape[1],
        block_size=block_size,
        codes=kernels.pack_nibbles(codes),
        scales=scales,
    )


def _exact_top_scale(absmax: float, q_max: int) -> np.float32:
    # nudge S so that S * q_max reproduces absmax exactly in float32
    target = np.float32(absmax)
    s = np.float32(absmax / q_max)
    for _ in range(8):
        back = np.float32(s * np.float32(q_max))
        if back == target:
            break
        s = np.nextafter(s, np.float32(np.inf) if back < target else np.float32(-np.inf))
    return s


def double_quantize_scales(scales, super_block: int = DEFAULT_SUPER_BLOCK) -> QuantizedTensor:
    """8-bit symmetric quantization of block scales in groups of ``super_block``."""
    s = np.asarray(scales, dtype=np.float64).ravel()
    if super_block < 1:
        raise ValueError(f"super_block must be >= 1, got {super_block}")
    q_min, q_max = code_range(8, SYMMETRIC)
    groups = _blocked(s, super_block)
    absmax = np.max(np.abs(groups), axis=1) if groups.size else np.zeros(0)
    second = np.array(
        [_exact_top_scale(m, q_max) if m > 0 else np.float32(1.0) for m in absmax], dtype=np.float32
    )
    codes = np.clip(np.rint(groups / second.astype(np.float64)[:, None]), q_min, q_max)
    codes = codes.astype(np.int32).ravel()[: s.size]
    return QuantizedTensor(
        codec=Codec.AFFINE_INT8,
        rows=1,
        cols=s.size,
        block_size=super_block,
        codes=_offset_codes(codes, 8),
        scales=second,
    )


def with_double_quantized_scales(qt: QuantizedTensor, super_block: int = DEFAULT_SUPER_BLOCK) -> QuantizedTensor:
    if qt.double_quantized:
        return qt
    return QuantizedTensor(
        qt.codec, qt.rows, qt.cols, qt.block_size, qt.codes,
        double_quantize_scales(qt.scales, super_block), qt.zero_points,
    )


def quantize(x, codec: Codec | str, block_size: int = 64, mode: str = SYMMETRIC,
             double_quant: bool = False, super_block: int = DEFAULT_SUPER_BLOCK) -> QuantizedTensor:
    codec = Codec.from_name(codec) if isinstance(codec, str) else Codec(codec)
    if codec is Codec.NF4:
        qt = quantize_nf4(x, block_size)
    else:
        qt = quantize_blockwise_affine(x, codec.bits, mode, block_size)
    return with_double_quantized_scales(qt, super_block) if double_quant else qt


def _check(qt: QuantizedTensor) -> None:
    bits = qt.codec.bits
    expected = (qt.size + 1) // 2 if bits == 4 else qt.size
    if qt.codes.shape != (expected,):
        raise FormatError(f"expected {expected} code bytes, found {qt.codes.size}")
    n_scales = qt.scales.size if isinstance(qt.scales, QuantizedTensor) else len(qt.scales)
    if n_scales != qt.n_blocks:
        raise FormatError(f"expected {qt.n_blocks} block scales, found {n_scales}")
    if qt.zero_points is not None and len(qt.zero_points) != qt.n_blocks:
        raise FormatError(f"expected {qt.n_blocks} zero points, found {len(qt.zero_points)}")


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    """Decode to a float32 matrix, following the double-quantization chain."""
    _check(qt)
    if qt.size == 0:
        return np.zeros((qt.rows, qt.cols), dtype=DTYPE)
    u = qt.unpacked_codes()
    block_of = np.arange(qt.size) // qt.block_size
    scale = qt.block_scales().astype(np.float64)[block_of]
    if qt.codec is Codec.NF4:
        values = NF4.levels[u] * scale
    else:
        q_min, q_max = code_range(qt.codec.bits, qt.mode)
        codes = u.astype(np.int64) - (1 << (qt.codec.bits - 1))
        if codes.min() < q_min or codes.max() > q_max:
            raise FormatError(f"code outside [{q_min}, {q_max}] in {qt.mode} tensor")
        zero = 0.0 if qt.zero_points is None else qt.zero_points.astype(np.float64)[block_of]
        values = scale * (codes - zero)
    return values.astype(DTYPE).reshape(qt.rows, qt.cols)


# ---------------------------------------------------------------- files


def _constants_bytes(qt: QuantizedTensor) -> bytes:
    if isinstance(qt.scales, QuantizedTensor):
        second = qt.scales
        parts = [
            struct.pack("<Q", second.block_size),
            second.scales.astype("<f4").tobytes(),
            second.codes.tobytes(),
        ]
    else:
        parts = [qt.scales.astype("<f2").tobytes()]
    if qt.zero_points is not None:
        parts.append(qt.zero_points.astype(np.int8).tobytes())
    return b"".join(parts)


def encode_qtensor(qt: QuantizedTensor) -> bytes:
    _check(qt)
    flags = (FLAG_DOUBLE_QUANT if qt.double_quantized else 0) | (
        FLAG_ZERO_POINTS if qt.zero_points is not None else 0
    )
    header = _QHEADER.pack(QTENSOR_MAGIC, int(qt.codec), flags, qt.rows, qt.cols, qt.block_size)
    return header + qt.codes.tobytes() + _constants_bytes(qt)


def decode_qtensor(buf: bytes) -> QuantizedTensor:
    if len(buf) < 4 or buf[:4] != QTENSOR_MAGIC:
        raise FormatError("bad magic, expected PFTQ quantized tensor")
    if len(buf) < _QHEADER.size:
        raise FormatError("truncated quantized-tensor header")
    _, codec_byte, flags, rows, cols, block_size = _QHEADER.unpack_from(buf)
    try:
        codec = Codec(codec_byte)
    except ValueError:
        raise FormatError(f"unknown codec byte {codec_byte}") from None
    if block_size < 1:
        raise FormatError("block_size must be >= 1")
    size = rows * cols
    n_blocks = math.ceil(size / block_size) if size else 0
    pos = _QHEADER.size

    def take(n: int) -> bytes:
        nonlocal pos
        if len(buf) < pos + n:
            raise FormatError(f"truncated quantized tensor: need {pos + n} bytes, have {len(buf)}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    code_bytes = (size + 1) // 2 if codec.bits == 4 else size
    codes = np.frombuffer(take(code_bytes), dtype=np.uint8).copy()
    if flags & FLAG_DOUBLE_QUANT:
        (super_block,) = struct.unpack("<Q", take(8))
        if super_block < 1:
            raise FormatError("super-block size must be >= 1")
        n_groups = math.ceil(n_blocks / super_block) if n_blocks else 0
        second_scales = np.frombuffer(take(4 * n_groups), dtype="<f4").astype(np.float32)
        second_codes = np.frombuffer(take(n_blocks), dtype=np.uint8).copy()
        scales = QuantizedTensor(Codec.AFFINE_INT8, 1, n_blocks, super_block, second_codes, second_scales)
    else:
        scales = np.frombuffer(take(2 * n_blocks), dtype="<f2").astype(np.float16)
    zero_points = None
    if flags & FLAG_ZERO_POINTS:
        if codec is Codec.NF4:
            raise FormatError("NF4 tensors carry no zero points")
        zero_points = np.frombuffer(take(n_blocks), dtype=np.int8).copy()
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after quantized tensor")
    return QuantizedTensor(codec, rows, cols, block_size, codes, scales, zero_points)


def save_qtensor(path, qt: QuantizedTensor) -> None:
    Path(path).write_bytes(encode_qtensor(qt))


def load_qtensor(path) -> QuantizedTensor:
    return decode_qtensor(Path(path).read_bytes())


def storage_report(qt: QuantizedTensor) -> dict:
    """Byte counts of the serialized tensor and its ratio to dense float32."""
    codes = int(qt.codes.nbytes)
    constants = len(_constants_bytes(qt))
    total = _QHEADER.size + codes + constants
    dense = 4 * qt.size
    return {
        "codec": qt.codec.name.lower(),
        "rows": qt.rows,
        "cols": qt.cols,
        "block_size": qt.block_size,
        "double_quant": qt.double_quantized,
        "header_bytes": _QHEADER.size,
        "code_bytes": codes,
        "constant_bytes": constants,
        "total_bytes": total,
        "dense_bytes": dense,
        "compression_ratio": dense / total if total else 1.0,
    }
