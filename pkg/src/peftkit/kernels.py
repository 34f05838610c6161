"""Inner loops shared by the numeric modules.

Every kernel exists twice: a loop form (``*_loops``) that numba compiles,
and a vectorized numpy form (``*_numpy``). The public name binds to one of
them according to :mod:`peftkit._backend`. ``matmul``, ``nearest_level``,
the nibble packers and the DP tables agree bit-for-bit between the two
forms; the Jacobi sweep agrees to rounding.
"""

import numpy as np

from ._backend import HAVE_NUMBA, njit

# ---------------------------------------------------------------- matmul


def _matmul_loops(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m), dtype=a.dtype)
    for i in range(n):
        for p in range(k):
            aip = a[i, p]
            for j in range(m):
                out[i, j] += aip * b[p, j]
    return out


def matmul_numpy(a, b):
    # rank-1 updates in ascending p: same per-element accumulation order as the loops
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    for p in range(a.shape[1]):
        out += a[:, p : p + 1] * b[p : p + 1, :]
    return out


matmul_loops = njit(_matmul_loops)

# --------------------------------------------------------- codebook search


def _nearest_level_loops(values, levels):
    n = values.shape[0]
    codes = np.empty(n, dtype=np.uint8)
    for i in range(n):
        v = values[i]
        best = 0
        best_d = abs(v - levels[0])
        for j in range(1, levels.shape[0]):
            d = abs(v - levels[j])
            if d < best_d:
                best = j
                best_d = d
        codes[i] = best
    return codes


def nearest_level_numpy(values, levels, chunk=1 << 16):
    codes = np.empty(values.shape[0], dtype=np.uint8)
    for start in range(0, values.shape[0], chunk):
        v = values[start : start + chunk]
        # argmin keeps the first minimum, i.e. the lower index on ties
        codes[start : start + chunk] = np.argmin(np.abs(v[:, None] - levels[None, :]), axis=1)
    return codes


nearest_level_loops = njit(_nearest_level_loops)

# ----------------------------------------------------------------- nibbles


def _pack_nibbles_loops(codes):
    n = codes.shape[0]
    out = np.zeros((n + 1) // 2, dtype=np.uint8)
    for i in range(n):
        if i % 2 == 0:
            out[i // 2] = codes[i] & 0x0F
        else:
            out[i // 2] |= (codes[i] & 0x0F) << 4
    return out


def pack_nibbles_numpy(codes):
    n = codes.shape[0]
    padded = np.zeros(n + (n % 2), dtype=np.uint8)
    padded[:n] = codes & 0x0F
    return (padded[0::2] | (padded[1::2] << 4)).astype(np.uint8)


def _unpack_nibbles_loops(packed, n):
    out = np.empty(n, dtype=np.uint8)
    for i in range(n):
        byte = packed[i // 2]
        if i % 2 == 0:
            out[i] = byte & 0x0F
        else:
            out[i] = byte >> 4
    return out


def unpack_nibbles_numpy(packed, n):
    out = np.empty(2 * packed.shape[0], dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:n].copy()


pack_nibbles_loops = njit(_pack_nibbles_loops)
unpack_nibbles_loops = njit(_unpack_nibbles_loops)

# ---------------------------------------------------------- DP tables


def _edit_table_loops(ref, hyp):
    m = ref.shape[0]
    n = hyp.shape[0]
    d = np.empty((m + 1, n + 1), dtype=np.int64)
    for i in range(m + 1):
        d[i, 0] = i
    for j in range(n + 1):
        d[0, j] = j
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            sub = d[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
            dele = d[i - 1, j] + 1
            ins = d[i, j - 1] + 1
            best = sub
            if dele < best:
                best = dele
            if ins < best:
                best = ins
            d[i, j] = best
    return d


def edit_table_numpy(ref, hyp):
    m, n = ref.shape[0], hyp.shape[0]
    d = np.empty((m + 1, n + 1), dtype=np.int64)
    d[0] = np.arange(n + 1)
    cols = np.arange(1, n + 1)
    for i in range(1, m + 1):
        sub = d[i - 1, :-1] + (hyp != ref[i - 1])
        row = np.minimum(sub, d[i - 1, 1:] + 1)
        # insertion chain along the row: d[i, j] = min_k (row[k] + j - k), a prefix minimum
        best = np.minimum.accumulate(np.concatenate(([i], row)) - np.arange(n + 1))
        d[i, 0] = i
        d[i, 1:] = best[1:] + cols
    return d


def _lcs_length_loops(a, b):
    m = a.shape[0]
    n = b.shape[0]
    prev = np.zeros(n + 1, dtype=np.int64)
    cur = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            elif prev[j] >= cur[j - 1]:
                cur[j] = prev[j]
            else:
                cur[j] = cur[j - 1]
        for j in range(n + 1):
            prev[j] = cur[j]
    return prev[n]


def lcs_length_numpy(a, b):
    n = b.shape[0]
    prev = np.zeros(n + 1, dtype=np.int64)
    for i in range(a.shape[0]):
        diag = np.where(b == a[i], prev[:-1] + 1, 0)
        # cur[j] = max(diag[j], prev[j], cur[j-1]) is a running maximum
        cur = np.maximum.accumulate(np.maximum(diag, prev[1:]))
        prev = np.concatenate(([0], cur))
    return int(prev[n])


edit_table_loops = njit(_edit_table_loops)
lcs_length_loops = njit(_lcs_length_loops)

# ---------------------------------------------------------- Jacobi SVD


def _jacobi_sweep_loops(u, v, tol):
    """One cyclic sweep of one-sided Jacobi rotations, in place.

    Returns the largest normalized column coupling seen before rotation.
    """
    m, n = u.shape
    worst = 0.0
    for i in range(n - 1):
        for j in range(i + 1, n):
            alpha = 0.0
            beta = 0.0
            gamma = 0.0
            for r in range(m):
                alpha += u[r, i] * u[r, i]
                beta += u[r, j] * u[r, j]
                gamma += u[r, i] * u[r, j]
            if gamma == 0.0:
                continue
            coupling = abs(gamma) / np.sqrt(alpha * beta)
            if coupling > worst:
                worst = coupling
            if coupling <= tol:
                continue
            zeta = (beta - alpha) / (2.0 * gamma)
            sign = 1.0 if zeta >= 0.0 else -1.0
            t = sign / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for r in range(m):
                ui = u[r, i]
                uj = u[r, j]
                u[r, i] = c * ui - s * uj
                u[r, j] = s * ui + c * uj
            for r in range(v.shape[0]):
                vi = v[r, i]
                vj = v[r, j]
                v[r, i] = c * vi - s * vj
                v[r, j] = s * vi + c * vj
    return worst


def jacobi_sweep_numpy(u, v, tol):
    n = u.shape[1]
    worst = 0.0
    for i in range(n - 1):
        for j in range(i + 1, n):
            ui, uj = u[:, i], u[:, j]
            alpha = float(ui @ ui)
            beta = float(uj @ uj)
            gamma = float(ui @ uj)
            if gamma == 0.0:
                continue
            coupling = abs(gamma) / np.sqrt(alpha * beta)
            worst = max(worst, coupling)
            if coupling <= tol:
                continue
            zeta = (beta - alpha) / (2.0 * gamma)
            t = (1.0 if zeta >= 0.0 else -1.0) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            u[:, i], u[:, j] = c * ui - s * uj, s * ui + c * uj
            vi, vj = v[:, i].copy(), v[:, j].copy()
            v[:, i], v[:, j] = c * vi - s * vj, s * vi + c * vj
    return worst


jacobi_sweep_loops = njit(_jacobi_sweep_loops)

# ---------------------------------------------------------------- binding

if HAVE_NUMBA:
    matmul = matmul_loops
    nearest_level = nearest_level_loops
    pack_nibbles = pack_nibbles_loops
    unpack_nibbles = unpack_nibbles_loops
    edit_table = edit_table_loops
    lcs_length = lcs_length_loops
    jacobi_sweep = jacobi_sweep_loops
else:
    matmul = matmul_numpy
    nearest_level = nearest_level_numpy
    pack_nibbles = pack_nibbles_numpy
    unpack_nibbles = unpack_nibbles_numpy
    edit_table = edit_table_numpy
    lcs_length = lcs_length_numpy
    jacobi_sweep = jacobi_sweep_numpy
