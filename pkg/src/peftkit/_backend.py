"""Kernel backend selection.

Hot loops are compiled with numba when it is importable. Setting
``PEFTKIT_DISABLE_NUMBA=1`` forces the pure-numpy implementations, which
are kept arithmetically identical wherever the kernel docs say so.
"""

import os

_FALSY = {"", "0", "false", "no", "off"}


def _numba_requested() -> bool:
    return os.environ.get("PEFTKIT_DISABLE_NUMBA", "").strip().lower() in _FALSY


try:
    if not _numba_requested():
        raise ImportError("numba disabled by PEFTKIT_DISABLE_NUMBA")
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:
    _njit = None
    HAVE_NUMBA = False


def njit(fn):
    """Compile ``fn`` with numba if available, otherwise return it unchanged."""
    if _njit is None:
        return fn
    # fastmath stays off: contraction into FMA would break bit-identity with numpy
    return _njit(cache=True, nogil=True)(fn)


def backend_name() -> str:
    return "numba" if HAVE_NUMBA else "numpy"
