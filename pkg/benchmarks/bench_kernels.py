"""Time each kernel's numba-compiled loops against its numpy fallback.

Run: python3 benchmarks/bench_kernels.py [--repeats 5] [--scale 1.0]

Both forms live in ``peftkit.kernels`` regardless of the backend flag, so
one process can time them side by side. Outputs are checked for agreement
before timing.
"""

import argparse
import time

import numpy as np

from peftkit import kernels
from peftkit._backend import HAVE_NUMBA


def best_ms(fn, args, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return 1000.0 * min(times)


def cases(scale, rng):
    n = max(8, int(96 * scale))
    a = rng.standard_normal((n, n)).astype(np.float32)
    b = rng.standard_normal((n, n)).astype(np.float32)
    values = rng.standard_normal(int(1 << 20) if scale >= 1 else int((1 << 20) * scale))
    codes = rng.integers(0, 16, size=values.size).astype(np.uint8)
    packed = kernels.pack_nibbles_numpy(codes)
    words = max(8, int(400 * scale))
    ref = rng.integers(0, 50, size=words)
    hyp = rng.integers(0, 50, size=words)
    u = rng.standard_normal((max(8, int(64 * scale)), max(4, int(32 * scale))))
    return [
        ("matmul %dx%d" % (n, n), "matmul", (a, b)),
        ("nearest_level %d" % values.size, "nearest_level", (values, np.sort(rng.standard_normal(16)))),
        ("pack_nibbles %d" % codes.size, "pack_nibbles", (codes,)),
        ("unpack_nibbles %d" % codes.size, "unpack_nibbles", (packed, codes.size)),
        ("edit_table %d" % words, "edit_table", (ref, hyp)),
        ("lcs_length %d" % words, "lcs_length", (ref, hyp)),
        ("jacobi_sweep %dx%d" % u.shape, "jacobi_sweep", (u, np.eye(u.shape[1]), 1e-12)),
    ]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--scale", type=float, default=1.0, help="shrink or grow every problem size")
    args = p.parse_args()

    if not HAVE_NUMBA:
        print("numba unavailable (or PEFTKIT_DISABLE_NUMBA set): the loop forms run as plain Python")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'loops ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for label, name, data in cases(args.scale, rng):
        loops = getattr(kernels, name + "_loops")
        vec = getattr(kernels, name + "_numpy")
        if name == "jacobi_sweep":
            # the sweep works in place; hand each call its own copy
            def loops_call(u, v, tol, f=loops):
                return f(u.copy(), v.copy(), tol)

            def vec_call(u, v, tol, f=vec):
                return f(u.copy(), v.copy(), tol)
        else:
            loops_call, vec_call = loops, vec
        expect = vec_call(*data)
        got = loops_call(*data)  # also triggers compilation
        if name != "jacobi_sweep" and not np.array_equal(np.asarray(got), np.asarray(expect)):
            raise SystemExit(f"{name}: backends disagree")
        repeats = 1 if not HAVE_NUMBA and name in ("matmul", "nearest_level", "edit_table", "lcs_length") else args.repeats
        t_loops = best_ms(loops_call, data, repeats)
        t_vec = best_ms(vec_call, data, args.repeats)
        print(f"{label:<28}{t_loops:>12.3f}{t_vec:>12.3f}{t_vec / max(t_loops, 1e-9):>9.1f}x")


if __name__ == "__main__":
    main()
