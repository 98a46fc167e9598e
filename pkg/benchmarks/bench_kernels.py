"""Time the compiled kernels against the numpy fallback on identical inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--n 200000]

Each row reports the best wall time of ``--repeat`` runs and checks that both
backends produced the same output.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from radflip import _fallback
from radflip.dram import SCALED, capacity, make_scheme


def best(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def cases(n, rng):
    s = make_scheme(SCALED, "S3")
    pa = rng.integers(0, capacity(SCALED), n, dtype=np.int64).astype(np.uint64)
    bit = rng.integers(0, 8, n, dtype=np.int64)
    coords = _fallback.decode_batch(pa, bit, s._layout, s._xors, SCALED.offset_bits)
    m = max(n // 100, 1)
    sizes = rng.integers(1, 9, m, dtype=np.int64)
    u = rng.random((m, 7, 2))
    rows = rng.integers(0, SCALED.rows, m, dtype=np.int64)
    cols = rng.integers(0, SCALED.column_slots, m, dtype=np.int64)
    buf = rng.integers(0, 256, 1 << 20, dtype=np.uint8)
    idx = rng.integers(0, buf.size, n, dtype=np.int64)
    other = rng.integers(0, 256, buf.size, dtype=np.uint8)
    return {
        "decode_batch": (lambda k: k.decode_batch(pa, bit, s._layout, s._xors, SCALED.offset_bits), n),
        "encode_batch": (lambda k: k.encode_batch(coords, s._layout, s._xors), n),
        "grow_clusters": (lambda k: k.grow_clusters(sizes, u, 0.6, rows, cols, SCALED.rows,
                                                    SCALED.column_slots, 8, 8), m),
        "flip_bits": (lambda k: _flip(k, buf, idx, bit), n),
        "xor_popcount": (lambda k: k.xor_popcount(buf, other), buf.size),
    }


def _flip(k, buf, idx, bit):
    b = buf.copy()
    k.flip_bits(b, idx, bit)
    return b


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    try:
        from radflip import _kernels
    except ImportError:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<14} {'items':>9} {'cython ms':>10} {'numpy ms':>10} {'speedup':>8}  equal")
    for name, (fn, items) in cases(args.n, rng).items():
        tc, oc = best(lambda: fn(_kernels), args.repeat)
        tp, op = best(lambda: fn(_fallback), args.repeat)
        print(f"{name:<14} {items:>9} {tc * 1e3:>10.2f} {tp * 1e3:>10.2f} {tp / tc:>7.1f}x  {same(oc, op)}")


if __name__ == "__main__":
    main()
