"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and outputs match the Cython module exactly; the test suite
runs both against each other whenever the extension is built.
"""
from __future__ import annotations

import numpy as np

MAX_BOX = 64
_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)


def decode_batch(pa, bit, layout, xors, offset_bits):
    pa = np.asarray(pa, dtype=np.uint64)
    eff = pa.copy()
    for src, dst, width in np.asarray(xors, dtype=np.int64):
        mask = np.uint64((1 << int(width)) - 1)
        eff ^= ((pa >> np.uint64(src)) & mask) << np.uint64(dst)
    out = np.empty((pa.shape[0], 6), dtype=np.int64)
    for j, (lo, width) in enumerate(np.asarray(layout, dtype=np.int64)):
        mask = np.uint64((1 << int(width)) - 1)
        out[:, j] = ((eff >> np.uint64(lo)) & mask).astype(np.int64)
    omask = np.uint64((1 << int(offset_bits)) - 1)
    out[:, 5] = (pa & omask).astype(np.int64) * 8 + np.asarray(bit, dtype=np.int64)
    return out


def encode_batch(coords, layout, xors):
    coords = np.asarray(coords, dtype=np.int64)
    eff = (coords[:, 5] >> 3).astype(np.uint64)
    for j, (lo, _width) in enumerate(np.asarray(layout, dtype=np.int64)):
        eff |= coords[:, j].astype(np.uint64) << np.uint64(lo)
    out = eff.copy()
    for src, dst, width in np.asarray(xors, dtype=np.int64):
        mask = np.uint64((1 << int(width)) - 1)
        out ^= ((eff >> np.uint64(src)) & mask) << np.uint64(dst)
    return out


def grow_clusters(sizes, u, wordline_prob, row0, col0, n_rows, n_cols, box_rows, box_cols):
    box = box_rows * box_cols
    if box > MAX_BOX:
        raise ValueError("cluster box larger than 64 cells")
    n = len(sizes)
    offs = np.full((n, box, 2), -1, dtype=np.int64)
    offs[:, 0, :] = 0
    ok = np.ones(n, dtype=bool)
    for i in range(n):
        size = int(sizes[i])
        if size <= 1:
            continue
        occ = [False] * box
        occ[0] = True
        rlim = min(box_rows, int(n_rows - row0[i]))
        clim = min(box_cols, int(n_cols - col0[i]))
        for s in range(1, size):
            cand_wl, cand_bl = [], []
            for r in range(rlim):
                for c in range(clim):
                    idx = r * box_cols + c
                    if occ[idx]:
                        continue
                    if (c > 0 and occ[idx - 1]) or (c + 1 < box_cols and occ[idx + 1]):
                        cand_wl.append(idx)
                        continue
                    near = any(
                        occ[rr * box_cols + cc]
                        for rr in (r - 1, r + 1)
                        if 0 <= rr < box_rows
                        for cc in (c - 1, c, c + 1)
                        if 0 <= cc < box_cols
                    )
                    if near:
                        cand_bl.append(idx)
            if not cand_wl and not cand_bl:
                ok[i] = False
                break
            u1, u2 = u[i, s - 1, 0], u[i, s - 1, 1]
            cands = cand_wl if (u1 < wordline_prob and cand_wl) or not cand_bl else cand_bl
            pick = cands[min(int(u2 * len(cands)), len(cands) - 1)]
            occ[pick] = True
            offs[i, s, 0] = pick // box_cols
            offs[i, s, 1] = pick % box_cols
    return offs, ok


def flip_bits(buf, byte_idx, bit):
    if not isinstance(buf, np.ndarray):
        buf = np.frombuffer(buf, dtype=np.uint8)
    byte_idx = np.asarray(byte_idx, dtype=np.int64)
    masks = (np.uint8(1) << np.asarray(bit, dtype=np.uint8)).astype(np.uint8)
    np.bitwise_xor.at(buf, byte_idx, masks)


def xor_popcount(a, b):
    x = np.bitwise_xor(np.asarray(a, dtype=np.uint8), np.asarray(b, dtype=np.uint8))
    return int(_POPCOUNT[x].sum())
