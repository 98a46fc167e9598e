# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops.

Every function here has a behaviourally identical twin in ``_fallback.py``;
``radflip.kernels`` picks one at import time.  Randomness never enters this
module: callers pass pre-drawn uniforms so both backends consume the same
stream and produce the same output.
"""
import numpy as np

from libc.stdint cimport int64_t, uint64_t, uint8_t
from libc.string cimport memcpy

cdef int MAX_BOX = 64


def decode_batch(const uint64_t[::1] pa, const int64_t[::1] bit,
                 const int64_t[:, ::1] layout, const int64_t[:, ::1] xors,
                 int offset_bits):
    cdef Py_ssize_t n = pa.shape[0]
    cdef Py_ssize_t nx = xors.shape[0]
    cdef Py_ssize_t i, j, k
    cdef uint64_t a, eff, m
    cdef uint64_t omask = (<uint64_t>1 << offset_bits) - 1
    out = np.empty((n, 6), dtype=np.int64)
    cdef int64_t[:, ::1] o = out
    for i in range(n):
        a = pa[i]
        eff = a
        for k in range(nx):
            m = (<uint64_t>1 << xors[k, 2]) - 1
            eff ^= ((a >> xors[k, 0]) & m) << xors[k, 1]
        for j in range(5):
            m = (<uint64_t>1 << layout[j, 1]) - 1
            o[i, j] = <int64_t>((eff >> layout[j, 0]) & m)
        o[i, 5] = <int64_t>(a & omask) * 8 + bit[i]
    return out


def encode_batch(const int64_t[:, ::1] coords, const int64_t[:, ::1] layout,
                 const int64_t[:, ::1] xors):
    cdef Py_ssize_t n = coords.shape[0]
    cdef Py_ssize_t nx = xors.shape[0]
    cdef Py_ssize_t i, j, k
    cdef uint64_t eff, a, m
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    for i in range(n):
        eff = <uint64_t>(coords[i, 5] >> 3)
        for j in range(5):
            eff |= (<uint64_t>coords[i, j]) << layout[j, 0]
        a = eff
        for k in range(nx):
            m = (<uint64_t>1 << xors[k, 2]) - 1
            a ^= ((eff >> xors[k, 0]) & m) << xors[k, 1]
        o[i] = a
    return out


def grow_clusters(const int64_t[::1] sizes, const double[:, :, ::1] u,
                  double wordline_prob, const int64_t[::1] row0,
                  const int64_t[::1] col0, int64_t n_rows, int64_t n_cols,
                  int box_rows, int box_cols):
    cdef Py_ssize_t n = sizes.shape[0]
    cdef int box = box_rows * box_cols
    if box > MAX_BOX:
        raise ValueError("cluster box larger than 64 cells")
    offs = np.full((n, box, 2), -1, dtype=np.int64)
    ok = np.ones(n, dtype=np.uint8)
    cdef int64_t[:, :, ::1] of = offs
    cdef uint8_t[::1] okv = ok
    cdef char occ[64]
    cdef int cand_wl[64]
    cdef int cand_bl[64]
    cdef Py_ssize_t i
    cdef int s, r, c, rr, cc, dr, dc, idx, nwl, nbl, pick, ncand, rlim, clim
    cdef bint near
    cdef double u1, u2
    for i in range(n):
        for idx in range(box):
            occ[idx] = 0
        occ[0] = 1
        of[i, 0, 0] = 0
        of[i, 0, 1] = 0
        rlim = box_rows
        if n_rows - row0[i] < rlim:
            rlim = <int>(n_rows - row0[i])
        clim = box_cols
        if n_cols - col0[i] < clim:
            clim = <int>(n_cols - col0[i])
        for s in range(1, sizes[i]):
            nwl = 0
            nbl = 0
            for r in range(rlim):
                for c in range(clim):
                    idx = r * box_cols + c
                    if occ[idx]:
                        continue
                    if (c > 0 and occ[idx - 1]) or (c + 1 < box_cols and occ[idx + 1]):
                        cand_wl[nwl] = idx
                        nwl += 1
                        continue
                    near = False
                    for dr in range(-1, 2, 2):
                        rr = r + dr
                        if rr < 0 or rr >= box_rows:
                            continue
                        for dc in range(-1, 2):
                            cc = c + dc
                            if 0 <= cc < box_cols and occ[rr * box_cols + cc]:
                                near = True
                    if near:
                        cand_bl[nbl] = idx
                        nbl += 1
            if nwl == 0 and nbl == 0:
                okv[i] = 0
                break
            u1 = u[i, s - 1, 0]
            u2 = u[i, s - 1, 1]
            if (u1 < wordline_prob and nwl > 0) or nbl == 0:
                ncand = nwl
                pick = <int>(u2 * ncand)
                if pick >= ncand:
                    pick = ncand - 1
                pick = cand_wl[pick]
            else:
                ncand = nbl
                pick = <int>(u2 * ncand)
                if pick >= ncand:
                    pick = ncand - 1
                pick = cand_bl[pick]
            occ[pick] = 1
            of[i, s, 0] = pick // box_cols
            of[i, s, 1] = pick % box_cols
    return offs, ok.astype(bool)


def flip_bits(uint8_t[::1] buf, const int64_t[::1] byte_idx, const int64_t[::1] bit):
    cdef Py_ssize_t i
    for i in range(byte_idx.shape[0]):
        buf[byte_idx[i]] ^= <uint8_t>(1 << bit[i])


cdef extern from *:
    int popcount64 "__builtin_popcountll"(unsigned long long) nogil


def xor_popcount(const uint8_t[::1] a, const uint8_t[::1] b):
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t words = n // 8
    cdef Py_ssize_t i
    cdef long total = 0
    cdef const uint64_t* pa = <const uint64_t*>&a[0] if n else NULL
    cdef const uint64_t* pb = <const uint64_t*>&b[0] if n else NULL
    cdef uint64_t wa, wb
    if b.shape[0] != n:
        raise ValueError("buffers differ in length")
    # unaligned-safe word loads via memcpy
    for i in range(words):
        memcpy(&wa, pa + i, 8)
        memcpy(&wb, pb + i, 8)
        total += popcount64(wa ^ wb)
    for i in range(words * 8, n):
        total += popcount64(a[i] ^ b[i])
    return total
