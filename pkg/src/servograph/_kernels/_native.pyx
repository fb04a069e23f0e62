# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: bilinear warp and exhaustive patch-SSD search.

Semantics match ``numpy_impl`` exactly; see that module for the contract.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND_NAME = "native"


def bilinear_warp(image, flow, valid):
    cdef cnp.ndarray[cnp.float64_t, ndim=3] img = np.ascontiguousarray(image, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] flo = np.ascontiguousarray(flow, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] vin = np.ascontiguousarray(valid, dtype=np.uint8)
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], c = img.shape[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] out = np.zeros((h, w, c), dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] ok = np.zeros((h, w), dtype=np.uint8)
    cdef Py_ssize_t x, y, k, x0, y0, x1, y1
    cdef double tx, ty, fx, fy, w00, w01, w10, w11
    for y in range(h):
        for x in range(w):
            if not vin[y, x]:
                continue
            tx = x + flo[y, x, 0]
            ty = y + flo[y, x, 1]
            if tx < 0 or tx > w - 1 or ty < 0 or ty > h - 1:
                continue
            x0 = <Py_ssize_t>tx
            y0 = <Py_ssize_t>ty
            x1 = x0 + 1 if x0 + 1 < w else w - 1
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            fx = tx - x0
            fy = ty - y0
            w00 = (1.0 - fy) * (1.0 - fx)
            w01 = (1.0 - fy) * fx
            w10 = fy * (1.0 - fx)
            w11 = fy * fx
            for k in range(c):
                out[y, x, k] = (
                    w00 * img[y0, x0, k]
                    + w01 * img[y0, x1, k]
                    + w10 * img[y1, x0, k]
                    + w11 * img[y1, x1, k]
                )
            ok[y, x] = 1
    return out, ok.astype(bool)


def patch_ssd_search(demo, live, mask, patch, search, ceiling):
    cdef cnp.ndarray[cnp.float64_t, ndim=3] d = np.ascontiguousarray(demo, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] l = np.ascontiguousarray(live, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t h = d.shape[0], w = d.shape[1], c = d.shape[2]
    cdef int p = patch, s = search
    cdef double ceil_total = ceiling * (2 * p + 1) * (2 * p + 1) * c
    cdef cnp.ndarray[cnp.float64_t, ndim=3] flow = np.zeros((h, w, 2), dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] valid = np.zeros((h, w), dtype=np.uint8)
    cdef Py_ssize_t x, y, k, px, py
    cdef int dx, dy, bdx, bdy, ties
    cdef double ssd, best, diff
    for y in range(p, h - p):
        for x in range(p, w - p):
            if not m[y, x]:
                continue
            best = -1.0
            bdx = 0
            bdy = 0
            ties = 0
            for dy in range(-s, s + 1):
                if y + dy - p < 0 or y + dy + p >= h:
                    continue
                for dx in range(-s, s + 1):
                    if x + dx - p < 0 or x + dx + p >= w:
                        continue
                    ssd = 0.0
                    for py in range(-p, p + 1):
                        for px in range(-p, p + 1):
                            for k in range(c):
                                diff = d[y + py, x + px, k] - l[y + dy + py, x + dx + px, k]
                                ssd += diff * diff
                    if best < 0.0 or ssd < best:
                        best = ssd
                        bdx = dx
                        bdy = dy
                        ties = 0
                    elif ssd == best:
                        ties = 1
            if best >= 0.0 and ties == 0 and best <= ceil_total:
                flow[y, x, 0] = bdx
                flow[y, x, 1] = bdy
                valid[y, x] = 1
    return flow, valid.astype(bool)
