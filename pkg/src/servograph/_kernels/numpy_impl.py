"""Pure-numpy implementations of the hot per-pixel kernels.

These mirror the compiled versions in ``_native.pyx`` and are selected at
import time when the extension is unavailable (or when forced through the
SERVOGRAPH_KERNELS environment variable). Contracts:

* ``bilinear_warp(image, flow, valid)``: sample image at (x+u, y+v) with
  bilinear interpolation; output pixel is valid iff the input flow is valid
  and the sample point lands inside the image.
* ``patch_ssd_search(demo, live, mask, patch, search, ceiling)``: for every
  masked demo pixel, exhaustively scan the (2*search+1)^2 window in the live
  image for the patch with minimal SSD over a (2*patch+1)^2 neighborhood
  (all color channels). A match is valid iff the minimum is unique and its
  per-sample mean SSD is below the ceiling. Windows must fit entirely
  inside both images.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"


def bilinear_warp(image: np.ndarray, flow: np.ndarray, valid: np.ndarray):
    image = np.asarray(image, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    h, w = image.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    tx = xs + flow[..., 0]
    ty = ys + flow[..., 1]
    ok = np.asarray(valid, dtype=bool) & (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)

    txc = np.clip(tx, 0, w - 1)
    tyc = np.clip(ty, 0, h - 1)
    x0 = np.floor(txc).astype(np.int64)
    y0 = np.floor(tyc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = txc - x0
    fy = tyc - y0

    i00 = image[y0, x0]
    i01 = image[y0, x1]
    i10 = image[y1, x0]
    i11 = image[y1, x1]
    wx0 = (1.0 - fx)[..., None]
    wx1 = fx[..., None]
    wy0 = (1.0 - fy)[..., None]
    wy1 = fy[..., None]
    out = wy0 * (wx0 * i00 + wx1 * i01) + wy1 * (wx0 * i10 + wx1 * i11)
    out[~ok] = 0.0
    return out, ok


def patch_ssd_search(
    demo: np.ndarray,
    live: np.ndarray,
    mask: np.ndarray,
    patch: int,
    search: int,
    ceiling: float,
):
    demo = np.asarray(demo, dtype=np.float64)
    live = np.asarray(live, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    h, w = demo.shape[:2]
    p, s = int(patch), int(search)
    flow = np.zeros((h, w, 2), dtype=np.float64)
    valid = np.zeros((h, w), dtype=bool)

    n_samples = (2 * p + 1) * (2 * p + 1) * demo.shape[2]
    best = np.full((h, w), np.inf)
    best_dx = np.zeros((h, w), dtype=np.int64)
    best_dy = np.zeros((h, w), dtype=np.int64)
    tie = np.zeros((h, w), dtype=bool)

    # candidate displacements scanned in the same row-major order as the
    # compiled kernel so tie handling matches
    for dy in range(-s, s + 1):
        for dx in range(-s, s + 1):
            oy0, oy1 = max(0, -dy), min(h, h - dy)
            ox0, ox1 = max(0, -dx), min(w, w - dx)
            if oy0 >= oy1 or ox0 >= ox1:
                continue
            diff = np.full((h, w), np.inf)
            d2 = demo[oy0:oy1, ox0:ox1] - live[oy0 + dy : oy1 + dy, ox0 + dx : ox1 + dx]
            diff[oy0:oy1, ox0:ox1] = np.einsum("ijk,ijk->ij", d2, d2)
            ssd = _box_sum(diff, p)
            better = ssd < best
            equal = ssd == best
            tie = (tie & ~better) | (equal & np.isfinite(ssd))
            best_dx = np.where(better, dx, best_dx)
            best_dy = np.where(better, dy, best_dy)
            best = np.where(better, ssd, best)

    interior = np.zeros((h, w), dtype=bool)
    if h > 2 * p and w > 2 * p:
        interior[p : h - p, p : w - p] = True
    ok = mask & interior & np.isfinite(best) & ~tie & (best / n_samples <= ceiling)
    flow[..., 0] = np.where(ok, best_dx, 0)
    flow[..., 1] = np.where(ok, best_dy, 0)
    valid[:] = ok
    return flow, valid


def _box_sum(img: np.ndarray, r: int) -> np.ndarray:
    """Sum over the (2r+1)^2 window; inf where the window leaves the image
    or touches an inf entry."""
    h, w = img.shape
    out = np.full((h, w), np.inf)
    if h <= 2 * r or w <= 2 * r:
        return out
    win = np.lib.stride_tricks.sliding_window_view(img, (2 * r + 1, 2 * r + 1))
    out[r : h - r, r : w - r] = win.sum(axis=(2, 3))
    return out
