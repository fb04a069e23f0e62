"""Relative SE(3) estimation from masked 3D point correspondences.

``least_squares_rigid`` is the closed-form weighted fit (centroid
subtraction, 3x3 cross-covariance, SVD with reflection correction);
``ransac_rigid`` wraps it with seeded random 3-subsets for robustness.
Both return the transform T minimizing sum_i w_i ||T(demo_i) - live_i||^2,
i.e. T maps demo-camera coordinates into the live camera frame. No scale
is estimated: depth is metric in both frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Frame, RigidTransform, unproject_points
from .correspondence import FlowField
from .errors import DegenerateConfiguration, EmptyMask, NoConsensus, TooFewPoints


@dataclass(frozen=True)
class Correspondence3D:
    demo_point: np.ndarray
    live_point: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("weights must be non-negative")
        for name in ("demo_point", "live_point"):
            p = np.asarray(getattr(self, name), dtype=np.float64).reshape(3)
            if not np.all(np.isfinite(p)):
                raise ValueError("points must be finite")
            p.setflags(write=False)
            object.__setattr__(self, name, p)


@dataclass(frozen=True)
class CorrespondenceSet:
    """Array-of-points view; cheaper than lists of Correspondence3D."""

    demo_points: np.ndarray  # (N, 3)
    live_points: np.ndarray  # (N, 3)
    weights: np.ndarray  # (N,)

    def __post_init__(self):
        d = np.ascontiguousarray(self.demo_points, dtype=np.float64)
        l = np.ascontiguousarray(self.live_points, dtype=np.float64)
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if d.shape != l.shape or d.ndim != 2 or d.shape[1] != 3 or w.shape != (d.shape[0],):
            raise ValueError("correspondence arrays must be (N,3)/(N,3)/(N,)")
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        for a in (d, l, w):
            a.setflags(write=False)
        object.__setattr__(self, "demo_points", d)
        object.__setattr__(self, "live_points", l)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.weights)

    def subset(self, idx) -> "CorrespondenceSet":
        return CorrespondenceSet(self.demo_points[idx], self.live_points[idx], self.weights[idx])

    def __iter__(self):
        for d, l, w in zip(self.demo_points, self.live_points, self.weights):
            yield Correspondence3D(d, l, float(w))


def _as_set(corrs) -> CorrespondenceSet:
    if isinstance(corrs, CorrespondenceSet):
        return corrs
    items = list(corrs)
    if not items:
        return CorrespondenceSet(np.empty((0, 3)), np.empty((0, 3)), np.empty(0))
    return CorrespondenceSet(
        np.stack([c.demo_point for c in items]),
        np.stack([c.live_point for c in items]),
        np.array([c.weight for c in items]),
    )


@dataclass(frozen=True)
class FitReport:
    transform: RigidTransform
    rms_residual: float
    inlier_count: int
    total_count: int

    def __post_init__(self):
        if not (0 <= self.inlier_count <= self.total_count):
            raise ValueError("inlier_count out of range")
        if self.rms_residual < 0:
            raise ValueError("rms_residual must be non-negative")


# ---------------------------------------------------------------------------


def correspondences_to_3d(demo: Frame, live: Frame, mask: np.ndarray, flow: FlowField) -> CorrespondenceSet:
    """Pair unprojected masked demo pixels with their flow targets in live.

    Live depth is sampled nearest-neighbor (bilinear interpolation across
    depth discontinuities would fabricate phantom points); pairs whose
    target leaves the image or lands on invalid depth are dropped.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != demo.shape or flow.shape != demo.shape:
        raise ValueError("mask/flow dimensions disagree with the demo frame")
    sel = mask & flow.valid & (demo.depth > 0)
    ys, xs = np.nonzero(sel)
    if len(ys) == 0:
        raise EmptyMask("no masked pixel with valid flow and depth")
    px = xs.astype(np.float64)
    py = ys.astype(np.float64)
    u = flow.flow[ys, xs, 0]
    v = flow.flow[ys, xs, 1]
    tx = px + u
    ty = py + v
    k_l = live.intrinsics
    ok = (tx >= 0) & (tx <= k_l.width - 1) & (ty >= 0) & (ty <= k_l.height - 1)
    rx = np.clip(np.floor(tx + 0.5).astype(int), 0, k_l.width - 1)
    ry = np.clip(np.floor(ty + 0.5).astype(int), 0, k_l.height - 1)
    live_d = live.depth[ry, rx].astype(np.float64)
    ok &= live_d > 0
    if not np.any(ok):
        raise EmptyMask("every flow target left the image or hit invalid depth")
    demo_pts = unproject_points(demo.intrinsics, px[ok], py[ok], demo.depth[ys, xs][ok].astype(np.float64))
    live_pts = unproject_points(k_l, tx[ok], ty[ok], live_d[ok])
    return CorrespondenceSet(demo_pts, live_pts, np.ones(int(ok.sum())))


def least_squares_rigid(corrs) -> FitReport:
    """Closed-form weighted rigid fit (no scale).

    Raises TooFewPoints below 3 points or non-positive total weight, and
    DegenerateConfiguration when the centered demo points are collinear
    (second singular value below 1e-9 of the first).
    """
    c = _as_set(corrs)
    n = len(c)
    if n < 3:
        raise TooFewPoints(f"{n} < 3 correspondences")
    w = c.weights
    total = float(w.sum())
    if total <= 0:
        raise TooFewPoints("total weight is zero")
    wn = w / total
    mu_d = wn @ c.demo_points
    mu_l = wn @ c.live_points
    dd = c.demo_points - mu_d
    ll = c.live_points - mu_l
    h = (dd * wn[:, None]).T @ ll
    u, s, vt = np.linalg.svd(h)
    if s[1] < 1e-9 * max(s[0], 1e-300):
        raise DegenerateConfiguration("demo points are (near-)collinear")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = mu_l - rot @ mu_d
    transform = RigidTransform.from_matrix(rot, t)
    res = transform.apply(c.demo_points) - c.live_points
    rms = float(np.sqrt((wn * np.einsum("ij,ij->i", res, res)).sum()))
    return FitReport(transform=transform, rms_residual=rms, inlier_count=n, total_count=n)


def residuals(transform: RigidTransform, corrs: CorrespondenceSet) -> np.ndarray:
    res = transform.apply(corrs.demo_points) - corrs.live_points
    return np.sqrt(np.einsum("ij,ij->i", res, res))


DEFAULT_RANSAC_THRESHOLD_M = 0.005
DEFAULT_RANSAC_ITERATIONS = 200


def _sample_triples(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    """(m, 3) index triples with distinct entries per row.

    Collisions from the batched draw are resolved by stepping forward
    modulo n, which keeps the whole sample a single vectorized, seed-
    deterministic draw.
    """
    idx = rng.integers(0, n, size=(m, 3))
    idx[:, 1] = np.where(idx[:, 1] == idx[:, 0], (idx[:, 1] + 1) % n, idx[:, 1])
    for _ in range(3):
        dup = (idx[:, 2] == idx[:, 0]) | (idx[:, 2] == idx[:, 1])
        if not dup.any():
            break
        idx[:, 2] = np.where(dup, (idx[:, 2] + 1) % n, idx[:, 2])
    return idx


def ransac_rigid(
    corrs,
    threshold_m: float = DEFAULT_RANSAC_THRESHOLD_M,
    iterations: int = DEFAULT_RANSAC_ITERATIONS,
    seed: int = 0,
) -> FitReport:
    """Robust rigid fit over seeded random 3-subsets.

    All minimal samples are drawn in one vectorized, seeded batch and their
    closed-form fits evaluated with batched SVDs, so the result is
    deterministic for a fixed seed and independent of any evaluation
    schedule. The best consensus set (most inliers, lowest mean inlier
    residual, earliest sample on ties) is refit with full weights.
    """
    c = _as_set(corrs)
    n = len(c)
    if n < 3:
        raise TooFewPoints(f"{n} < 3 correspondences")
    if threshold_m <= 0:
        raise ValueError("threshold must be positive")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    idx = _sample_triples(rng, n, iterations)
    d = c.demo_points[idx]  # (M, 3, 3)
    l = c.live_points[idx]
    mu_d = d.mean(axis=1, keepdims=True)
    mu_l = l.mean(axis=1, keepdims=True)
    h = np.einsum("mij,mik->mjk", d - mu_d, l - mu_l)
    u, s, vt = np.linalg.svd(h)
    degenerate = s[:, 1] < 1e-9 * np.maximum(s[:, 0], 1e-300)
    v = vt.transpose(0, 2, 1)
    ut = u.transpose(0, 2, 1)
    signs = np.sign(np.linalg.det(v @ ut))
    signs[signs == 0] = 1.0
    v = v.copy()
    v[:, :, 2] *= signs[:, None]
    rots = v @ ut
    ts = mu_l[:, 0, :] - np.einsum("mij,mj->mi", rots, mu_d[:, 0, :])

    proj = np.einsum("mij,nj->mni", rots, c.demo_points) + ts[:, None, :]
    res = np.linalg.norm(proj - c.live_points[None, :, :], axis=2)  # (M, N)
    inliers = res < threshold_m
    counts = inliers.sum(axis=1)
    counts[degenerate] = 0
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_in = np.where(counts > 0, (res * inliers).sum(axis=1) / np.maximum(counts, 1), np.inf)
    usable = counts >= 3
    if not usable.any():
        raise NoConsensus("no sample produced a consensus of >= 3 inliers")
    order = np.lexsort((np.arange(iterations), mean_in, -counts))
    best = order[0]
    best_inliers = inliers[best]

    try:
        refit = least_squares_rigid(c.subset(best_inliers))
    except DegenerateConfiguration as exc:
        raise NoConsensus(f"consensus set degenerate: {exc}") from exc
    r = residuals(refit.transform, c)
    inl = int((r < threshold_m).sum())
    return FitReport(
        transform=refit.transform,
        rms_residual=float(np.sqrt(np.mean(r**2))),
        inlier_count=max(inl, 3),
        total_count=n,
    )


def lift_matches_to_3d(demo: Frame, live: Frame, matches) -> CorrespondenceSet:
    """3D correspondences from keypoint matches using per-frame depth."""
    dxy = np.floor(matches.demo_xy + 0.5).astype(int)
    lxy = np.floor(matches.live_xy + 0.5).astype(int)
    dd = demo.depth[dxy[:, 1], dxy[:, 0]].astype(np.float64)
    ld = live.depth[lxy[:, 1], lxy[:, 0]].astype(np.float64)
    ok = (dd > 0) & (ld > 0)
    if not np.any(ok):
        raise EmptyMask("no matched keypoint carries valid depth on both sides")
    demo_pts = unproject_points(demo.intrinsics, matches.demo_xy[ok, 0], matches.demo_xy[ok, 1], dd[ok])
    live_pts = unproject_points(live.intrinsics, matches.live_xy[ok, 0], matches.live_xy[ok, 1], ld[ok])
    return CorrespondenceSet(demo_pts, live_pts, np.asarray(matches.scores)[ok])
