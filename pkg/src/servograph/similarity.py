"""Scalar state comparison: flow-based distance, inlier counts, embeddings.

The flow-based score is the sum of the masked mean L2 reprojection error
after warping the live view into the demo view, plus a weighted masked
mean flow magnitude (default weight 0.5). It is distance-like: lower is
more similar. Inlier-count and embedding scores are similarity-like.
``normalize`` maps any raw score into (0, 1] monotonically so the planner
can treat normalized scores as pseudo-probabilities; selection behavior
depends only on the ranking, which normalization preserves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import Frame
from .correspondence import FlowField, match_keypoints, warp
from .errors import EmptyMask, NoConsensus, NoKeypoints, TooFewPoints, ZeroVector
from .pose import lift_matches_to_3d, ransac_rigid
from .simulator import SHAPE_COLORS, DEFAULT_SIM_CONFIG

DEFAULT_FLOW_WEIGHT = 0.5
NORMALIZED_FLOOR = 1e-12
DEFAULT_INLIER_CAP = 400.0


class Orientation(Enum):
    DISTANCE_LIKE = "distance"  # lower raw is better
    SIMILARITY_LIKE = "similarity"  # higher raw is better


class ScoreKind(Enum):
    FS = "fs"
    INLIER_COUNT = "inlier_count"
    EMBEDDING = "embedding"

    @property
    def orientation(self) -> Orientation:
        return Orientation.DISTANCE_LIKE if self is ScoreKind.FS else Orientation.SIMILARITY_LIKE


@dataclass(frozen=True)
class SimilarityResult:
    raw: float
    normalized: float
    kind: ScoreKind
    valid_pixel_fraction: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.normalized <= 1.0):
            raise ValueError("normalized score must lie in (0, 1]")
        if not (0.0 <= self.valid_pixel_fraction <= 1.0):
            raise ValueError("valid_pixel_fraction must lie in [0, 1]")


# ---------------------------------------------------------------------------
# flow-based scores


def reprojection_distance(demo: Frame, live: Frame, mask: np.ndarray, flow: FlowField) -> float:
    """Masked mean L2 color difference between the demo view and the live
    view warped onto the demo grid.

    The denominator counts the masked pixels that survive flow/warp
    validity, so occlusion does not spuriously shrink the distance.
    """
    mask = np.asarray(mask, dtype=bool)
    warped, warp_ok = warp(live, flow)
    sel = mask & flow.valid & warp_ok
    if not np.any(sel):
        raise EmptyMask("no masked pixel has valid flow")
    diff = warped[sel] - demo.rgb[sel].astype(np.float64)
    return float(np.mean(np.sqrt(np.einsum("ij,ij->i", diff, diff))))


def mean_flow(mask: np.ndarray, flow: FlowField) -> float:
    """Masked mean flow magnitude in pixels."""
    mask = np.asarray(mask, dtype=bool)
    sel = mask & flow.valid
    if not np.any(sel):
        raise EmptyMask("no masked pixel has valid flow")
    f = flow.flow[sel]
    return float(np.mean(np.hypot(f[:, 0], f[:, 1])))


def sim_fs(
    demo: Frame,
    live: Frame,
    mask: np.ndarray,
    flow: FlowField,
    k: float = DEFAULT_FLOW_WEIGHT,
    tau: float = 1.0,
) -> SimilarityResult:
    """Flow-based distance: reprojection distance plus k times mean flow."""
    d_rp = reprojection_distance(demo, live, mask, flow)
    d_mf = mean_flow(mask, flow)
    raw = d_rp + k * d_mf
    mask_b = np.asarray(mask, dtype=bool)
    frac = float((mask_b & flow.valid).sum() / max(1, mask_b.sum()))
    return SimilarityResult(
        raw=raw,
        normalized=normalize(raw, ScoreKind.FS, tau),
        kind=ScoreKind.FS,
        valid_pixel_fraction=frac,
    )


# ---------------------------------------------------------------------------
# keypoint-inlier score (hierarchical-localization style)


def inlier_similarity(
    demo: Frame,
    live: Frame,
    mask: np.ndarray,
    ransac_threshold_m: float = 0.005,
    ransac_iterations: int = 200,
    seed: int = 0,
    cap: float = DEFAULT_INLIER_CAP,
) -> SimilarityResult:
    """Number of RANSAC inliers among 3D-lifted keypoint matches.

    Failures (no keypoints, no consensus) fold to raw 0 so that candidate
    ranking stays total.
    """
    try:
        matches = match_keypoints(demo, live, mask)
        corrs = lift_matches_to_3d(demo, live, matches)
        report = ransac_rigid(corrs, ransac_threshold_m, ransac_iterations, seed)
        raw = float(report.inlier_count)
    except (NoKeypoints, NoConsensus, TooFewPoints, EmptyMask):
        raw = 0.0
    return SimilarityResult(
        raw=raw,
        normalized=normalize(raw, ScoreKind.INLIER_COUNT, cap),
        kind=ScoreKind.INLIER_COUNT,
    )


# ---------------------------------------------------------------------------
# embedding score (masked-feature nearest-neighbor style)


def _default_palette() -> np.ndarray:
    colors = [SHAPE_COLORS[k] for k in SHAPE_COLORS]
    colors.append(DEFAULT_SIM_CONFIG.pad_color_sorting)
    colors.append(DEFAULT_SIM_CONFIG.pad_color_place)
    return np.asarray(colors)


class ColorRegionEmbedder:
    """Deterministic toy embedder: per-color-band silhouette moments.

    For each palette color the embedding holds a unit-normalized block of
    [presence, mean x, mean y, spread x, spread y, xy correlation, area].
    Pixels far from every palette color (the textured table) contribute
    nothing, which makes the full-image embedding comparable to a masked
    one. Stands in for learned encoders; any callable (frame, mask) -> 1-D
    vector can be plugged in instead.
    """

    def __init__(self, palette: np.ndarray | None = None, color_tol: float = 0.17):
        self.palette = _default_palette() if palette is None else np.asarray(palette)
        self.color_tol = color_tol

    def __call__(self, frame: Frame, mask: np.ndarray | None = None) -> np.ndarray:
        rgb = frame.rgb.astype(np.float64)
        h, w = frame.shape
        sel_base = np.ones((h, w), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        ys, xs = np.mgrid[0:h, 0:w]
        blocks = []
        for color in self.palette:
            dist = np.linalg.norm(rgb - color[None, None, :], axis=2)
            sel = sel_base & (dist <= self.color_tol)
            n = int(sel.sum())
            if n == 0:
                blocks.append(np.zeros(7))
                continue
            mx = float(xs[sel].mean()) / w
            my = float(ys[sel].mean()) / h
            sx = float(xs[sel].std()) / w
            sy = float(ys[sel].std()) / h
            cxy = 0.0
            if n > 1 and sx > 0 and sy > 0:
                cxy = float(np.corrcoef(xs[sel], ys[sel])[0, 1])
                if not math.isfinite(cxy):
                    cxy = 0.0
            block = np.array([1.0, 2.0 * mx, 2.0 * my, sx, sy, cxy, n / (h * w)])
            blocks.append(block / np.linalg.norm(block))
        return np.concatenate(blocks)


_DEFAULT_EMBEDDER = ColorRegionEmbedder()


def embedding_similarity(
    demo: Frame,
    live: Frame,
    mask: np.ndarray,
    embedder=None,
) -> SimilarityResult:
    """Cosine similarity between the masked demo embedding and the full
    live embedding."""
    embedder = embedder or _DEFAULT_EMBEDDER
    e_demo = np.asarray(embedder(demo, mask), dtype=np.float64)
    e_live = np.asarray(embedder(live, None), dtype=np.float64)
    nd = np.linalg.norm(e_demo)
    nl = np.linalg.norm(e_live)
    if nd == 0.0 or nl == 0.0:
        raise ZeroVector("embedding with zero norm")
    raw = float(e_demo @ e_live / (nd * nl))
    return SimilarityResult(
        raw=raw,
        normalized=normalize(raw, ScoreKind.EMBEDDING, 1.0),
        kind=ScoreKind.EMBEDDING,
    )


# ---------------------------------------------------------------------------


def normalize(raw: float, kind: ScoreKind, temperature: float = 1.0) -> float:
    """Map a raw score into (0, 1], strictly monotone in the favorable
    direction.

    Distance-like kinds use exp(-raw/temperature); similarity-like kinds
    scale by the temperature acting as a cap (inlier counts) or by the
    [-1, 1] -> (0, 1] affine map (cosines). The 1e-12 floor keeps planner
    costs finite.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if kind.orientation is Orientation.DISTANCE_LIKE:
        return max(math.exp(-raw / temperature), NORMALIZED_FLOOR)
    if kind is ScoreKind.EMBEDDING:
        return min(max((raw + 1.0) / 2.0, NORMALIZED_FLOOR), 1.0)
    return min(max(raw / temperature, NORMALIZED_FLOOR), 1.0)


def worst_result(kind: ScoreKind) -> SimilarityResult:
    """Total-ranking fallback for comparisons that could not be scored."""
    raw = math.inf if kind.orientation is Orientation.DISTANCE_LIKE else 0.0
    return SimilarityResult(raw=raw, normalized=NORMALIZED_FLOOR, kind=kind, valid_pixel_fraction=0.0)
