"""Correspondence backends: dense flow and sparse keypoint matches.

All dense backends share one contract: (demo frame, live frame, mask) in,
``FlowField`` out, with flow stored demo->live so that warping the live
view by the flow reproduces the demo view. Invalid pixels carry zero flow
and are excluded from every downstream sum and from correspondence
extraction.

The ground-truth oracle stands in for a neural optical-flow network. Real
flow networks only match within a limited displacement/rotation basin, so
the oracle exposes optional validity caps (``max_flow_px``,
``max_rotation_rad``) that the experiment configs enable; with the caps
left at None the oracle is exact wherever the target is visible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import Frame, RigidTransform, project_points, unproject_points
from .errors import NoKeypoints, StateMismatch
from .simulator import SceneObject, WorldState


@dataclass(frozen=True)
class FlowField:
    """Dense demo->live pixel offsets (u, v) plus a per-pixel validity mask."""

    flow: np.ndarray  # (H, W, 2) float64
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        flow = np.ascontiguousarray(self.flow, dtype=np.float64)
        valid = np.ascontiguousarray(self.valid, dtype=bool)
        if flow.shape[:2] != valid.shape or flow.shape[2:] != (2,):
            raise ValueError("flow must be HxWx2 with matching HxW validity")
        flow = flow.copy()
        flow[~valid] = 0.0
        flow.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "flow", flow)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


@dataclass(frozen=True)
class KeypointMatches:
    """Sparse matches: demo pixel, live pixel, score in [0, 1]."""

    demo_xy: np.ndarray  # (N, 2) float64
    live_xy: np.ndarray
    scores: np.ndarray  # (N,)

    def __post_init__(self):
        for name in ("demo_xy", "live_xy", "scores"):
            a = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if len(self.demo_xy) != len(self.live_xy) or len(self.demo_xy) != len(self.scores):
            raise ValueError("ragged match arrays")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    def __len__(self) -> int:
        return len(self.scores)

    @property
    def pairs(self) -> list[tuple[tuple[float, float], tuple[float, float], float]]:
        return [
            ((float(d[0]), float(d[1])), (float(l[0]), float(l[1])), float(s))
            for d, l, s in zip(self.demo_xy, self.live_xy, self.scores)
        ]


# ---------------------------------------------------------------------------
# ground-truth oracle


def _check_frame_world(frame: Frame, world: WorldState, samples: int = 8) -> None:
    world_ids = {o.id for o in world.objects}
    frame_ids = set(np.unique(frame.object_ids).tolist()) - {0}
    if not frame_ids <= world_ids:
        raise StateMismatch(f"frame has object ids {frame_ids - world_ids} unknown to the world")
    # spot-check per object: unprojected pixels must land on that object's
    # top face, inside its footprint
    from .rendering import _face_local_inside  # deferred: rendering imports core only

    for oid in sorted(frame_ids):
        oys, oxs = np.nonzero(frame.object_ids == oid)
        idx = np.linspace(0, len(oys) - 1, min(3, len(oys))).astype(int)
        ys, xs = oys[idx], oxs[idx]
        p_cam = unproject_points(frame.intrinsics, xs.astype(float), ys.astype(float), frame.depth[ys, xs])
        p_world = frame.camera_pose.apply(p_cam)
        obj = world.object_by_id(int(oid))
        p0 = obj.pose.apply(np.array([0.0, 0.0, obj.extrusion]))
        local = (p_world - p0) @ obj.pose.rotation
        if np.abs(local[:, 2]).max() > 5e-5:
            raise StateMismatch(f"object {oid} pixels are off its face plane")
        # a 1.5 mm margin absorbs the float32 depth quantization at edges
        if not _face_local_inside(obj, local[:, 0], local[:, 1], margin=1.5e-3).all():
            raise StateMismatch(f"object {oid} pixels fall outside its footprint")


def _match_objects(world_demo: WorldState, world_live: WorldState) -> dict[int, int]:
    """Demo object id -> live object id, matched by appearance signature
    (shape kind, fixed flag, color).

    Raw ids are not comparable across scenes (rosters differ between tasks),
    so identity is resolved the way appearance correspondence would: same
    shape and color. Ambiguous or missing signatures stay unmatched and
    their pixels are marked invalid.
    """
    by_sig: dict[tuple, list[SceneObject]] = {}
    for o in world_live.objects:
        by_sig.setdefault((o.shape, o.fixed, o.color), []).append(o)
    mapping = {}
    for o in world_demo.objects:
        cands = by_sig.get((o.shape, o.fixed, o.color), [])
        if len(cands) == 1:
            mapping[o.id] = cands[0].id
    return mapping


def _relative_rotation(cam: RigidTransform, obj_pose: RigidTransform) -> RigidTransform:
    return cam.inverse() @ obj_pose


def oracle_flow(
    demo: Frame,
    live: Frame,
    world_demo: WorldState,
    world_live: WorldState,
    noise_px: float = 0.0,
    seed: int = 0,
    max_flow_px: float | None = None,
    max_rotation_rad: float | None = None,
    roi: np.ndarray | None = None,
) -> FlowField:
    """Exact flow from simulator ground truth.

    Every demo pixel of object k is lifted to the object's local frame,
    re-posed by the live object pose and projected into the live camera.
    A pixel is valid iff the target lands in bounds and the live frame shows
    the same object at the (rounded) target. Background pixels go through
    the table plane the same way. Gaussian pixel noise (seeded) is added on
    top of valid flow when requested; the noise field is drawn full-frame so
    a pixel's flow does not depend on the ``roi`` restriction, which limits
    computation to a region of interest and leaves the rest invalid.
    """
    _check_frame_world(demo, world_demo)
    _check_frame_world(live, world_live)
    h, w = demo.shape
    k_d = demo.intrinsics
    k_l = live.intrinsics
    flow = np.zeros((h, w, 2))
    valid = np.zeros((h, w), dtype=bool)
    mapping = _match_objects(world_demo, world_live)

    ys, xs = np.mgrid[0:h, 0:w]
    ids = demo.object_ids
    compute = np.ones((h, w), dtype=bool) if roi is None else np.asarray(roi, dtype=bool)
    groups = [int(i) for i in np.unique(ids[compute])] if compute.any() else []
    for gid in groups:
        sel = (ids == gid) & (demo.depth > 0) & compute
        if not np.any(sel):
            continue
        if gid == 0:
            move = live.camera_pose.inverse() @ demo.camera_pose  # through the static table
            live_gid = 0
        else:
            if gid not in mapping:
                continue
            live_gid = mapping[gid]
            obj_d = world_demo.object_by_id(gid)
            obj_l = world_live.object_by_id(live_gid)
            move = live.camera_pose.inverse() @ obj_l.pose @ obj_d.pose.inverse() @ demo.camera_pose
            if max_rotation_rad is not None:
                rel_d = _relative_rotation(demo.camera_pose, obj_d.pose)
                rel_l = _relative_rotation(live.camera_pose, obj_l.pose)
                dyaw = (rel_d.inverse() @ rel_l).magnitude().rotation_angle
                if dyaw > max_rotation_rad:
                    continue
        if gid == 0 and max_rotation_rad is not None:
            dyaw = move.magnitude().rotation_angle
            if dyaw > max_rotation_rad:
                continue

        px = xs[sel].astype(np.float64)
        py = ys[sel].astype(np.float64)
        mag = move.magnitude()
        if mag.translation_norm < 1e-12 and mag.rotation_angle < 1e-12:
            # identical relative placement: exactly zero flow, no round trip
            ok = np.ones(len(px), dtype=bool)
            tx, ty = px.copy(), py.copy()
        else:
            p_cam = unproject_points(k_d, px, py, demo.depth[sel].astype(np.float64))
            p_live = move.apply(p_cam)
            ok = p_live[:, 2] > 0
            tx = np.zeros(len(ok))
            ty = np.zeros(len(ok))
            if np.any(ok):
                proj = project_points(k_l, p_live[ok])
                tx[ok] = proj[:, 0]
                ty[ok] = proj[:, 1]
        ok &= (tx >= 0) & (tx <= k_l.width - 1) & (ty >= 0) & (ty <= k_l.height - 1)
        rx = np.clip(np.floor(tx + 0.5).astype(int), 0, k_l.width - 1)
        ry = np.clip(np.floor(ty + 0.5).astype(int), 0, k_l.height - 1)
        ok &= live.object_ids[ry, rx] == live_gid
        u = tx - px
        v = ty - py
        if max_flow_px is not None:
            ok &= np.hypot(u, v) <= max_flow_px
        sel_idx = np.nonzero(sel)
        flow[sel_idx[0], sel_idx[1], 0] = np.where(ok, u, 0.0)
        flow[sel_idx[0], sel_idx[1], 1] = np.where(ok, v, 0.0)
        valid[sel] = ok

    if noise_px > 0.0:
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, noise_px, size=(h, w, 2))
        flow = np.where(valid[..., None], flow + noise, flow)
    return FlowField(flow, valid)


# ---------------------------------------------------------------------------
# classical backends


def patch_match_flow(
    demo: Frame | np.ndarray,
    live: Frame | np.ndarray,
    mask: np.ndarray,
    patch: int = 2,
    search: int = 6,
    ssd_ceiling: float = 0.02,
) -> FlowField:
    """Exhaustive SSD block matching over a (2*search+1)^2 window.

    A pixel is valid iff the best SSD is unique and its per-sample mean is
    below the ceiling; untextured regions fail the uniqueness test.
    """
    if patch < 1 or search < 1:
        raise ValueError("patch and search must be >= 1")
    demo_rgb = demo.rgb if isinstance(demo, Frame) else np.asarray(demo)
    live_rgb = live.rgb if isinstance(live, Frame) else np.asarray(live)
    flow, valid = _kernels.patch_ssd_search(
        demo_rgb.astype(np.float64),
        live_rgb.astype(np.float64),
        np.asarray(mask, dtype=bool),
        int(patch),
        int(search),
        float(ssd_ceiling),
    )
    return FlowField(flow, valid)


def warp(live: Frame | np.ndarray, flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Warp the live view onto the demo grid: out(x, y) = live(x+u, y+v).

    Bilinear sampling; returns (warped HxWx3 float64, validity mask) where
    invalid marks out-of-bounds samples or invalid input flow.
    """
    rgb = live.rgb if isinstance(live, Frame) else np.asarray(live)
    if rgb.shape[:2] != flow.shape:
        raise ValueError("live image and flow dimensions disagree")
    out, ok = _kernels.bilinear_warp(rgb.astype(np.float64), flow.flow, flow.valid)
    return out, ok


# ---------------------------------------------------------------------------
# keypoints (structure-tensor corners + normalized patch correlation)

_NMS_RADIUS = 3
_MAX_KEYPOINTS = 200
_DESC_HALF = 4


def _grayscale(rgb: np.ndarray) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float64) @ np.array([0.299, 0.587, 0.114])


def _box_filter(img: np.ndarray, r: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(img, (2 * r + 1, 2 * r + 1))
    out = np.zeros_like(img)
    out[r:-r, r:-r] = win.mean(axis=(2, 3))
    return out


def _harris_response(gray: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(gray)
    ixx = _box_filter(gx * gx, 2)
    iyy = _box_filter(gy * gy, 2)
    ixy = _box_filter(gx * gy, 2)
    det = ixx * iyy - ixy * ixy
    trace = ixx + iyy
    return det - 0.05 * trace * trace


def detect_corners(rgb: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Harris-style corner pixels (N, 2) as (x, y), strongest first.

    Non-maximum suppression over a (2*3+1)^2 neighborhood, top 200 kept,
    ties broken by (y, x) so detection is deterministic.
    """
    gray = _grayscale(rgb)
    h, w = gray.shape
    resp = _harris_response(gray)
    if mask is not None:
        resp = np.where(mask, resp, -np.inf)
    r = _NMS_RADIUS
    padded = np.full((h + 2 * r, w + 2 * r), -np.inf)
    padded[r : r + h, r : r + w] = resp
    win = np.lib.stride_tricks.sliding_window_view(padded, (2 * r + 1, 2 * r + 1))
    local_max = win.max(axis=(2, 3))
    finite = np.isfinite(resp)
    threshold = 0.0
    if np.any(finite):
        # permissive relative floor: corner responses span several orders of
        # magnitude (gradient^4), weak-but-real corners must survive
        threshold = 1e-6 * float(resp[finite].max(initial=0.0))
    keep = finite & (resp >= local_max) & (resp > max(threshold, 1e-12))
    # NMS ties (identical response in one window) resolved to the smaller (y, x)
    ys, xs = np.nonzero(keep)
    if len(ys) == 0:
        return np.empty((0, 2), dtype=np.int64)
    order = np.lexsort((xs, ys, -resp[ys, xs]))
    pts = np.stack([xs[order], ys[order]], axis=1)
    dedup = []
    taken = np.zeros((h, w), dtype=bool)
    for x, y in pts:
        y0, y1 = max(0, y - r), min(h, y + r + 1)
        x0, x1 = max(0, x - r), min(w, x + r + 1)
        if taken[y0:y1, x0:x1].any():
            continue
        taken[y, x] = True
        dedup.append((x, y))
        if len(dedup) >= _MAX_KEYPOINTS:
            break
    return np.asarray(dedup, dtype=np.int64)


def _descriptors(rgb: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean unit-norm patch descriptors; drops border keypoints."""
    h, w = rgb.shape[:2]
    r = _DESC_HALF
    keep = (pts[:, 0] >= r) & (pts[:, 0] < w - r) & (pts[:, 1] >= r) & (pts[:, 1] < h - r)
    pts = pts[keep]
    descs = np.empty((len(pts), (2 * r + 1) ** 2 * 3))
    img = np.asarray(rgb, dtype=np.float64)
    for i, (x, y) in enumerate(pts):
        patch = img[y - r : y + r + 1, x - r : x + r + 1].reshape(-1)
        patch = patch - patch.mean()
        n = np.linalg.norm(patch)
        descs[i] = patch / n if n > 1e-12 else patch
    return pts, descs


def match_keypoints(demo: Frame | np.ndarray, live: Frame | np.ndarray, mask: np.ndarray) -> KeypointMatches:
    """Corner matches between masked demo regions and the full live image.

    Mutual-nearest-neighbor filtering on normalized patch correlation;
    scores map the correlation from [-1, 1] to [0, 1]. Deterministic.
    """
    demo_rgb = demo.rgb if isinstance(demo, Frame) else np.asarray(demo)
    live_rgb = live.rgb if isinstance(live, Frame) else np.asarray(live)
    demo_pts = detect_corners(demo_rgb, np.asarray(mask, dtype=bool))
    live_pts = detect_corners(live_rgb, None)
    demo_pts, demo_desc = _descriptors(demo_rgb, demo_pts)
    live_pts, live_desc = _descriptors(live_rgb, live_pts)
    if len(demo_pts) < 3 or len(live_pts) < 3:
        raise NoKeypoints(f"{len(demo_pts)} demo / {len(live_pts)} live corners")
    corr = demo_desc @ live_desc.T
    fwd = corr.argmax(axis=1)
    bwd = corr.argmax(axis=0)
    keep = bwd[fwd] == np.arange(len(demo_pts))
    d_idx = np.nonzero(keep)[0]
    l_idx = fwd[d_idx]
    scores = (corr[d_idx, l_idx] + 1.0) / 2.0
    return KeypointMatches(
        demo_xy=demo_pts[d_idx].astype(np.float64),
        live_xy=live_pts[l_idx].astype(np.float64),
        scores=np.clip(scores, 0.0, 1.0),
    )


# ---------------------------------------------------------------------------
# backend configuration used by the servo/planner layers


@dataclass(frozen=True)
class BackendConfig:
    """Dense-flow backend selection for the experiment config file."""

    name: str = "oracle"  # oracle | patch_match
    noise_px: float = 0.0
    max_flow_px: float | None = None
    max_rotation_rad: float | None = None
    patch: int = 2
    search: int = 6
    ssd_ceiling: float = 0.02

    def flow(
        self,
        demo: Frame,
        live: Frame,
        mask: np.ndarray,
        world_demo: WorldState | None,
        world_live: WorldState | None,
        seed: int = 0,
    ) -> FlowField:
        if self.name == "oracle":
            if world_demo is None or world_live is None:
                raise StateMismatch("oracle backend needs world states for both frames")
            return oracle_flow(
                demo,
                live,
                world_demo,
                world_live,
                noise_px=self.noise_px,
                seed=seed,
                max_flow_px=self.max_flow_px,
                max_rotation_rad=self.max_rotation_rad,
                roi=mask,
            )
        if self.name == "patch_match":
            return patch_match_flow(demo, live, mask, self.patch, self.search, self.ssd_ceiling)
        raise ValueError(f"unknown flow backend {self.name!r}")
