"""Software rasterizer: pinhole RGB-D + object-id rendering of a world state.

Each object is drawn as its flat-shaded top face (a planar polygon or
ellipse in 3D) over a procedurally textured table plane. Depth is obtained
from exact ray/plane intersection and z-buffered per pixel, so unprojecting
any object pixel lands back on that object's face to float precision.
Rendering is a pure function of (state, camera, intrinsics, config).
"""

from __future__ import annotations

import functools
import math

import numpy as np

from .core import CameraIntrinsics, Frame, RigidTransform
from .simulator import SHAPE_GEOMETRY, SceneObject, SimConfig, WorldState


@functools.lru_cache(maxsize=8)
def _pixel_dirs(intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-frame ray directions with unit z, one per pixel (H, W, 3)."""
    ys, xs = np.mgrid[0 : intrinsics.height, 0 : intrinsics.width]
    d = np.empty((intrinsics.height, intrinsics.width, 3))
    d[..., 0] = (xs - intrinsics.cx) / intrinsics.fx
    d[..., 1] = (ys - intrinsics.cy) / intrinsics.fy
    d[..., 2] = 1.0
    d.setflags(write=False)
    return d


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash in [0, 1) (splitmix64-style mixing).

    uint64 arithmetic wraps by design; the errstate guard silences numpy's
    overflow warning for that intended behavior.
    """
    seed_mixed = (seed * 0x165667B19E3779F9) & 0xFFFFFFFFFFFFFFFF
    with np.errstate(over="ignore"):
        h = (
            ix.astype(np.int64).view(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
            ^ iy.astype(np.int64).view(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
            ^ np.uint64(seed_mixed)
        )
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return h.astype(np.float64) / 2.0**64


def _value_noise(u: np.ndarray, v: np.ndarray, seed: int) -> np.ndarray:
    """Smooth seeded value noise in [-1, 1] over continuous coordinates."""
    i = np.floor(u)
    j = np.floor(v)
    fu = u - i
    fv = v - j
    su = fu * fu * fu * (fu * (6 * fu - 15) + 10)
    sv = fv * fv * fv * (fv * (6 * fv - 15) + 10)
    n00 = _hash01(i, j, seed)
    n10 = _hash01(i + 1, j, seed)
    n01 = _hash01(i, j + 1, seed)
    n11 = _hash01(i + 1, j + 1, seed)
    top = n00 + su * (n10 - n00)
    bot = n01 + su * (n11 - n01)
    return 2.0 * (top + sv * (bot - top)) - 1.0


def table_texture(wx: np.ndarray, wy: np.ndarray, cfg: SimConfig) -> np.ndarray:
    """Table color as a function of world (x, y): view-consistent by design."""
    n = 0.68 * _value_noise(wx * 31.0, wy * 31.0, cfg.texture_seed) + 0.32 * _value_noise(
        wx * 97.0, wy * 97.0, cfg.texture_seed + 1
    )
    base = np.asarray(cfg.table_color)
    rgb = base[None, :] * (1.0 + cfg.texture_amplitude * n[..., None])
    return np.clip(rgb, 0.0, 1.0)


def _face_local_inside(obj: SceneObject, u: np.ndarray, v: np.ndarray, margin: float = 0.0) -> np.ndarray:
    g = SHAPE_GEOMETRY[obj.shape]
    s = obj.scale
    if g.radii is not None:
        a, b = g.radii[0] * s + margin, g.radii[1] * s + margin
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    inside = np.ones(np.shape(u), dtype=bool)
    pts = [(px * s, py * s) for px, py in g.outline]
    for (x0, y0), (x1, y1) in zip(pts, pts[1:] + pts[:1]):
        # convex CCW outline: inside iff left of every edge
        edge_len = math.hypot(x1 - x0, y1 - y0)
        inside &= (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0) >= -margin * edge_len
    return inside


def _face_perimeter(obj: SceneObject) -> np.ndarray:
    """Perimeter samples of the top face, object-local (for bbox estimation)."""
    g = SHAPE_GEOMETRY[obj.shape]
    s = obj.scale
    if g.radii is not None:
        t = np.linspace(0.0, 2.0 * np.pi, 16, endpoint=False)
        pts = np.stack([g.radii[0] * s * np.cos(t), g.radii[1] * s * np.sin(t)], axis=1)
    else:
        pts = np.asarray(g.outline, dtype=np.float64) * s
    return np.concatenate([pts, np.full((pts.shape[0], 1), obj.extrusion)], axis=1)


def render(
    state: WorldState,
    camera: RigidTransform | None = None,
    intrinsics: CameraIntrinsics | None = None,
    cfg: SimConfig | None = None,
) -> Frame:
    """Render the scene into a Frame.

    ``camera`` defaults to the end-effector pose (eye-in-hand, identity
    hand-eye offset); ``intrinsics`` and ``cfg`` default to the simulator
    configuration.
    """
    cfg = cfg or SimConfig()
    camera = camera or state.ee_pose
    intrinsics = intrinsics or cfg.intrinsics()
    h, w = intrinsics.height, intrinsics.width

    dirs_cam = _pixel_dirs(intrinsics)
    r_wc = camera.rotation
    origin = camera.translation
    dirs = dirs_cam @ r_wc.T  # world-frame ray directions, unit camera z

    depth = np.zeros((h, w))
    rgb = np.zeros((h, w, 3))
    ids = np.zeros((h, w), dtype=np.int32)

    # table plane z = 0; ray parameter t equals camera-frame depth because
    # the direction has unit z in camera coordinates
    dz = dirs[..., 2]
    hit = dz < -1e-12
    t = np.where(hit, (0.0 - origin[2]) / np.where(hit, dz, -1.0), 0.0)
    hit &= t > cfg.near_clip
    if np.any(hit):
        wx = origin[0] + t * dirs[..., 0]
        wy = origin[1] + t * dirs[..., 1]
        depth[hit] = t[hit]
        rgb[hit] = table_texture(wx[hit], wy[hit], cfg)

    for obj in state.objects:
        if obj.grasped:
            # held objects sit inside the (unrendered) gripper fingers and
            # are hidden from the wrist camera, matching demo and live views
            continue
        _rasterize_face(obj, camera, origin, dirs, intrinsics, cfg, depth, rgb, ids)

    if cfg.brightness_scale != 1.0 or cfg.brightness_offset != 0.0:
        rgb = np.clip(rgb * cfg.brightness_scale + cfg.brightness_offset, 0.0, 1.0)

    return Frame(rgb, depth, ids, intrinsics, camera)


def _pixel_bbox(obj, camera, intrinsics, cfg, h, w):
    """Conservative pixel bbox of the face, or the full image when the
    perimeter reaches behind the near plane."""
    r_cw = camera.rotation.T
    rel = (obj.pose.apply(_face_perimeter(obj)) - camera.translation) @ r_cw.T
    z = rel[:, 2]
    if np.any(z <= cfg.near_clip):
        if np.all(z <= cfg.near_clip):
            return None
        return 0, 0, w - 1, h - 1
    px = intrinsics.fx * rel[:, 0] / z + intrinsics.cx
    py = intrinsics.fy * rel[:, 1] / z + intrinsics.cy
    margin = 2
    x0 = max(0, int(np.floor(px.min())) - margin)
    x1 = min(w - 1, int(np.ceil(px.max())) + margin)
    y0 = max(0, int(np.floor(py.min())) - margin)
    y1 = min(h - 1, int(np.ceil(py.max())) + margin)
    if x0 > x1 or y0 > y1:
        return None
    return x0, y0, x1, y1


def _rasterize_face(obj, camera, origin, dirs, intrinsics, cfg, depth, rgb, ids):
    h, w = depth.shape
    bbox = _pixel_bbox(obj, camera, intrinsics, cfg, h, w)
    if bbox is None:
        return
    x0, y0, x1, y1 = bbox

    r_o = obj.pose.rotation
    normal = r_o[:, 2]
    p0 = obj.pose.apply(np.array([0.0, 0.0, obj.extrusion]))

    d_box = dirs[y0 : y1 + 1, x0 : x1 + 1]
    denom = d_box @ normal
    num = float(normal @ (p0 - origin))
    hit = np.abs(denom) > 1e-12
    t = np.where(hit, num / np.where(hit, denom, 1.0), np.inf)
    hit &= t > cfg.near_clip
    if not np.any(hit):
        return
    pts = origin + t[..., None] * d_box
    local = (pts - p0) @ r_o  # columns of R are the face axes
    inside = hit & _face_local_inside(obj, local[..., 0], local[..., 1])
    if not np.any(inside):
        return

    d_view = depth[y0 : y1 + 1, x0 : x1 + 1]
    win = inside & ((d_view == 0.0) | (t < d_view))
    if not np.any(win):
        return
    d_view[win] = t[win]
    rgb[y0 : y1 + 1, x0 : x1 + 1][win] = np.asarray(obj.color)
    ids[y0 : y1 + 1, x0 : x1 + 1][win] = obj.id
