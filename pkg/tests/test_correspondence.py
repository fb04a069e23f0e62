"""Flow backends: ground-truth oracle, block matching, keypoints, warp."""

from dataclasses import replace

import numpy as np
import pytest

from servograph.core import RigidTransform, project
from servograph.correspondence import (
    BackendConfig,
    FlowField,
    detect_corners,
    match_keypoints,
    oracle_flow,
    patch_match_flow,
    warp,
)
from servograph.errors import NoKeypoints, StateMismatch
from servograph.rendering import render
from servograph.similarity import reprojection_distance
from servograph.simulator import reset, make_task, TaskKind, ShapeKind


def moved_target(state, dx=0.0, dy=0.0, dyaw=0.0):
    t = state.target
    x, y, _ = t.pose.translation
    new_pose = RigidTransform.rot_z(t.pose.yaw() + dyaw, (x + dx, y + dy, 0.0))
    objs = tuple(replace(o, pose=new_pose) if o.id == t.id else o for o in state.objects)
    return replace(state, objects=objs)


class TestOracleFlow:
    def test_identical_scenes_zero_flow(self, world, sim_cfg):
        frame = render(world, cfg=sim_cfg)
        flow = oracle_flow(frame, frame, world, world)
        assert flow.valid.all()
        assert np.abs(flow.flow).max() == 0.0

    def test_pure_translation_analytic(self, world, sim_cfg):
        # object moved by dx along world x: masked flow ~ fx*dx/Z
        frame_demo = render(world, cfg=sim_cfg)
        dx = 0.05
        live_world = moved_target(world, dx=dx)
        frame_live = render(live_world, cfg=sim_cfg)
        flow = oracle_flow(frame_demo, frame_live, world, live_world)
        mask = frame_demo.mask_of(world.target_id) & flow.valid
        assert mask.any()
        k = frame_demo.intrinsics
        z = sim_cfg.home_height - world.target.extrusion
        expected_u = k.fx * dx / z
        assert np.allclose(flow.flow[mask][:, 0], expected_u, atol=0.5)
        assert np.allclose(flow.flow[mask][:, 1], 0.0, atol=0.5)

    def test_occlusion_invalidates(self, world, sim_cfg):
        frame_demo = render(world, cfg=sim_cfg)
        # drop the target onto the pad center: pad pixels behind it become
        # occluded in the live view
        pad = world.pad
        live_world = moved_target(
            world,
            dx=pad.pose.translation[0] - world.target.pose.translation[0],
            dy=pad.pose.translation[1] - world.target.pose.translation[1],
        )
        frame_live = render(live_world, cfg=sim_cfg)
        flow = oracle_flow(frame_demo, frame_live, world, live_world)
        pad_mask = frame_demo.mask_of(pad.id)
        frac = flow.valid[pad_mask].mean()
        assert frac < 0.95  # some pad pixels are now hidden by the shape

    def test_noise_is_seeded_and_valid_only(self, world, sim_cfg):
        frame = render(world, cfg=sim_cfg)
        a = oracle_flow(frame, frame, world, world, noise_px=1.0, seed=9)
        b = oracle_flow(frame, frame, world, world, noise_px=1.0, seed=9)
        c = oracle_flow(frame, frame, world, world, noise_px=1.0, seed=10)
        assert np.array_equal(a.flow, b.flow)
        assert not np.array_equal(a.flow, c.flow)
        assert np.abs(a.flow[a.valid]).std() > 0.3

    def test_displacement_cap(self, world, sim_cfg):
        frame_demo = render(world, cfg=sim_cfg)
        live_world = moved_target(world, dx=0.08)
        frame_live = render(live_world, cfg=sim_cfg)
        free = oracle_flow(frame_demo, frame_live, world, live_world)
        capped = oracle_flow(frame_demo, frame_live, world, live_world, max_flow_px=2.0)
        tmask = frame_demo.mask_of(world.target_id)
        assert free.valid[tmask].any()
        assert not capped.valid[tmask].any()

    def test_rotation_cap_gates_whole_object(self, world, sim_cfg):
        frame_demo = render(world, cfg=sim_cfg)
        live_world = moved_target(world, dyaw=1.0)
        frame_live = render(live_world, cfg=sim_cfg)
        capped = oracle_flow(frame_demo, frame_live, world, live_world, max_rotation_rad=0.5)
        tmask = frame_demo.mask_of(world.target_id)
        assert not capped.valid[tmask].any()
        # other objects unaffected
        pmask = frame_demo.mask_of(world.pad_id)
        assert capped.valid[pmask].any()

    def test_state_mismatch_detected(self, world, sorting_task, sim_cfg):
        frame = render(world, cfg=sim_cfg)
        other = reset(sorting_task, 4242, sim_cfg)
        with pytest.raises(StateMismatch):
            oracle_flow(frame, frame, other, other)

    def test_roi_restriction_matches_full(self, world, sim_cfg):
        frame = render(world, cfg=sim_cfg)
        live_world = moved_target(world, dx=0.02)
        live = render(live_world, cfg=sim_cfg)
        roi = frame.mask_of(world.target_id)
        full = oracle_flow(frame, live, world, live_world, noise_px=0.7, seed=3)
        part = oracle_flow(frame, live, world, live_world, noise_px=0.7, seed=3, roi=roi)
        assert np.array_equal(part.valid & roi, full.valid & roi)
        assert np.array_equal(part.flow[part.valid & roi], full.flow[part.valid & roi])
        assert not part.valid[~roi].any()

    def test_oracle_soundness_zero_reprojection(self, world, sim_cfg):
        # noiseless oracle: warping the live view reproduces the demo rgb
        # exactly wherever the bilinear footprint stays on the flat-shaded
        # object (boundary samples mix in table texture by construction)
        frame_demo = render(world, cfg=sim_cfg)
        live_world = moved_target(world, dx=0.03, dyaw=0.4)
        frame_live = render(live_world, cfg=sim_cfg)
        flow = oracle_flow(frame_demo, frame_live, world, live_world)
        mask = frame_demo.mask_of(world.target_id)
        live_id = live_world.target.id
        safe = np.zeros_like(mask)
        ys, xs = np.nonzero(mask & flow.valid)
        h, w = mask.shape
        for y, x in zip(ys, xs):
            tx, ty = x + flow.flow[y, x, 0], y + flow.flow[y, x, 1]
            x0, y0 = int(np.floor(tx)), int(np.floor(ty))
            if 0 <= x0 < w - 1 and 0 <= y0 < h - 1:
                corners = frame_live.object_ids[y0 : y0 + 2, x0 : x0 + 2]
                safe[y, x] = (corners == live_id).all()
        assert safe.sum() >= 8
        d = reprojection_distance(frame_demo, frame_live, safe, flow)
        assert d < 1e-6


class TestPatchMatch:
    def make_pair(self, shift=(0, 0)):
        rng = np.random.default_rng(12)
        demo = rng.uniform(0, 1, size=(32, 32, 3)).astype(np.float32)
        live = rng.uniform(0, 1, size=(32, 32, 3)).astype(np.float32)
        sx, sy = shift
        live[max(0, sy) : 32 + min(0, sy), max(0, sx) : 32 + min(0, sx)] = demo[
            max(0, -sy) : 32 + min(0, -sy), max(0, -sx) : 32 + min(0, -sx)
        ]
        return demo, live

    def test_self_match_zero_flow(self):
        demo, _ = self.make_pair()
        mask = np.zeros((32, 32), dtype=bool)
        mask[8:24, 8:24] = True
        flow = patch_match_flow(demo, demo, mask, patch=2, search=4)
        assert flow.valid[8:24, 8:24].all()
        assert np.abs(flow.flow).max() == 0.0

    def test_integer_shift(self):
        demo, live = self.make_pair(shift=(3, 0))
        mask = np.zeros((32, 32), dtype=bool)
        mask[10:22, 10:22] = True
        flow = patch_match_flow(demo, live, mask, patch=2, search=5)
        ok = flow.valid & mask
        assert ok.sum() > 100
        assert np.all(flow.flow[ok] == (3.0, 0.0))

    def test_untextured_region_invalid(self):
        flat = np.full((24, 24, 3), 0.4, dtype=np.float32)
        mask = np.ones((24, 24), dtype=bool)
        flow = patch_match_flow(flat, flat, mask, patch=2, search=3)
        assert not flow.valid.any()

    def test_parameter_validation(self):
        demo, live = self.make_pair()
        with pytest.raises(ValueError):
            patch_match_flow(demo, live, np.ones((32, 32), bool), patch=0, search=3)


class TestWarp:
    def test_zero_flow_identity(self, world, sim_cfg):
        frame = render(world, cfg=sim_cfg)
        field = FlowField(np.zeros((*frame.shape, 2)), np.ones(frame.shape, bool))
        out, ok = warp(frame, field)
        assert ok.all()
        assert np.allclose(out, frame.rgb, atol=1e-7)

    def test_integer_shift(self):
        rng = np.random.default_rng(5)
        img = rng.uniform(0, 1, size=(16, 16, 3))
        field = FlowField(np.tile([1.0, 0.0], (16, 16, 1)), np.ones((16, 16), bool))
        out, ok = warp(img, field)
        assert np.allclose(out[:, :-1], img[:, 1:], atol=1e-12)
        assert not ok[:, -1].any()

    def test_bilinear_oracle_random_subpixel(self):
        rng = np.random.default_rng(6)
        img = rng.uniform(0, 1, size=(12, 12, 3))
        flow_arr = rng.uniform(-2, 2, size=(12, 12, 2))
        field = FlowField(flow_arr, np.ones((12, 12), bool))
        out, ok = warp(img, field)
        ys, xs = np.nonzero(ok)
        for y, x in zip(ys, xs):
            tx = x + field.flow[y, x, 0]
            ty = y + field.flow[y, x, 1]
            x0, y0 = int(np.floor(tx)), int(np.floor(ty))
            x1, y1 = min(x0 + 1, 11), min(y0 + 1, 11)
            fx, fy = tx - x0, ty - y0
            want = (
                (1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1])
            )
            assert np.allclose(out[y, x], want, atol=1e-6)

    def test_dimension_check(self, world, sim_cfg):
        frame = render(world, cfg=sim_cfg)
        with pytest.raises(ValueError):
            warp(frame, FlowField(np.zeros((4, 4, 2)), np.ones((4, 4), bool)))


class TestKeypoints:
    def make_textured_frame(self, rng, shift=(0, 0)):
        # blobs plus fine detail: corners are distinctive and patches unique
        raw = rng.uniform(0, 1, size=(52, 52, 3))
        win = np.lib.stride_tricks.sliding_window_view(raw, (5, 5), axis=(0, 1))
        smooth = win.mean(axis=(3, 4))
        return (0.6 * smooth + 0.4 * raw[2:-2, 2:-2]).astype(np.float32)

    def test_self_match(self):
        # demo corners away from the mask border match themselves at score 1
        # (border corners can be NMS-suppressed by stronger ones just outside
        # the mask in the full-image live detection)
        rng = np.random.default_rng(21)
        img = self.make_textured_frame(rng)
        mask = np.zeros((48, 48), dtype=bool)
        mask[8:40, 8:40] = True
        m = match_keypoints(img, img, mask)
        assert len(m) >= 3
        identical = np.all(m.demo_xy == m.live_xy, axis=1)
        assert identical.mean() >= 0.8
        assert np.allclose(m.scores[identical], 1.0, atol=1e-9)
        interior = np.all((m.demo_xy >= 12) & (m.demo_xy < 36), axis=1)
        assert identical[interior].all()

    def test_integer_translation(self):
        rng = np.random.default_rng(22)
        demo = self.make_textured_frame(rng)
        live = np.zeros_like(demo)
        live[2:, 5:] = demo[:-2, :-5]  # live shifted by (+5, +2)
        mask = np.zeros((48, 48), dtype=bool)
        mask[10:36, 10:36] = True
        m = match_keypoints(demo, live, mask)
        offsets = m.live_xy - m.demo_xy
        good = np.all(np.abs(offsets - np.array([5.0, 2.0])) < 0.5, axis=1)
        assert good.mean() > 0.8

    def test_blank_images_raise(self):
        blank = np.zeros((32, 32, 3), dtype=np.float32)
        with pytest.raises(NoKeypoints):
            match_keypoints(blank, blank, np.ones((32, 32), bool))

    def test_detector_deterministic(self):
        rng = np.random.default_rng(23)
        img = self.make_textured_frame(rng)
        a = detect_corners(img)
        b = detect_corners(img)
        assert np.array_equal(a, b)
        assert len(a) <= 200


class TestBackendConfig:
    def test_oracle_requires_worlds(self, world, sim_cfg):
        frame = render(world, cfg=sim_cfg)
        cfg = BackendConfig(name="oracle")
        with pytest.raises(StateMismatch):
            cfg.flow(frame, frame, frame.mask_of(world.target_id), None, None)

    def test_patch_match_backend_selected(self, world, sim_cfg):
        frame = render(world, cfg=sim_cfg)
        cfg = BackendConfig(name="patch_match", patch=2, search=3)
        flow = cfg.flow(frame, frame, np.ones(frame.shape, bool), None, None)
        assert flow.valid.any()

    def test_unknown_backend(self, world, sim_cfg):
        frame = render(world, cfg=sim_cfg)
        with pytest.raises(ValueError):
            BackendConfig(name="nope").flow(frame, frame, np.ones(frame.shape, bool), None, None)
