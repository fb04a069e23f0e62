"""Scripted demonstrator: keyframed pick/insert trajectories with stage labels.

A demonstration visits waypoints through three labeled stages:

* stage 0, locate: home view, transit above the target shape, hover.
* stage 1, re-orient + grasp: rotate the gripper to the shape yaw in small
  legs, descend, close. The grasp ends the stage.
* stage 2, insert/place: lift, rotate back to the goal yaw, transit to the
  goal pad, descend, open, retreat.

Keyframes are the waypoint arrival states. Conditioning follows the object
the robot is moving relative to: the target shape through stage 1, then the
goal pad (a grasped object is rigid to the camera and carries no relative
motion signal). Keyframe actions store the relative motion to the next
keyframe plus the gripper command issued at this one; the dense per-step
action list makes the whole trajectory replayable through step().
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Action, Frame, Gripper, RigidTransform, wrap_angle
from .errors import ScriptFailure
from .rendering import render
from .simulator import (
    SimConfig,
    TaskKind,
    TaskSpec,
    WorldState,
    ee_params,
    ee_pose_from,
    evaluate_stages,
    reset,
    step,
)


@dataclass(frozen=True, eq=False)
class TrajKeyframe:
    frame: Frame
    action: Action  # delta: motion to the next keyframe; gripper: command here
    foreground_mask: np.ndarray
    foreground_object_id: int
    stage: int | None
    world: WorldState | None

    def __post_init__(self):
        m = np.ascontiguousarray(self.foreground_mask, dtype=bool)
        m.setflags(write=False)
        object.__setattr__(self, "foreground_mask", m)
        if m.shape != self.frame.shape:
            raise ValueError("mask dimensions disagree with the frame")

    def __eq__(self, other):
        if not isinstance(other, TrajKeyframe):
            return NotImplemented
        return bool(
            self.frame == other.frame
            and self.action == other.action
            and np.array_equal(self.foreground_mask, other.foreground_mask)
            and self.foreground_object_id == other.foreground_object_id
            and self.stage == other.stage
            and self.world == other.world
        )

    def __hash__(self):
        return hash((self.frame, self.foreground_object_id, self.stage))


@dataclass(frozen=True)
class ScriptedTrajectory:
    keyframes: tuple[TrajKeyframe, ...]
    dense_actions: tuple[Action, ...]
    task: TaskSpec
    seed: int
    target_id: int
    pad_id: int
    final_world: WorldState

    @property
    def stages(self) -> tuple[int, ...]:
        return tuple(kf.stage for kf in self.keyframes)


class _Driver:
    """Steps the simulator toward waypoints with clamped actions, recording
    the dense action log and rendering keyframes on demand."""

    def __init__(self, state: WorldState, cfg: SimConfig):
        self.state = state
        self.cfg = cfg
        self.dense: list[Action] = []
        self.pending: list[dict] = []  # keyframe records before delta fill-in

    def drive_to(self, x: float, y: float, z: float, yaw: float, max_steps: int = 500) -> None:
        target = np.array([x, y, z])
        for _ in range(max_steps):
            cx, cy, cz, cyaw = ee_params(self.state.ee_pose)
            dt = target - np.array([cx, cy, cz])
            dyaw = wrap_angle(yaw - cyaw)
            dist = float(np.linalg.norm(dt))
            if dist < 1e-12 and abs(dyaw) < 1e-12:
                return
            step_t = min(dist, self.cfg.max_step_translation)
            step_r = min(abs(dyaw), self.cfg.max_step_rotation)
            move = dt * (step_t / dist) if dist > 0 else np.zeros(3)
            partial = ee_pose_from(
                cx + move[0], cy + move[1], cz + move[2], cyaw + math.copysign(step_r, dyaw)
            )
            action = Action(self.state.ee_pose.inverse() @ partial, Gripper.HOLD)
            self.state = step(self.state, action, self.cfg)
            self.dense.append(action)
        raise ScriptFailure(f"waypoint ({x:.3f}, {y:.3f}, {z:.3f}, {yaw:.3f}) unreached")

    def gripper(self, command: Gripper) -> None:
        action = Action(RigidTransform.identity(), command)
        self.state = step(self.state, action, self.cfg)
        self.dense.append(action)

    def keyframe(self, stage: int, fg_id: int, gripper: Gripper = Gripper.HOLD) -> None:
        frame = render(self.state, cfg=self.cfg)
        mask = frame.mask_of(fg_id)
        self.pending.append(
            {
                "frame": frame,
                "mask": mask,
                "fg_id": fg_id,
                "stage": stage,
                "world": self.state,
                "gripper": gripper,
                "ee": self.state.ee_pose,
            }
        )

    def build_keyframes(self) -> tuple[TrajKeyframe, ...]:
        out = []
        for i, rec in enumerate(self.pending):
            if i + 1 < len(self.pending):
                delta = rec["ee"].inverse() @ self.pending[i + 1]["ee"]
            else:
                delta = RigidTransform.identity()
            out.append(
                TrajKeyframe(
                    frame=rec["frame"],
                    action=Action(delta, rec["gripper"]),
                    foreground_mask=rec["mask"],
                    foreground_object_id=rec["fg_id"],
                    stage=rec["stage"],
                    world=rec["world"],
                )
            )
        return tuple(out)


def _yaw_legs(start: float, end: float, leg: float) -> list[float]:
    """Intermediate yaws from start to end in bounded legs (end inclusive)."""
    delta = wrap_angle(end - start)
    n = max(1, math.ceil(abs(delta) / leg))
    return [wrap_angle(start + delta * (i + 1) / n) for i in range(n)]


def scripted_demo(task: TaskSpec, seed: int, cfg: SimConfig | None = None) -> ScriptedTrajectory:
    """Run the scripted policy and record the keyframed trajectory.

    Deterministic for fixed (task, seed, cfg). Raises ScriptFailure when
    the target shape is absent from the scene roster or a waypoint is
    unreachable.
    """
    cfg = cfg or SimConfig()
    try:
        state = reset(task, seed, cfg)
    except ValueError as exc:
        raise ScriptFailure(str(exc)) from exc

    drv = _Driver(state, cfg)
    target = drv.state.target
    pad = drv.state.pad
    tx, ty = target.pose.translation[:2]
    obj_yaw = wrap_angle(target.pose.yaw())
    pad_x, pad_y = pad.pose.translation[:2]
    pad_yaw = wrap_angle(pad.pose.yaw())
    # waypoint heights are EE (camera) heights; the grasp binds at the TCP
    grasp_z = target.extrusion + cfg.approach_offset + cfg.gripper_length
    place_z = pad.extrusion + target.extrusion + cfg.approach_offset + cfg.gripper_length

    # stage 0: locate the shape
    drv.keyframe(0, target.id)  # home view, the episode entry state
    drv.drive_to(tx, ty, cfg.transit_height, 0.0)
    drv.keyframe(0, target.id)
    drv.drive_to(tx, ty, cfg.hover_height, 0.0)
    drv.keyframe(0, target.id)

    # stage 1: re-orient the gripper, descend, grasp
    for leg_yaw in _yaw_legs(0.0, obj_yaw, cfg.reorient_step):
        drv.drive_to(tx, ty, cfg.hover_height, leg_yaw)
        drv.keyframe(1, target.id)
    drv.drive_to(tx, ty, grasp_z, obj_yaw)
    drv.keyframe(1, target.id, gripper=Gripper.CLOSE)
    drv.gripper(Gripper.CLOSE)
    if drv.state.grasped_object is None or drv.state.grasped_object.id != target.id:
        raise ScriptFailure("grasp missed the target shape")
    # the lift completes the grasp stage; conditioning switches to the pad
    # (the held shape is inside the gripper and carries no relative motion),
    # and ending the stage lifted means re-planning happens with the pad in
    # view
    drv.drive_to(tx, ty, cfg.transit_height, obj_yaw)
    drv.keyframe(1, pad.id)

    # stage 2: rotate back, transit to the pad, place
    for leg_yaw in _yaw_legs(obj_yaw, pad_yaw, cfg.reorient_step):
        drv.drive_to(tx, ty, cfg.transit_height, leg_yaw)
        drv.keyframe(2, pad.id)
    mid_x, mid_y = (tx + pad_x) / 2.0, (ty + pad_y) / 2.0
    drv.drive_to(mid_x, mid_y, cfg.transit_height, pad_yaw)
    drv.keyframe(2, pad.id)
    drv.drive_to(pad_x, pad_y, cfg.transit_height, pad_yaw)
    drv.keyframe(2, pad.id)
    drv.drive_to(pad_x, pad_y, place_z, pad_yaw)
    drv.keyframe(2, pad.id, gripper=Gripper.OPEN)
    drv.gripper(Gripper.OPEN)
    drv.drive_to(pad_x, pad_y, cfg.transit_height, pad_yaw)
    drv.keyframe(2, pad.id)

    outcome = evaluate_stages(drv.state)
    if not outcome.success:
        raise ScriptFailure(f"scripted run did not reach success: {outcome}")

    keyframes = drv.build_keyframes()
    for kf in keyframes:
        if not kf.foreground_mask.any():
            raise ScriptFailure(f"stage {kf.stage} keyframe lost sight of its foreground object")
    return ScriptedTrajectory(
        keyframes=keyframes,
        dense_actions=tuple(drv.dense),
        task=task,
        seed=seed,
        target_id=target.id,
        pad_id=pad.id,
        final_world=drv.state,
    )


def replay(trajectory: ScriptedTrajectory, cfg: SimConfig | None = None) -> WorldState:
    """Replay the dense action log through step() from the same reset."""
    cfg = cfg or SimConfig()
    state = reset(trajectory.task, trajectory.seed, cfg)
    for action in trajectory.dense_actions:
        state = step(state, action, cfg)
    return state
