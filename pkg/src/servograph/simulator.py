"""Deterministic kinematic tabletop world.

The world is a table plane at z = 0 carrying flat extruded shapes plus a
thin goal pad, and a floating end-effector with an eye-in-hand camera
(camera frame == end-effector frame). There is no physics: grasping is
attachment within a radius, releasing drops the object to its planar rest
pose, and per-step motion is clamped so that servoing genuinely has to
iterate.

End-effector poses are of the form T((x, y, z)) * Rz(yaw) * R_down where
R_down = diag(1, -1, -1) points the camera straight down with image x along
world +x. ``ee_pose_from`` builds them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .core import Action, CameraIntrinsics, Gripper, RigidTransform, clamp_action_delta, wrap_angle
from .errors import PlacementFailure, WorkspaceViolation

R_DOWN = RigidTransform.from_matrix(np.diag([1.0, -1.0, -1.0]))


def ee_pose_from(x: float, y: float, z: float, yaw: float) -> RigidTransform:
    """Standard downward-looking end-effector pose used by the simulator."""
    return RigidTransform.rot_z(yaw, (x, y, z)) @ R_DOWN


def ee_params(pose: RigidTransform) -> tuple[float, float, float, float]:
    """Inverse of ee_pose_from: (x, y, z, yaw)."""
    t = pose.translation
    r = (pose @ R_DOWN.inverse()).yaw()
    return float(t[0]), float(t[1]), float(t[2]), r


def tcp_point(ee_pose: RigidTransform, cfg: "SimConfig") -> np.ndarray:
    """Tool center point: gripper_length along the camera axis (downward)."""
    return ee_pose.apply(np.array([0.0, 0.0, cfg.gripper_length]))


class ShapeKind(Enum):
    TRAPEZE = "trapeze"
    OVAL = "oval"
    CIRCLE = "circle"
    SQUARE = "square"


class TaskKind(Enum):
    SHAPE_SORTING = "shape_sorting"
    PICK_AND_PLACE = "pick_and_place"


@dataclass(frozen=True)
class ShapeGeometry:
    """Footprint in object-local xy (meters) and extrusion height."""

    outline: tuple[tuple[float, float], ...] | None  # convex CCW polygon
    radii: tuple[float, float] | None  # ellipse semi-axes
    height: float


SHAPE_GEOMETRY: dict[ShapeKind, ShapeGeometry] = {
    ShapeKind.TRAPEZE: ShapeGeometry(
        outline=((-0.036, -0.024), (0.036, -0.024), (0.021, 0.024), (-0.021, 0.024)),
        radii=None,
        height=0.03,
    ),
    ShapeKind.OVAL: ShapeGeometry(outline=None, radii=(0.036, 0.022), height=0.03),
    ShapeKind.CIRCLE: ShapeGeometry(outline=None, radii=(0.026, 0.026), height=0.03),
    ShapeKind.SQUARE: ShapeGeometry(
        outline=((-0.027, -0.027), (0.027, -0.027), (0.027, 0.027), (-0.027, 0.027)),
        radii=None,
        height=0.03,
    ),
}

SHAPE_COLORS: dict[ShapeKind, tuple[float, float, float]] = {
    ShapeKind.TRAPEZE: (0.20, 0.65, 0.30),
    ShapeKind.OVAL: (0.25, 0.35, 0.85),
    ShapeKind.CIRCLE: (0.85, 0.72, 0.20),
    ShapeKind.SQUARE: (0.60, 0.30, 0.65),
}


@dataclass(frozen=True)
class SceneObject:
    """One rigid tabletop object; ``fixed`` marks the ungraspable goal pad."""

    id: int
    shape: ShapeKind
    pose: RigidTransform  # object-to-world; origin at base-footprint center
    color: tuple[float, float, float]
    grasped: bool = False
    fixed: bool = False
    scale: float = 1.0
    height: float | None = None

    def __post_init__(self):
        if self.id < 1:
            raise ValueError("object ids start at 1")

    @property
    def extrusion(self) -> float:
        return self.height if self.height is not None else SHAPE_GEOMETRY[self.shape].height

    def grasp_point(self) -> np.ndarray:
        """Top-center of the object in world coordinates."""
        return self.pose.apply(np.array([0.0, 0.0, self.extrusion]))

    def footprint_radius(self) -> float:
        g = SHAPE_GEOMETRY[self.shape]
        if g.radii is not None:
            r = max(g.radii)
        else:
            r = max(math.hypot(px, py) for px, py in g.outline)
        return r * self.scale


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind
    target_shape: ShapeKind
    goal_pose: RigidTransform | None  # None: sampled per episode at reset
    position_tolerance: float = 0.03
    orientation_tolerance: float = 0.25

    def __post_init__(self):
        if self.position_tolerance <= 0 or self.orientation_tolerance <= 0:
            raise ValueError("tolerances must be positive")


@dataclass(frozen=True)
class StageOutcome:
    """Monotone staged result: success => orientation => grasp => position."""

    correct_position: bool
    correct_grasp: bool
    correct_orientation: bool
    success: bool

    def __post_init__(self):
        chain = (self.correct_position, self.correct_grasp, self.correct_orientation, self.success)
        for earlier, later in zip(chain, chain[1:]):
            if later and not earlier:
                raise ValueError("stage chain violated")

    @staticmethod
    def from_flags(position: bool, grasp: bool, orientation: bool, success: bool) -> "StageOutcome":
        # cascade so the monotone chain holds by construction
        orientation = orientation or success
        grasp = grasp or orientation
        position = position or grasp
        return StageOutcome(position, grasp, orientation, success)


@dataclass(frozen=True)
class Progress:
    """Sticky per-episode flags updated by step()."""

    reached_above: bool = False
    grasped_target: bool = False
    oriented_with_goal: bool = False


@dataclass(frozen=True)
class WorldState:
    objects: tuple[SceneObject, ...]
    ee_pose: RigidTransform
    gripper_open: bool
    task: TaskSpec
    seed: int
    target_id: int
    pad_id: int
    grasp_offset: RigidTransform | None = None  # ee^-1 * object at attach time
    progress: Progress = field(default_factory=Progress)

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique")
        if sum(1 for o in self.objects if o.grasped) > 1:
            raise ValueError("at most one object may be grasped")

    def object_by_id(self, oid: int) -> SceneObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)

    @property
    def target(self) -> SceneObject:
        return self.object_by_id(self.target_id)

    @property
    def pad(self) -> SceneObject:
        return self.object_by_id(self.pad_id)

    @property
    def grasped_object(self) -> SceneObject | None:
        for o in self.objects:
            if o.grasped:
                return o
        return None

    def goal_pose(self) -> RigidTransform:
        """Effective goal pose: where the pad actually is this episode."""
        return self.pad.pose


@dataclass(frozen=True)
class SimConfig:
    """Scene/task configuration; serializable to JSON for the CLI."""

    image_width: int = 64
    image_height: int = 64
    focal_px: float = 48.0
    near_clip: float = 0.0008

    workspace_x: tuple[float, float] = (-0.32, 0.32)
    workspace_y: tuple[float, float] = (-0.32, 0.32)
    workspace_z: tuple[float, float] = (0.122, 0.62)
    gripper_length: float = 0.12  # camera (EE origin) to tool center point

    placement_half_extent: float = 0.15
    pad_half_extent: float = 0.10
    clearance: float = 0.095
    pad_clearance: float = 0.125
    home_exclusion: float = 0.055
    placement_attempts: int = 1000

    home_height: float = 0.45
    hover_height: float = 0.20
    transit_height: float = 0.45
    approach_offset: float = 0.004
    grasp_radius: float = 0.025
    reorient_step: float = 0.30

    max_step_translation: float = 0.02
    max_step_rotation: float = 0.10

    table_color: tuple[float, float, float] = (0.46, 0.43, 0.40)
    texture_amplitude: float = 0.10
    texture_seed: int = 12345
    brightness_scale: float = 1.0
    brightness_offset: float = 0.0

    pad_scale: float = 2.3
    pad_height: float = 0.004
    pad_color_sorting: tuple[float, float, float] = (0.22, 0.24, 0.34)
    pad_color_place: tuple[float, float, float] = (0.80, 0.12, 0.12)
    # the sorting cube and the place surface are fixtures at distinct spots
    pad_xy_sorting: tuple[float, float] = (-0.11, 0.09)
    pad_xy_place: tuple[float, float] = (0.11, -0.09)

    scene_shapes_sorting: tuple[str, ...] = ("trapeze", "circle")
    scene_shapes_place: tuple[str, ...] = ("trapeze", "oval", "circle")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            fx=self.focal_px,
            fy=self.focal_px,
            cx=(self.image_width - 1) / 2.0,
            cy=(self.image_height - 1) / 2.0,
            width=self.image_width,
            height=self.image_height,
        )

    def scene_shapes(self, kind: TaskKind) -> tuple[ShapeKind, ...]:
        names = self.scene_shapes_sorting if kind is TaskKind.SHAPE_SORTING else self.scene_shapes_place
        return tuple(ShapeKind(n) for n in names)

    def pad_color(self, kind: TaskKind) -> tuple[float, float, float]:
        return self.pad_color_sorting if kind is TaskKind.SHAPE_SORTING else self.pad_color_place

    def to_json(self, path: str | Path) -> None:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")

    @staticmethod
    def from_json(path: str | Path) -> "SimConfig":
        d = json.loads(Path(path).read_text())
        fields = set(SimConfig.__dataclass_fields__)
        unknown = set(d) - fields
        if unknown:
            raise ValueError(f"unknown SimConfig keys: {sorted(unknown)}")
        for k, v in list(d.items()):
            if isinstance(v, list):
                d[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        return SimConfig(**d)


DEFAULT_SIM_CONFIG = SimConfig()


def make_task(
    kind: TaskKind,
    target_shape: ShapeKind,
    cfg: SimConfig = DEFAULT_SIM_CONFIG,
    goal_pose: RigidTransform | None = None,
) -> TaskSpec:
    """Task factory with the per-task fixture pose as the default goal."""
    if goal_pose is None:
        px, py = cfg.pad_xy_sorting if kind is TaskKind.SHAPE_SORTING else cfg.pad_xy_place
        goal_pose = RigidTransform.rot_z(0.0, (px, py, 0.0))
    return TaskSpec(kind=kind, target_shape=target_shape, goal_pose=goal_pose)


# ---------------------------------------------------------------------------
# episode initialization


def home_pose(cfg: SimConfig) -> RigidTransform:
    return ee_pose_from(0.0, 0.0, cfg.home_height, 0.0)


def reset(task: TaskSpec, seed: int, cfg: SimConfig = DEFAULT_SIM_CONFIG) -> WorldState:
    """Place the pad and the scene shapes uniformly at random without overlap.

    Draw order is fixed (pad first, then each shape) so equal seeds give
    bit-identical states.
    """
    rng = np.random.default_rng(seed)
    shapes = cfg.scene_shapes(task.kind)
    if task.target_shape not in shapes:
        raise ValueError(f"target shape {task.target_shape} not in scene roster {shapes}")

    # both fixtures are present in every scene (the tasks share one
    # environment); the task only decides which one is the goal
    def fixture(pad_id: int, kind: TaskKind) -> SceneObject:
        if task.kind is kind and task.goal_pose is not None:
            pose = task.goal_pose
        else:
            xy = cfg.pad_xy_sorting if kind is TaskKind.SHAPE_SORTING else cfg.pad_xy_place
            pose = RigidTransform.rot_z(0.0, (xy[0], xy[1], 0.0))
        return SceneObject(
            id=pad_id,
            shape=ShapeKind.SQUARE,
            pose=pose,
            color=cfg.pad_color(kind),
            fixed=True,
            scale=cfg.pad_scale,
            height=cfg.pad_height,
        )

    sorting_pad = fixture(1, TaskKind.SHAPE_SORTING)
    place_pad = fixture(2, TaskKind.PICK_AND_PLACE)
    objects = [sorting_pad, place_pad]
    placed_xy = [np.asarray(p.pose.translation[:2]) for p in objects]
    for i, shape in enumerate(shapes):
        for attempt in range(cfg.placement_attempts + 1):
            if attempt == cfg.placement_attempts:
                raise PlacementFailure(f"could not place {shape.value} after {attempt} attempts")
            e = cfg.placement_half_extent
            xy = rng.uniform(-e, e, size=2)
            yaw = rng.uniform(-math.pi, math.pi)
            if np.hypot(*xy) < cfg.home_exclusion:
                continue
            ok = True
            for j, other in enumerate(placed_xy):
                required = cfg.pad_clearance if j < 2 else cfg.clearance
                if np.linalg.norm(xy - other) < required:
                    ok = False
                    break
            if ok:
                break
        objects.append(
            SceneObject(
                id=i + 3,
                shape=shape,
                pose=RigidTransform.rot_z(yaw, (xy[0], xy[1], 0.0)),
                color=SHAPE_COLORS[shape],
            )
        )
        placed_xy.append(xy)

    target_id = next(o.id for o in objects if not o.fixed and o.shape is task.target_shape)
    return WorldState(
        objects=tuple(objects),
        ee_pose=home_pose(cfg),
        gripper_open=True,
        task=task,
        seed=seed,
        target_id=target_id,
        pad_id=1 if task.kind is TaskKind.SHAPE_SORTING else 2,
    )


# ---------------------------------------------------------------------------
# dynamics


def _in_workspace(pose: RigidTransform, cfg: SimConfig) -> bool:
    x, y, z = pose.translation
    return (
        cfg.workspace_x[0] <= x <= cfg.workspace_x[1]
        and cfg.workspace_y[0] <= y <= cfg.workspace_y[1]
        and cfg.workspace_z[0] <= z <= cfg.workspace_z[1]
    )


def _rest_pose(pose: RigidTransform) -> RigidTransform:
    """Planar rest: keep x, y and yaw, drop to the table."""
    x, y, _ = pose.translation
    yaw = pose.yaw()
    return RigidTransform.rot_z(yaw, (x, y, 0.0))


def step(state: WorldState, action: Action, cfg: SimConfig = DEFAULT_SIM_CONFIG) -> WorldState:
    """Apply one clamped end-effector correction plus the gripper command.

    Deterministic, no dynamics integration. Raises WorkspaceViolation when
    the clamped pose would leave the workspace box (state is unchanged in
    that case because WorldState is an immutable value).
    """
    delta = clamp_action_delta(action.delta, cfg.max_step_translation, cfg.max_step_rotation)
    new_ee = state.ee_pose @ delta
    if not _in_workspace(new_ee, cfg):
        raise WorkspaceViolation(f"pose {new_ee.translation} outside workspace")

    objects = list(state.objects)
    grasp_offset = state.grasp_offset
    gripper_open = state.gripper_open
    progress = state.progress

    # carried object follows the hand rigidly
    held = state.grasped_object
    if held is not None and grasp_offset is not None:
        idx = objects.index(held)
        objects[idx] = replace(held, pose=new_ee @ grasp_offset)

    if action.gripper is Gripper.CLOSE and gripper_open:
        gripper_open = False
        tcp = tcp_point(new_ee, cfg)
        best = None
        best_d = cfg.grasp_radius
        for o in objects:
            if o.fixed or o.grasped:
                continue
            d = float(np.linalg.norm(o.grasp_point() - tcp))
            if d <= best_d:
                best, best_d = o, d
        if best is not None:
            idx = objects.index(best)
            objects[idx] = replace(best, grasped=True)
            grasp_offset = new_ee.inverse() @ best.pose
            if best.id == state.target_id:
                progress = replace(progress, grasped_target=True)
    elif action.gripper is Gripper.OPEN and not gripper_open:
        gripper_open = True
        for i, o in enumerate(objects):
            if o.grasped:
                objects[i] = replace(o, grasped=False, pose=_rest_pose(o.pose))
        grasp_offset = None

    new_state = WorldState(
        objects=tuple(objects),
        ee_pose=new_ee,
        gripper_open=gripper_open,
        task=state.task,
        seed=state.seed,
        target_id=state.target_id,
        pad_id=state.pad_id,
        grasp_offset=grasp_offset,
        progress=progress,
    )
    return _update_progress(new_state, cfg)


def _update_progress(state: WorldState, cfg: SimConfig) -> WorldState:
    p = state.progress
    target = state.target
    ee_xy = state.ee_pose.translation[:2]
    if not p.reached_above:
        if np.linalg.norm(ee_xy - target.pose.translation[:2]) <= state.task.position_tolerance:
            p = replace(p, reached_above=True)
    if target.grasped and not p.grasped_target:
        p = replace(p, grasped_target=True)
    if target.grasped and not p.oriented_with_goal:
        dyaw = wrap_angle(target.pose.yaw() - state.goal_pose().yaw())
        if abs(dyaw) <= state.task.orientation_tolerance:
            p = replace(p, oriented_with_goal=True)
    if p is not state.progress:
        state = replace(state, progress=p)
    return state


def evaluate_stages(state: WorldState, task: TaskSpec | None = None) -> StageOutcome:
    """Staged outcome: position/grasp/orientation flags plus final success.

    Success requires the target object released within the position
    tolerance of the goal pose (and within the orientation tolerance for
    shape sorting).
    """
    task = task or state.task
    target = state.target
    goal = state.goal_pose()
    placed = (
        not target.grasped
        and np.linalg.norm(target.pose.translation[:2] - goal.translation[:2]) <= task.position_tolerance
    )
    if task.kind is TaskKind.SHAPE_SORTING:
        placed = placed and abs(wrap_angle(target.pose.yaw() - goal.yaw())) <= task.orientation_tolerance
    p = state.progress
    return StageOutcome.from_flags(p.reached_above, p.grasped_target, p.oriented_with_goal, placed)
