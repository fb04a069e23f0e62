"""Memory bank of demonstration parts: segmentation, persistence, loading.

A recorded trajectory is cut into parts along its stage labels:

* P1: the whole trajectory as one part.
* P2: cut after grasp completion (locate + re-orient + grasp | insert).
* P3: cuts after localization and after re-orientation/grasp.

Parts are persisted one directory each: a JSON manifest (ids, tags, stage,
actions, camera poses, intrinsics, world snapshots) plus raw little-endian
row-major binary arrays (rgb float32, depth float32, object_ids int32,
masks uint8). load(save(bank)) reproduces the bank bit-exactly; JSON floats
round-trip exactly through repr. Saves are whole-bank atomic (temp
directory, then rename).
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .core import Action, CameraIntrinsics, Frame, Gripper, RigidTransform
from .errors import CorruptArray, FormatVersionMismatch, MissingStageLabels
from .scripted import ScriptedTrajectory, TrajKeyframe
from .simulator import (
    Progress,
    SceneObject,
    ShapeKind,
    TaskKind,
    TaskSpec,
    WorldState,
)

FORMAT_VERSION = 1

# the persistent keyframe type is the recorded one
Keyframe = TrajKeyframe


class Scheme(Enum):
    P1 = "1p"
    P2 = "2p"
    P3 = "3p"

    @property
    def num_parts(self) -> int:
        return {"1p": 1, "2p": 2, "3p": 3}[self.value]


# recorded stage label -> part index under each scheme
_STAGE_MAP = {
    Scheme.P1: {0: 0, 1: 0, 2: 0},
    Scheme.P2: {0: 0, 1: 0, 2: 1},
    Scheme.P3: {0: 0, 1: 1, 2: 2},
}


@dataclass(frozen=True)
class DemoPart:
    part_id: str
    task_tag: str
    stage_index: int
    keyframes: tuple[Keyframe, ...]
    source_demo_id: str
    target_object_id: int
    target_shape: ShapeKind
    is_terminal: bool
    num_stages: int

    def __post_init__(self):
        if not self.keyframes:
            raise ValueError("parts must hold at least one keyframe")
        if self.stage_index < 0:
            raise ValueError("stage_index must be >= 0")


@dataclass(frozen=True)
class MemoryBank:
    parts: tuple[DemoPart, ...]
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        ids = [p.part_id for p in self.parts]
        if len(set(ids)) != len(ids):
            raise ValueError("part ids must be unique")

    def merged_with(self, other: "MemoryBank") -> "MemoryBank":
        return MemoryBank(self.parts + other.parts, self.format_version)

    def subset(self, part_ids) -> "MemoryBank":
        wanted = set(part_ids)
        return MemoryBank(tuple(p for p in self.parts if p.part_id in wanted), self.format_version)


def first_frame(part: DemoPart) -> Frame:
    return part.keyframes[0].frame


def last_frame(part: DemoPart) -> Frame:
    return part.keyframes[-1].frame


def first_mask(part: DemoPart) -> np.ndarray:
    return part.keyframes[0].foreground_mask


def target_mask_in_last_frame(part: DemoPart) -> np.ndarray:
    """Goal-comparison mask for the terminal keyframe: the manipulated
    shape plus the keyframe's own foreground.

    The goal image specifies both the object's end state and its context
    (which fixture it sits on), so goal-side comparisons condition on
    their union, while servoing conditions on the per-keyframe foreground
    alone.
    """
    return last_frame(part).mask_of(part.target_object_id) | part.keyframes[-1].foreground_mask


def segment(trajectory: ScriptedTrajectory, scheme: Scheme, demo_id: str) -> list[DemoPart]:
    """Cut a labeled trajectory into parts at the scheme's stage boundaries.

    Keyframes partition exactly: concatenating the parts in stage order
    reproduces the trajectory.
    """
    if any(kf.stage is None for kf in trajectory.keyframes):
        raise MissingStageLabels("trajectory carries unlabeled keyframes")
    stage_map = _STAGE_MAP[scheme]
    groups: dict[int, list[Keyframe]] = {}
    for kf in trajectory.keyframes:
        groups.setdefault(stage_map[kf.stage], []).append(kf)
    num = scheme.num_parts
    task_tag = f"{trajectory.task.kind.value}/{trajectory.task.target_shape.value}"
    parts = []
    for stage_index in sorted(groups):
        parts.append(
            DemoPart(
                part_id=f"{demo_id}/{scheme.value}/s{stage_index}",
                task_tag=task_tag,
                stage_index=stage_index,
                keyframes=tuple(groups[stage_index]),
                source_demo_id=demo_id,
                target_object_id=trajectory.target_id,
                target_shape=trajectory.task.target_shape,
                is_terminal=stage_index == num - 1,
                num_stages=num,
            )
        )
    return parts


# ---------------------------------------------------------------------------
# JSON serialization helpers (floats round-trip exactly)


def _transform_to_json(t: RigidTransform | None):
    if t is None:
        return None
    return {"quat": t.quat.tolist(), "t": t.translation.tolist()}


def _transform_from_json(d) -> RigidTransform | None:
    if d is None:
        return None
    return RigidTransform(np.array(d["quat"]), np.array(d["t"]))


def _intrinsics_to_json(k: CameraIntrinsics):
    return {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height}


def _intrinsics_from_json(d) -> CameraIntrinsics:
    return CameraIntrinsics(**d)


def _object_to_json(o: SceneObject):
    return {
        "id": o.id,
        "shape": o.shape.value,
        "pose": _transform_to_json(o.pose),
        "color": list(o.color),
        "grasped": o.grasped,
        "fixed": o.fixed,
        "scale": o.scale,
        "height": o.height,
    }


def _object_from_json(d) -> SceneObject:
    return SceneObject(
        id=d["id"],
        shape=ShapeKind(d["shape"]),
        pose=_transform_from_json(d["pose"]),
        color=tuple(d["color"]),
        grasped=d["grasped"],
        fixed=d["fixed"],
        scale=d["scale"],
        height=d["height"],
    )


def _task_to_json(t: TaskSpec):
    return {
        "kind": t.kind.value,
        "target_shape": t.target_shape.value,
        "goal_pose": _transform_to_json(t.goal_pose),
        "position_tolerance": t.position_tolerance,
        "orientation_tolerance": t.orientation_tolerance,
    }


def _task_from_json(d) -> TaskSpec:
    return TaskSpec(
        kind=TaskKind(d["kind"]),
        target_shape=ShapeKind(d["target_shape"]),
        goal_pose=_transform_from_json(d["goal_pose"]),
        position_tolerance=d["position_tolerance"],
        orientation_tolerance=d["orientation_tolerance"],
    )


def _world_to_json(w: WorldState):
    return {
        "objects": [_object_to_json(o) for o in w.objects],
        "ee_pose": _transform_to_json(w.ee_pose),
        "gripper_open": w.gripper_open,
        "task": _task_to_json(w.task),
        "seed": w.seed,
        "target_id": w.target_id,
        "pad_id": w.pad_id,
        "grasp_offset": _transform_to_json(w.grasp_offset),
        "progress": [w.progress.reached_above, w.progress.grasped_target, w.progress.oriented_with_goal],
    }


def _world_from_json(d) -> WorldState:
    return WorldState(
        objects=tuple(_object_from_json(o) for o in d["objects"]),
        ee_pose=_transform_from_json(d["ee_pose"]),
        gripper_open=d["gripper_open"],
        task=_task_from_json(d["task"]),
        seed=d["seed"],
        target_id=d["target_id"],
        pad_id=d["pad_id"],
        grasp_offset=_transform_from_json(d["grasp_offset"]),
        progress=Progress(*d["progress"]),
    )


def _action_to_json(a: Action):
    return {"delta": _transform_to_json(a.delta), "gripper": a.gripper.value}


def _action_from_json(d) -> Action:
    return Action(_transform_from_json(d["delta"]), Gripper(d["gripper"]))


# ---------------------------------------------------------------------------
# on-disk layout

_ARRAYS = (
    ("rgb", np.float32, 3),
    ("depth", np.float32, 2),
    ("object_ids", np.int32, 2),
    ("masks", np.uint8, 2),
)

_FORMAT_DOC = """# Memory bank on-disk format (version {version})

```
<root>/
  bank.json                 top-level manifest: format_version, ordered part directories
  FORMAT.md                 this file
  parts/<dir>/manifest.json part metadata and per-keyframe records
  parts/<dir>/rgb.bin       float32, K*H*W*3 values
  parts/<dir>/depth.bin     float32, K*H*W values
  parts/<dir>/object_ids.bin int32, K*H*W values
  parts/<dir>/masks.bin     uint8 (0/1), K*H*W values
```

All binary arrays are little-endian, row-major, keyframe-major; K, H and W
are recorded in each part manifest. `manifest.json` stores, per keyframe:
the action (unit quaternion wxyz + translation xyz + gripper command), the
foreground object id, the stage label, the camera pose, the intrinsics and
a full world snapshot (object poses, end-effector pose, task, seed). Poses
are float64 serialized through JSON `repr`, which round-trips exactly.
"""


def _part_dir_name(index: int, part_id: str) -> str:
    safe = "".join(c if (c.isalnum() or c in "-_.") else "_" for c in part_id)
    return f"{index:04d}__{safe}"


def save(bank: MemoryBank, root_path: str | Path) -> None:
    """Persist the bank; atomic whole-bank replace of ``root_path``."""
    root = Path(root_path)
    root.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{root.name}-", dir=root.parent))
    try:
        dirs = []
        for i, part in enumerate(bank.parts):
            d = _part_dir_name(i, part.part_id)
            dirs.append(d)
            _save_part(part, tmp / "parts" / d)
        (tmp / "bank.json").write_text(
            json.dumps({"format_version": bank.format_version, "parts": dirs}, indent=2) + "\n"
        )
        (tmp / "FORMAT.md").write_text(_FORMAT_DOC.format(version=bank.format_version))
        if root.exists():
            shutil.rmtree(root)
        os.replace(tmp, root)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp, ignore_errors=True)


def _save_part(part: DemoPart, d: Path) -> None:
    d.mkdir(parents=True, exist_ok=True)
    k = len(part.keyframes)
    h, w = part.keyframes[0].frame.shape
    manifest = {
        "part_id": part.part_id,
        "task_tag": part.task_tag,
        "stage_index": part.stage_index,
        "source_demo_id": part.source_demo_id,
        "target_object_id": part.target_object_id,
        "target_shape": part.target_shape.value,
        "is_terminal": part.is_terminal,
        "num_stages": part.num_stages,
        "num_keyframes": k,
        "height": h,
        "width": w,
        "byte_order": "little",
        "keyframes": [
            {
                "action": _action_to_json(kf.action),
                "foreground_object_id": kf.foreground_object_id,
                "stage": kf.stage,
                "camera_pose": _transform_to_json(kf.frame.camera_pose),
                "intrinsics": _intrinsics_to_json(kf.frame.intrinsics),
                "world": _world_to_json(kf.world) if kf.world is not None else None,
            }
            for kf in part.keyframes
        ],
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    rgb = np.stack([kf.frame.rgb for kf in part.keyframes])
    depth = np.stack([kf.frame.depth for kf in part.keyframes])
    ids = np.stack([kf.frame.object_ids for kf in part.keyframes])
    masks = np.stack([kf.foreground_mask.astype(np.uint8) for kf in part.keyframes])
    for (name, dtype, _), arr in zip(_ARRAYS, (rgb, depth, ids, masks)):
        (d / f"{name}.bin").write_bytes(np.ascontiguousarray(arr, dtype="<" + np.dtype(dtype).str[1:]).tobytes())


def load(root_path: str | Path) -> MemoryBank:
    root = Path(root_path)
    top = json.loads((root / "bank.json").read_text())
    if top["format_version"] != FORMAT_VERSION:
        raise FormatVersionMismatch(f"bank is v{top['format_version']}, supported v{FORMAT_VERSION}")
    parts = [_load_part(root / "parts" / d) for d in top["parts"]]
    return MemoryBank(tuple(parts), top["format_version"])


def _load_part(d: Path) -> DemoPart:
    manifest = json.loads((d / "manifest.json").read_text())
    k = manifest["num_keyframes"]
    h, w = manifest["height"], manifest["width"]
    arrays = {}
    for name, dtype, extra in _ARRAYS:
        raw = (d / f"{name}.bin").read_bytes()
        count = k * h * w * (3 if extra == 3 else 1)
        expected = count * np.dtype(dtype).itemsize
        if len(raw) != expected:
            raise CorruptArray(f"{name}.bin holds {len(raw)} bytes, manifest implies {expected}")
        shape = (k, h, w, 3) if extra == 3 else (k, h, w)
        arrays[name] = np.frombuffer(raw, dtype="<" + np.dtype(dtype).str[1:]).reshape(shape)
    keyframes = []
    for i, kfm in enumerate(manifest["keyframes"]):
        frame = Frame(
            arrays["rgb"][i],
            arrays["depth"][i],
            arrays["object_ids"][i],
            _intrinsics_from_json(kfm["intrinsics"]),
            _transform_from_json(kfm["camera_pose"]),
        )
        keyframes.append(
            Keyframe(
                frame=frame,
                action=_action_from_json(kfm["action"]),
                foreground_mask=arrays["masks"][i].astype(bool),
                foreground_object_id=kfm["foreground_object_id"],
                stage=kfm["stage"],
                world=_world_from_json(kfm["world"]) if kfm["world"] is not None else None,
            )
        )
    return DemoPart(
        part_id=manifest["part_id"],
        task_tag=manifest["task_tag"],
        stage_index=manifest["stage_index"],
        keyframes=tuple(keyframes),
        source_demo_id=manifest["source_demo_id"],
        target_object_id=manifest["target_object_id"],
        target_shape=ShapeKind(manifest["target_shape"]),
        is_terminal=manifest["is_terminal"],
        num_stages=manifest["num_stages"],
    )
