"""Low-level imitation: frame alignment, sequence tracking, episode loop.

Frame alignment estimates the relative transform between the live view and
a demonstration keyframe from masked flow correspondences and emits a
gain-scaled, clamp-respecting correction. Sequence tracking iterates the
alignment against successive keyframes, advancing once the estimated
residual transform drops below both thresholds, and replays each keyframe's
recorded gripper command on advance.

When alignment has nothing to work with (the foreground is not visible,
e.g. right after a grasp when the camera must first lift away), the tracker
falls back once per keyframe to open-loop replay of the recorded relative
motion into that keyframe, then resumes closed-loop tracking. Failures are
recorded in the trace rather than raised so episodes always complete and
can be scored stage by stage.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .bank import DemoPart, Keyframe, MemoryBank
from .core import Action, Frame, Gripper, RigidTransform, clamp_action_delta, magnitude
from .correspondence import BackendConfig
from .errors import (
    DegenerateConfiguration,
    EmptyBank,
    EmptyMask,
    NoConsensus,
    NoPath,
    TooFewPoints,
    WorkspaceViolation,
)
from .planner import CombinationMode, DemoGraph, Plan, ScoreConfig, attach_queries, build_graph, replan, shortest_path
from .pose import FitReport, correspondences_to_3d, least_squares_rigid, ransac_rigid
from .rendering import render
from .simulator import SimConfig, StageOutcome, TaskSpec, WorldState, evaluate_stages, reset, step

_ALIGN_ERRORS = (EmptyMask, TooFewPoints, NoConsensus, DegenerateConfiguration)


@dataclass(frozen=True)
class ServoConfig:
    trans_threshold: float = 0.01  # meters
    rot_threshold: float = 0.05  # radians
    max_steps_per_keyframe: int = 30
    gain: float = 0.8
    fitter: str = "plain"  # plain | ransac
    ransac_threshold_m: float = 0.005
    ransac_iterations: int = 200

    def __post_init__(self):
        if self.trans_threshold <= 0 or self.rot_threshold <= 0:
            raise ValueError("thresholds must be positive")
        if self.max_steps_per_keyframe < 1:
            raise ValueError("max_steps_per_keyframe must be >= 1")
        if not (0.0 < self.gain <= 1.0):
            raise ValueError("gain must lie in (0, 1]")
        if self.fitter not in ("plain", "ransac"):
            raise ValueError("fitter must be 'plain' or 'ransac'")


@dataclass(frozen=True)
class TraceRow:
    part_id: str
    keyframe_index: int
    attempt: int
    mode: str  # servo | converged | open_loop | gripper | failed
    est_translation: float
    est_rotation: float
    fit_rms: float
    inlier_count: int
    total_count: int
    stepped: bool
    error: str = ""


@dataclass
class EpisodeTrace:
    plans: list[Plan] = field(default_factory=list)
    executed_parts: list[str] = field(default_factory=list)
    rows: list[TraceRow] = field(default_factory=list)
    outcome: StageOutcome | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def step_count(self) -> int:
        return sum(1 for r in self.rows if r.stepped)

    def flagged_keyframes(self) -> list[tuple[str, int]]:
        return sorted({(r.part_id, r.keyframe_index) for r in self.rows if r.mode == "failed"})


def _call_seed(base_seed: int, counter: int) -> int:
    return zlib.crc32(f"{base_seed}:{counter}".encode())


def frame_align(
    live: Frame,
    live_world: WorldState | None,
    target: Keyframe,
    backend: BackendConfig,
    servo_cfg: ServoConfig,
    sim_cfg: SimConfig,
    seed: int = 0,
) -> tuple[Action, FitReport]:
    """Estimate the live-to-keyframe relative transform and act on it.

    The fit maps demo-camera points into the live camera frame; composing
    the end-effector pose with it (camera == EE) moves the camera toward
    the demo-relative view. The returned action is gain-scaled and clamped
    to the simulator step limits, gripper Hold.
    """
    mask = target.foreground_mask
    if not mask.any():
        raise EmptyMask("keyframe foreground mask is empty")
    flow = backend.flow(target.frame, live, mask, target.world, live_world, seed)
    corrs = correspondences_to_3d(target.frame, live, mask, flow)
    if servo_cfg.fitter == "ransac":
        fit = ransac_rigid(corrs, servo_cfg.ransac_threshold_m, servo_cfg.ransac_iterations, seed)
    else:
        fit = least_squares_rigid(corrs)
    delta = clamp_action_delta(
        fit.transform.scaled(servo_cfg.gain), sim_cfg.max_step_translation, sim_cfg.max_step_rotation
    )
    return Action(delta, Gripper.HOLD), fit


def _below_thresholds(fit: FitReport, servo_cfg: ServoConfig) -> bool:
    mag = magnitude(fit.transform)
    return mag.translation_norm < servo_cfg.trans_threshold and mag.rotation_angle < servo_cfg.rot_threshold


class _Tracker:
    """Mutable episode executor shared by sequence_track and run_episode."""

    def __init__(
        self,
        state: WorldState,
        backend: BackendConfig,
        servo_cfg: ServoConfig,
        sim_cfg: SimConfig,
        seed: int,
        trace: EpisodeTrace,
    ):
        self.state = state
        self.backend = backend
        self.servo_cfg = servo_cfg
        self.sim_cfg = sim_cfg
        self.seed = seed
        self.trace = trace
        self.counter = 0

    def live_frame(self) -> Frame:
        return render(self.state, cfg=self.sim_cfg)

    def _open_loop(self, part_id: str, kf_index: int, delta: RigidTransform) -> None:
        """Replay a recorded relative motion with clamped steps."""
        target = self.state.ee_pose @ delta
        mag = magnitude(delta)
        budget = (
            math.ceil(mag.translation_norm / self.sim_cfg.max_step_translation)
            + math.ceil(mag.rotation_angle / self.sim_cfg.max_step_rotation)
            + 3
        )
        for _ in range(budget):
            remaining = self.state.ee_pose.inverse() @ target
            m = magnitude(remaining)
            if m.translation_norm < 1e-9 and m.rotation_angle < 1e-9:
                return
            action = Action(
                clamp_action_delta(
                    remaining, self.sim_cfg.max_step_translation, self.sim_cfg.max_step_rotation
                ),
                Gripper.HOLD,
            )
            try:
                self.state = step(self.state, action, self.sim_cfg)
            except WorkspaceViolation as exc:
                self.trace.rows.append(
                    TraceRow(part_id, kf_index, -1, "failed", m.translation_norm, m.rotation_angle, 0.0, 0, 0, False, str(exc))
                )
                return
            self.trace.rows.append(
                TraceRow(part_id, kf_index, -1, "open_loop", m.translation_norm, m.rotation_angle, 0.0, 0, 0, True)
            )

    def track_keyframe(self, part: DemoPart, kf_index: int, reach_delta: RigidTransform | None) -> bool:
        """Servo toward one keyframe; True when converged below thresholds."""
        kf = part.keyframes[kf_index]
        cfg = self.servo_cfg
        open_loop_left = reach_delta is not None
        for attempt in range(cfg.max_steps_per_keyframe):
            self.counter += 1
            try:
                action, fit = frame_align(
                    self.live_frame(),
                    self.state,
                    kf,
                    self.backend,
                    cfg,
                    self.sim_cfg,
                    _call_seed(self.seed, self.counter),
                )
            except _ALIGN_ERRORS as exc:
                if open_loop_left:
                    open_loop_left = False
                    self._open_loop(part.part_id, kf_index, reach_delta)
                    continue
                self.trace.rows.append(
                    TraceRow(part.part_id, kf_index, attempt, "failed", 0.0, 0.0, 0.0, 0, 0, False, str(exc))
                )
                return False
            mag = magnitude(fit.transform)
            if _below_thresholds(fit, cfg):
                self.trace.rows.append(
                    TraceRow(
                        part.part_id, kf_index, attempt, "converged",
                        mag.translation_norm, mag.rotation_angle,
                        fit.rms_residual, fit.inlier_count, fit.total_count, False,
                    )
                )
                return True
            try:
                self.state = step(self.state, action, self.sim_cfg)
            except WorkspaceViolation as exc:
                self.trace.rows.append(
                    TraceRow(
                        part.part_id, kf_index, attempt, "failed",
                        mag.translation_norm, mag.rotation_angle,
                        fit.rms_residual, fit.inlier_count, fit.total_count, False, str(exc),
                    )
                )
                return False
            self.trace.rows.append(
                TraceRow(
                    part.part_id, kf_index, attempt, "servo",
                    mag.translation_norm, mag.rotation_angle,
                    fit.rms_residual, fit.inlier_count, fit.total_count, True,
                )
            )
        self.trace.rows.append(
            TraceRow(part.part_id, kf_index, cfg.max_steps_per_keyframe, "failed", 0.0, 0.0, 0.0, 0, 0, False, "step budget exhausted")
        )
        return False

    def run_part(self, part: DemoPart, entry_delta: RigidTransform | None) -> None:
        """Track every keyframe of the part; on advance, replay its gripper
        command through step(). Failures are flagged, never raised."""
        for i, kf in enumerate(part.keyframes):
            reach = entry_delta if i == 0 else part.keyframes[i - 1].action.delta
            self.track_keyframe(part, i, reach)
            if kf.action.gripper is not Gripper.HOLD:
                try:
                    self.state = step(self.state, Action(RigidTransform.identity(), kf.action.gripper), self.sim_cfg)
                    self.trace.rows.append(
                        TraceRow(part.part_id, i, -1, "gripper", 0.0, 0.0, 0.0, 0, 0, True, kf.action.gripper.value)
                    )
                except WorkspaceViolation as exc:  # cannot happen for identity deltas
                    self.trace.rows.append(
                        TraceRow(part.part_id, i, -1, "failed", 0.0, 0.0, 0.0, 0, 0, False, str(exc))
                    )


def sequence_track(
    state: WorldState,
    part: DemoPart,
    backend: BackendConfig,
    servo_cfg: ServoConfig | None = None,
    sim_cfg: SimConfig | None = None,
    seed: int = 0,
    trace: EpisodeTrace | None = None,
    entry_delta: RigidTransform | None = None,
) -> tuple[WorldState, EpisodeTrace]:
    """Track one part from the given state; returns (state, trace)."""
    trace = trace if trace is not None else EpisodeTrace()
    tr = _Tracker(state, backend, servo_cfg or ServoConfig(), sim_cfg or SimConfig(), seed, trace)
    tr.run_part(part, entry_delta)
    trace.executed_parts.append(part.part_id)
    return tr.state, trace


def run_episode(
    task: TaskSpec,
    bank: MemoryBank,
    score_cfg: ScoreConfig | None = None,
    mode: CombinationMode = CombinationMode.MULTIPLICATIVE,
    goal: Frame | None = None,
    goal_world: WorldState | None = None,
    seed: int = 0,
    servo_cfg: ServoConfig | None = None,
    sim_cfg: SimConfig | None = None,
    graph: DemoGraph | None = None,
    forced_path: tuple[str, ...] | None = None,
    max_parts: int = 8,
    servo_backend: BackendConfig | None = None,
) -> EpisodeTrace:
    """Goal-conditioned episode: plan on the graph, track the first part,
    replan from the new observation, repeat until a terminal part ran.

    Fully deterministic for fixed inputs. A prebuilt graph for the same
    bank/config may be passed to amortize edge scoring across episodes;
    ``forced_path`` bypasses planning (single-demo baselines).
    ``servo_backend`` lets the low-level tracking flow carry a tighter
    validity basin than the retrieval scoring flow (ranking whole scenes
    tolerates displacements that precise servoing cannot).
    """
    servo_cfg = servo_cfg or ServoConfig()
    sim_cfg = sim_cfg or SimConfig()
    score_cfg = score_cfg or ScoreConfig()
    trace = EpisodeTrace()
    state = reset(task, seed, sim_cfg)
    tracker = _Tracker(state, servo_backend or score_cfg.backend, servo_cfg, sim_cfg, seed, trace)
    parts_by_id = {p.part_id: p for p in bank.parts}

    if forced_path is not None:
        queue = list(forced_path)
        entry_delta: RigidTransform | None = None
        for pid in queue:
            part = parts_by_id[pid]
            tracker.run_part(part, entry_delta)
            trace.executed_parts.append(pid)
            entry_delta = part.keyframes[-1].action.delta
        trace.outcome = evaluate_stages(tracker.state, task)
        return trace

    try:
        g = graph if graph is not None else build_graph(bank, score_cfg, mode=mode)
    except EmptyBank as exc:
        trace.notes.append(f"no-path: {exc}")
        trace.outcome = evaluate_stages(state, task)
        return trace

    attached = attach_queries(g, tracker.live_frame(), tracker.state, goal=goal, goal_world=goal_world)
    entry_delta = None
    while len(trace.executed_parts) < max_parts:
        try:
            if trace.executed_parts:
                plan = replan(attached, tracker.live_frame(), tracker.state, tuple(trace.executed_parts))
            else:
                plan = shortest_path(attached)
        except NoPath as exc:
            trace.notes.append(f"no-path: {exc}")
            break
        trace.plans.append(plan)
        part = parts_by_id[plan.path[0]]
        tracker.run_part(part, entry_delta)
        trace.executed_parts.append(part.part_id)
        entry_delta = part.keyframes[-1].action.delta
        if part.is_terminal:
            break
    trace.outcome = evaluate_stages(tracker.state, task)
    return trace
