"""Seeded experiment suites: multi-part, goal-conditioned, cross-task,
similarity evaluation.

Every experiment is a pure function of (config, seeds): episode seeds are
base_seed + index so cells are paired across schemes and conditions, demo
seeds come from a disjoint stream, and metrics files are written with
full-precision repr floats, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .bank import MemoryBank, Scheme, segment
from .core import Frame, wrap_angle
from .correspondence import BackendConfig
from .errors import PlacementFailure, ScriptFailure
from .planner import CombinationMode, ScoreConfig, build_graph
from .rendering import render
from .scripted import ScriptedTrajectory, scripted_demo
from .servo import EpisodeTrace, ServoConfig, run_episode
from .similarity import ScoreKind
from .simulator import ShapeKind, SimConfig, TaskKind, WorldState, make_task, reset

OUT_DIR_ENV = "SERVOGRAPH_OUT_DIR"


@dataclass(frozen=True)
class ExperimentConfig:
    """Full parameter schema for the CLI experiment commands."""

    task_kind: str = "shape_sorting"
    target_shape: str = "trapeze"
    schemes: tuple[str, ...] = ("1p", "2p", "3p")
    demo_counts: tuple[int, ...] = (5, 10, 20)
    episodes: int = 50
    base_seed: int = 5000
    demo_seed: int = 77000
    score_kind: str = "fs"
    combination_mode: str = "multiplicative"
    goal_conditioned: bool = False
    flow_weight: float = 0.5
    crosstask_counts: tuple[int, ...] = (0, 5, 20)
    eval_pool_size: int = 30
    eval_query_count: int = 100
    eval_noise_px: float = 0.0
    out_dir: str = "results"
    # retrieval scoring flow: wide validity basin, ranking degrades gracefully
    scoring_noise_px: float = 1.0
    scoring_max_flow_px: float | None = 60.0
    scoring_max_rotation_rad: float | None = 1.8
    # servo flow: precise control within a tighter basin
    servo_noise_px: float = 1.0
    servo_max_flow_px: float | None = 30.0
    servo_max_rotation_rad: float | None = 0.9
    servo_fitter: str = "ransac"
    servo_ransac_threshold_m: float = 0.012
    servo_ransac_iterations: int = 50
    servo_max_steps_per_keyframe: int = 12
    servo_gain: float = 0.8
    servo_trans_threshold: float = 0.01
    servo_rot_threshold: float = 0.05
    scoring_ransac_threshold_m: float = 0.005
    scoring_ransac_iterations: int = 200
    sim_overrides: dict = field(default_factory=dict)

    # ------------------------------------------------------------------
    def sim_config(self) -> SimConfig:
        return replace(SimConfig(), **self.sim_overrides) if self.sim_overrides else SimConfig()

    def scoring_backend(self) -> BackendConfig:
        return BackendConfig(
            name="oracle",
            noise_px=self.scoring_noise_px,
            max_flow_px=self.scoring_max_flow_px,
            max_rotation_rad=self.scoring_max_rotation_rad,
        )

    def servo_backend(self) -> BackendConfig:
        return BackendConfig(
            name="oracle",
            noise_px=self.servo_noise_px,
            max_flow_px=self.servo_max_flow_px,
            max_rotation_rad=self.servo_max_rotation_rad,
        )

    def score_config(self) -> ScoreConfig:
        return ScoreConfig(
            kind=ScoreKind(self.score_kind),
            backend=self.scoring_backend(),
            flow_weight=self.flow_weight,
            ransac_threshold_m=self.scoring_ransac_threshold_m,
            ransac_iterations=self.scoring_ransac_iterations,
        )

    def servo_config(self) -> ServoConfig:
        return ServoConfig(
            trans_threshold=self.servo_trans_threshold,
            rot_threshold=self.servo_rot_threshold,
            max_steps_per_keyframe=self.servo_max_steps_per_keyframe,
            gain=self.servo_gain,
            fitter=self.servo_fitter,
            ransac_threshold_m=self.servo_ransac_threshold_m,
            ransac_iterations=self.servo_ransac_iterations,
        )

    def mode(self) -> CombinationMode:
        return CombinationMode(self.combination_mode)

    def out_path(self) -> Path:
        return Path(os.environ.get(OUT_DIR_ENV, self.out_dir))

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @staticmethod
    def from_json(path: str | Path) -> "ExperimentConfig":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(ExperimentConfig)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, value in list(data.items()):
            if isinstance(value, list):
                data[key] = tuple(value)
        return ExperimentConfig(**data)


# ---------------------------------------------------------------------------
# shared plumbing


def record_demos(
    task_kind: TaskKind,
    target_shape: ShapeKind,
    count: int,
    seed_start: int,
    sim_cfg: SimConfig,
    log: list[str] | None = None,
) -> list[tuple[str, ScriptedTrajectory]]:
    """Record ``count`` scripted demos, skipping and logging failed seeds."""
    out = []
    seed = seed_start
    attempts = 0
    while len(out) < count:
        if attempts > count * 20 + 100:
            raise ScriptFailure(f"recorded only {len(out)}/{count} demos")
        attempts += 1
        task = make_task(task_kind, target_shape, sim_cfg)
        try:
            traj = scripted_demo(task, seed, sim_cfg)
        except (PlacementFailure, ScriptFailure) as exc:
            if log is not None:
                log.append(f"seed {seed} skipped: {exc}")
            seed += 1
            continue
        out.append((f"{task_kind.value[:2]}{target_shape.value[:2]}{seed:06d}", traj))
        seed += 1
    return out


def bank_from(trajs, scheme: Scheme) -> MemoryBank:
    parts = [p for demo_id, t in trajs for p in segment(t, scheme, demo_id)]
    return MemoryBank(tuple(parts))


def goal_image_for(task_kind: TaskKind, target_shape: ShapeKind, seed: int, sim_cfg: SimConfig):
    """Held-out goal observation: final frame of a scripted run on the
    episode's own scene."""
    task = make_task(task_kind, target_shape, sim_cfg)
    traj = scripted_demo(task, seed, sim_cfg)
    last = traj.keyframes[-1]
    return last.frame, last.world


def _aggregate(traces: list[EpisodeTrace]) -> dict:
    n = max(1, len(traces))
    pos = sum(t.outcome.correct_position for t in traces)
    grasp = sum(t.outcome.correct_grasp for t in traces)
    orient = sum(t.outcome.correct_orientation for t in traces)
    succ = sum(t.outcome.success for t in traces)
    plan_scores = [t.plans[0].combined_score for t in traces if t.plans]
    steps = [t.step_count for t in traces]
    return {
        "episodes": len(traces),
        "correct_position": int(pos),
        "correct_grasp": int(grasp),
        "correct_orientation": int(orient),
        "successes": int(succ),
        "position_rate": pos / n,
        "grasp_rate": grasp / n,
        "orientation_rate": orient / n,
        "success_rate": succ / n,
        "mean_plan_score": float(np.mean(plan_scores)) if plan_scores else float("nan"),
        "mean_episode_steps": float(np.mean(steps)) if steps else 0.0,
    }


def write_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    fieldnames = list(rows[0].keys())
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# experiment suites

_SCHEMES = {"1p": Scheme.P1, "2p": Scheme.P2, "3p": Scheme.P3}


def exp_multipart(cfg: ExperimentConfig) -> list[dict]:
    """Partition sweep: success rates per (scheme, demo count) plus the
    single-random-demonstration baseline."""
    sim_cfg = cfg.sim_config()
    task = make_task(TaskKind(cfg.task_kind), ShapeKind(cfg.target_shape), sim_cfg)
    trajs = record_demos(TaskKind(cfg.task_kind), ShapeKind(cfg.target_shape), max(cfg.demo_counts), cfg.demo_seed, sim_cfg)
    score_cfg = cfg.score_config()
    servo_cfg = cfg.servo_config()
    servo_backend = cfg.servo_backend()

    rows = []
    for scheme_name in cfg.schemes:
        scheme = _SCHEMES[scheme_name]
        for count in cfg.demo_counts:
            bank = bank_from(trajs[:count], scheme)
            graph = build_graph(bank, score_cfg, mode=cfg.mode())
            traces = [
                run_episode(
                    task, bank, score_cfg, mode=cfg.mode(), seed=cfg.base_seed + i,
                    servo_cfg=servo_cfg, sim_cfg=sim_cfg, graph=graph, servo_backend=servo_backend,
                )
                for i in range(cfg.episodes)
            ]
            rows.append({"experiment": "multipart", "scheme": scheme_name, "demo_count": count, **_aggregate(traces)})

    # FlowControl-style baseline: one randomly picked whole demonstration
    bank1p = bank_from(trajs, Scheme.P1)
    part_ids = [p.part_id for p in bank1p.parts]
    traces = []
    for i in range(cfg.episodes):
        pick = int(np.random.default_rng(cfg.base_seed + 900000 + i).integers(0, len(part_ids)))
        traces.append(
            run_episode(
                task, bank1p, score_cfg, seed=cfg.base_seed + i, servo_cfg=servo_cfg,
                sim_cfg=sim_cfg, forced_path=(part_ids[pick],), servo_backend=servo_backend,
            )
        )
    rows.append(
        {"experiment": "multipart", "scheme": "random_single_demo", "demo_count": max(cfg.demo_counts), **_aggregate(traces)}
    )
    write_csv(cfg.out_path() / "multipart.csv", rows)
    return rows


def exp_goal(cfg: ExperimentConfig) -> list[dict]:
    """Goal-conditioning study on pick-and-place with two demoed shapes.

    Episodes alternate the required shape; the three conditions mirror
    single-shape demos, both-shape demos without a goal, and both-shape
    demos conditioned on a held-out goal image.
    """
    sim_cfg = cfg.sim_config()
    shapes = (ShapeKind.TRAPEZE, ShapeKind.OVAL)
    per_shape = max(cfg.demo_counts)
    demo_sets = {
        s: record_demos(TaskKind.PICK_AND_PLACE, s, per_shape, cfg.demo_seed + 500 * k, sim_cfg)
        for k, s in enumerate(shapes)
    }
    banks = {s: bank_from(demo_sets[s], Scheme.P3) for s in shapes}
    both = banks[shapes[0]].merged_with(banks[shapes[1]])
    score_cfg = cfg.score_config()
    servo_cfg = cfg.servo_config()
    servo_backend = cfg.servo_backend()
    graphs = {s: build_graph(banks[s], score_cfg, mode=cfg.mode()) for s in shapes}
    graph_both = build_graph(both, score_cfg, mode=cfg.mode())
    parts_by_id = {p.part_id: p for p in both.parts}

    def run_condition(condition: str) -> dict:
        traces = []
        shape_hits: dict[ShapeKind, list[int]] = {s: [] for s in shapes}
        selected_correct = 0
        selected_total = 0
        for i in range(cfg.episodes):
            required = shapes[i % 2]
            task = make_task(TaskKind.PICK_AND_PLACE, required, sim_cfg)
            goal = goal_world = None
            if condition == "conditioned":
                goal, goal_world = goal_image_for(TaskKind.PICK_AND_PLACE, required, cfg.base_seed + i, sim_cfg)
            bank = banks[required] if condition == "single_shape" else both
            graph = graphs[required] if condition == "single_shape" else graph_both
            tr = run_episode(
                task, bank, score_cfg, mode=cfg.mode(), goal=goal, goal_world=goal_world,
                seed=cfg.base_seed + i, servo_cfg=servo_cfg, sim_cfg=sim_cfg, graph=graph,
                servo_backend=servo_backend,
            )
            traces.append(tr)
            shape_hits[required].append(int(tr.outcome.success))
            if tr.executed_parts:
                selected_total += 1
                chosen = parts_by_id[tr.executed_parts[0]].target_shape
                if chosen is required:
                    selected_correct += 1
        agg = _aggregate(traces)
        agg.update(
            {
                "experiment": "goal_conditioning",
                "condition": condition,
                "trapeze_rate": float(np.mean(shape_hits[ShapeKind.TRAPEZE])),
                "oval_rate": float(np.mean(shape_hits[ShapeKind.OVAL])),
                "correct_shape_selection_rate": selected_correct / max(1, selected_total),
            }
        )
        return agg

    rows = [run_condition(c) for c in ("single_shape", "unconditioned", "conditioned")]
    lead = ("experiment", "condition", "trapeze_rate", "oval_rate", "correct_shape_selection_rate")
    rows = [{k: r[k] for k in (*lead, *(k for k in r if k not in lead))} for r in rows]
    write_csv(cfg.out_path() / "goal_conditioning.csv", rows)
    return rows


def exp_crosstask(cfg: ExperimentConfig) -> list[dict]:
    """Cross-task reuse: pick-and-place success with N shape-sorting demos
    plus one pick-and-place demo, inverted-sum combination."""
    sim_cfg = cfg.sim_config()
    shape = ShapeKind(cfg.target_shape)
    ss_trajs = record_demos(TaskKind.SHAPE_SORTING, shape, max(cfg.crosstask_counts), cfg.demo_seed + 2000, sim_cfg)
    pnp_trajs = record_demos(TaskKind.PICK_AND_PLACE, shape, 1, cfg.demo_seed + 3000, sim_cfg)
    task = make_task(TaskKind.PICK_AND_PLACE, shape, sim_cfg)
    score_cfg = cfg.score_config()
    servo_cfg = cfg.servo_config()
    servo_backend = cfg.servo_backend()
    mode = CombinationMode.INVERTED_SUM
    pnp_bank3 = bank_from(pnp_trajs, Scheme.P3)
    ss_ids = {p.part_id for p in bank_from(ss_trajs, Scheme.P3).parts}

    rows = []
    for n in cfg.crosstask_counts:
        bank = bank_from(ss_trajs[:n], Scheme.P3).merged_with(pnp_bank3) if n else pnp_bank3
        graph = build_graph(bank, score_cfg, mode=mode)
        traces = []
        used_ss = 0
        for i in range(cfg.episodes):
            goal, goal_world = goal_image_for(TaskKind.PICK_AND_PLACE, shape, cfg.base_seed + i, sim_cfg)
            tr = run_episode(
                task, bank, score_cfg, mode=mode, goal=goal, goal_world=goal_world,
                seed=cfg.base_seed + i, servo_cfg=servo_cfg, sim_cfg=sim_cfg, graph=graph,
                servo_backend=servo_backend,
            )
            traces.append(tr)
            used_ss += any(pid in ss_ids for pid in tr.executed_parts)
        rows.append(
            {
                "experiment": "crosstask",
                "sorting_demos": n,
                "used_sorting_parts_rate": used_ss / max(1, len(traces)),
                **_aggregate(traces),
            }
        )

    # single-demonstration baseline: the lone pick-and-place demo, unsplit
    bank1 = bank_from(pnp_trajs, Scheme.P1)
    pid = bank1.parts[0].part_id
    traces = [
        run_episode(
            task, bank1, score_cfg, seed=cfg.base_seed + i, servo_cfg=servo_cfg,
            sim_cfg=sim_cfg, forced_path=(pid,), servo_backend=servo_backend,
        )
        for i in range(cfg.episodes)
    ]
    rows.append(
        {"experiment": "crosstask", "sorting_demos": -1, "used_sorting_parts_rate": 0.0, **_aggregate(traces)}
    )
    write_csv(cfg.out_path() / "crosstask.csv", rows)
    return rows


# ---------------------------------------------------------------------------
# similarity-function evaluation


def eval_similarity(cfg: ExperimentConfig) -> list[dict]:
    """Rank a demo pool against query scenes per score kind and report the
    pose error between each query and its top-ranked demo.

    Also checks exact-match self-retrieval: every pool frame used as a
    query must rank itself first for every kind.
    """
    from .planner import score_frames  # local import to avoid cycles

    sim_cfg = cfg.sim_config()
    shape = ShapeKind(cfg.target_shape)
    task = make_task(TaskKind(cfg.task_kind), shape, sim_cfg)
    pool_trajs = record_demos(TaskKind(cfg.task_kind), shape, cfg.eval_pool_size, cfg.demo_seed + 4000, sim_cfg)
    pool = []
    for demo_id, traj in pool_trajs:
        kf = traj.keyframes[0]
        pool.append((demo_id, kf.frame, kf.foreground_mask, kf.world))

    backend = BackendConfig(name="oracle", noise_px=cfg.eval_noise_px)
    kinds = (ScoreKind.FS, ScoreKind.INLIER_COUNT, ScoreKind.EMBEDDING)
    configs = {k: replace(cfg.score_config(), kind=k, backend=backend) for k in kinds}

    def rank(query_frame: Frame, query_world: WorldState | None, kind: ScoreKind) -> list[int]:
        scores = []
        for j, (_, frame, mask, world) in enumerate(pool):
            r = score_frames(frame, mask, world, query_frame, query_world, configs[kind], tau=1.0, seed=j)
            key = r.raw if kind is ScoreKind.FS else -r.raw
            if not math.isfinite(key):
                key = math.inf
            scores.append((key, j))
        return [j for _, j in sorted(scores)]

    def pose_error(query_world: WorldState, j: int) -> tuple[float, float]:
        q = query_world.target.pose
        d = pool[j][3].target.pose
        dpos = float(np.linalg.norm(q.translation[:2] - d.translation[:2]))
        dyaw = abs(wrap_angle(q.yaw() - d.yaw()))
        return dpos, dyaw

    rows = []
    buckets = [(0.0, 0.05), (0.05, 0.10), (0.10, 0.20), (0.20, 10.0)]
    for kind in kinds:
        exact_hits = 0
        for j, (_, frame, _, world) in enumerate(pool):
            order = rank(frame, world, kind)
            exact_hits += order[0] == j

        rng = np.random.default_rng(cfg.base_seed + 31337)
        pos_errs, yaw_errs, rand_errs, displacements = [], [], [], []
        for i in range(cfg.eval_query_count):
            state = reset(task, cfg.base_seed + 60000 + i, sim_cfg)
            qframe = render(state, cfg=sim_cfg)
            order = rank(qframe, state, kind)
            dp, dy = pose_error(state, order[0])
            pos_errs.append(dp)
            yaw_errs.append(dy)
            rand_errs.append(pose_error(state, int(rng.integers(0, len(pool))))[0])
            displacements.append(min(pose_error(state, j)[0] for j in range(len(pool))))
        row = {
            "experiment": "similarity_eval",
            "score_kind": kind.value,
            "pool_size": len(pool),
            "queries": cfg.eval_query_count,
            "exact_match_rank1_rate": exact_hits / len(pool),
            "top1_position_error_m": float(np.mean(pos_errs)),
            "top1_orientation_error_rad": float(np.mean(yaw_errs)),
            "random_position_error_m": float(np.mean(rand_errs)),
        }
        for lo, hi in buckets:
            sel = [e for e, d in zip(pos_errs, displacements) if lo <= d < hi]
            row[f"top1_pos_err_bucket_{lo:.2f}_{hi:.2f}"] = float(np.mean(sel)) if sel else float("nan")
        rows.append(row)
    write_csv(cfg.out_path() / "similarity_eval.csv", rows)
    return rows


# ---------------------------------------------------------------------------
# single-run trace dump


def trace_to_json(trace: EpisodeTrace) -> dict:
    return {
        "outcome": None
        if trace.outcome is None
        else {
            "correct_position": bool(trace.outcome.correct_position),
            "correct_grasp": bool(trace.outcome.correct_grasp),
            "correct_orientation": bool(trace.outcome.correct_orientation),
            "success": bool(trace.outcome.success),
        },
        "executed_parts": list(trace.executed_parts),
        "plans": [
            {
                "path": list(p.path),
                "combined_score": p.combined_score,
                "edges": [{"raw": r.raw, "normalized": r.normalized} for r in p.per_edge_scores],
            }
            for p in trace.plans
        ],
        "notes": list(trace.notes),
        "step_count": trace.step_count,
        "rows": [asdict(r) for r in trace.rows],
    }
