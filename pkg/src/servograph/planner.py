"""Demonstration graph construction and minimum-cost traversal.

Nodes are demonstration parts plus transient LIVE and GOAL query nodes.
The directed edge A -> B is scored by comparing B's first frame (the demo
side, conditioned on B's first-keyframe mask) against A's last frame, which
predicts how well B can start from where A ends; LIVE -> B edges use the
live observation on the live side, and A -> GOAL edges compare A's terminal
frame (conditioned on the manipulated object) against the goal image.

Normalized edge scores in (0, 1] are combined multiplicatively (treated as
pseudo-probabilities, implemented as minimum-cost search over -ln scores)
or, alternatively, by summing inverted scores. Ties break on the
lexicographic part-id sequence, which makes plans total-ordered and
deterministic.
"""

from __future__ import annotations

import heapq
import json
import math
import statistics
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .bank import DemoPart, MemoryBank, first_frame, first_mask, last_frame, target_mask_in_last_frame
from .core import Frame
from .correspondence import BackendConfig
from .errors import EmptyBank, EmptyMask, NoPath, StateMismatch, ZeroVector
from .similarity import (
    NORMALIZED_FLOOR,
    Orientation,
    ScoreKind,
    SimilarityResult,
    embedding_similarity,
    inlier_similarity,
    normalize,
    sim_fs,
    worst_result,
)
from .simulator import WorldState

LIVE_NODE = "__live__"
GOAL_NODE = "__goal__"

MAX_EDGE_COST = 40.0


class CombinationMode(Enum):
    MULTIPLICATIVE = "multiplicative"
    INVERTED_SUM = "inverted_sum"


@dataclass(frozen=True)
class ScoreConfig:
    """Similarity scoring parameters shared by graph build and queries."""

    kind: ScoreKind = ScoreKind.FS
    backend: BackendConfig = field(default_factory=BackendConfig)
    flow_weight: float = 0.5  # k in the flow-based score
    tau_override: float | None = None
    inlier_cap: float = 400.0
    ransac_threshold_m: float = 0.005
    ransac_iterations: int = 200


def _edge_seed(u: str, v: str) -> int:
    return zlib.crc32(f"{u}->{v}".encode())


def score_frames(
    demo_frame: Frame,
    demo_mask: np.ndarray,
    demo_world: WorldState | None,
    live_frame: Frame,
    live_world: WorldState | None,
    cfg: ScoreConfig,
    tau: float,
    seed: int = 0,
) -> SimilarityResult:
    """Score one (demo, live) state pair; failures fold to the worst result
    so candidate rankings stay total."""
    try:
        if cfg.kind is ScoreKind.FS:
            flow = cfg.backend.flow(demo_frame, live_frame, demo_mask, demo_world, live_world, seed)
            return sim_fs(demo_frame, live_frame, demo_mask, flow, k=cfg.flow_weight, tau=tau)
        if cfg.kind is ScoreKind.INLIER_COUNT:
            return inlier_similarity(
                demo_frame,
                live_frame,
                demo_mask,
                ransac_threshold_m=cfg.ransac_threshold_m,
                ransac_iterations=cfg.ransac_iterations,
                seed=seed,
                cap=cfg.inlier_cap,
            )
        if cfg.kind is ScoreKind.EMBEDDING:
            return embedding_similarity(demo_frame, live_frame, demo_mask)
    except (EmptyMask, ZeroVector):
        return worst_result(cfg.kind)
    raise ValueError(f"unknown score kind {cfg.kind}")


@dataclass
class DemoGraph:
    parts: dict[str, DemoPart]
    edges: dict[tuple[str, str], SimilarityResult]
    mode: CombinationMode
    tau: float
    score_cfg: ScoreConfig
    stage_filter: bool
    live_edges: dict[str, SimilarityResult] = field(default_factory=dict)
    goal_edges: dict[str, SimilarityResult] = field(default_factory=dict)
    min_stage: int = 0
    queries_attached: bool = False

    @property
    def terminal_stage(self) -> int:
        return max(p.num_stages - 1 for p in self.parts.values())

    def part_stage(self, part_id: str) -> int:
        return self.parts[part_id].stage_index


@dataclass(frozen=True)
class Plan:
    path: tuple[str, ...]
    combined_score: float
    per_edge_scores: tuple[SimilarityResult, ...]

    def __post_init__(self):
        if not self.path:
            raise ValueError("plans must contain at least one part")


def _renormalized(result: SimilarityResult, kind: ScoreKind, tau: float, cap: float) -> SimilarityResult:
    distance_like = kind.orientation is Orientation.DISTANCE_LIKE
    temperature = tau if distance_like else cap
    raw = result.raw
    if distance_like and not math.isfinite(raw):
        norm = NORMALIZED_FLOOR
    else:
        norm = normalize(raw, kind, temperature)
    return replace(result, normalized=norm)


def build_graph(
    bank: MemoryBank,
    score_cfg: ScoreConfig | None = None,
    mode: CombinationMode = CombinationMode.MULTIPLICATIVE,
    stage_filter: bool = True,
) -> DemoGraph:
    """Score every stage-compatible ordered part pair into a weighted graph.

    With the stage filter on (default), A -> B exists iff B's stage directly
    follows A's, which keeps all LIVE -> GOAL paths the same length; with it
    off the part graph is complete. The flow-score temperature tau is the
    median raw distance over finite edges, fixed at build time and stored
    with the graph.
    """
    score_cfg = score_cfg or ScoreConfig()
    if not bank.parts:
        raise EmptyBank("cannot build a graph from an empty bank")
    parts = {p.part_id: p for p in bank.parts}
    pairs = []
    for a in bank.parts:
        for b in bank.parts:
            if a.part_id == b.part_id:
                continue
            if stage_filter:
                # chained parts must continue the same sub-task: next stage,
                # same manipulated shape (a plan moves one object; the
                # conditioning annotation carries its identity)
                if b.stage_index != a.stage_index + 1 or b.target_shape != a.target_shape:
                    continue
            pairs.append((a, b))

    raw_results: dict[tuple[str, str], SimilarityResult] = {}
    for a, b in pairs:
        raw_results[(a.part_id, b.part_id)] = score_frames(
            first_frame(b),
            first_mask(b),
            b.keyframes[0].world,
            last_frame(a),
            a.keyframes[-1].world,
            score_cfg,
            tau=1.0,
            seed=_edge_seed(a.part_id, b.part_id),
        )

    if score_cfg.tau_override is not None:
        tau = score_cfg.tau_override
    else:
        finite = [r.raw for r in raw_results.values() if math.isfinite(r.raw) and r.raw > 0]
        tau = statistics.median(finite) if finite else 1.0
    edges = {
        key: _renormalized(r, score_cfg.kind, tau, score_cfg.inlier_cap) for key, r in raw_results.items()
    }
    return DemoGraph(
        parts=parts,
        edges=edges,
        mode=mode,
        tau=tau,
        score_cfg=score_cfg,
        stage_filter=stage_filter,
    )


def attach_queries(
    graph: DemoGraph,
    live: Frame,
    live_world: WorldState | None = None,
    live_mask: np.ndarray | None = None,
    goal: Frame | None = None,
    goal_world: WorldState | None = None,
    min_stage: int = 0,
) -> DemoGraph:
    """Attach LIVE and GOAL query nodes; returns a derived graph view.

    LIVE connects to every part opening the next eligible stage; terminal
    parts connect to GOAL. Without a goal image the GOAL edges carry weight
    exactly 1 (unconditioned retrieval). ``live_mask`` is accepted for
    embedder backends that can restrict the live side; flow scoring
    conditions on the demo-side masks only.
    """
    del live_mask  # the flow score conditions on demo-side masks
    cfg = graph.score_cfg
    live_edges = {}
    for pid, part in sorted(graph.parts.items()):
        if part.stage_index != min_stage:
            continue
        live_edges[pid] = _renormalized(
            score_frames(
                first_frame(part),
                first_mask(part),
                part.keyframes[0].world,
                live,
                live_world,
                cfg,
                tau=1.0,
                seed=_edge_seed(LIVE_NODE, pid),
            ),
            cfg.kind,
            graph.tau,
            cfg.inlier_cap,
        )
    goal_edges = {}
    for pid, part in sorted(graph.parts.items()):
        if not part.is_terminal:
            continue
        if goal is None:
            goal_edges[pid] = SimilarityResult(
                raw=float("nan"), normalized=1.0, kind=cfg.kind, valid_pixel_fraction=0.0
            )
        else:
            goal_edges[pid] = _renormalized(
                score_frames(
                    last_frame(part),
                    target_mask_in_last_frame(part),
                    part.keyframes[-1].world,
                    goal,
                    goal_world,
                    cfg,
                    tau=1.0,
                    seed=_edge_seed(pid, GOAL_NODE),
                ),
                cfg.kind,
                graph.tau,
                cfg.inlier_cap,
            )
    return replace(graph, live_edges=live_edges, goal_edges=goal_edges, min_stage=min_stage, queries_attached=True)


def edge_cost(normalized: float, mode: CombinationMode) -> float:
    if mode is CombinationMode.MULTIPLICATIVE:
        return min(-math.log(normalized), MAX_EDGE_COST)
    return 1.0 / normalized


def shortest_path(graph: DemoGraph) -> Plan:
    """Minimum-cost LIVE -> GOAL traversal with lexicographic tie-breaking.

    Best-first search over simple paths ordered by (cost, part-id sequence);
    the first goal pop is therefore the exact minimum under the tie-break.
    Node-level pruning of strictly costlier prefixes is applied only on
    stage-filtered graphs, where the layered structure makes it exact.
    """
    if not graph.queries_attached:
        raise NoPath("attach LIVE and GOAL before planning")
    successors: dict[str, list[tuple[str, float, SimilarityResult]]] = {}
    successors[LIVE_NODE] = [
        (pid, edge_cost(r.normalized, graph.mode), r) for pid, r in sorted(graph.live_edges.items())
    ]
    for (u, v), r in sorted(graph.edges.items()):
        successors.setdefault(u, []).append((v, edge_cost(r.normalized, graph.mode), r))
    for pid, r in sorted(graph.goal_edges.items()):
        successors.setdefault(pid, []).append((GOAL_NODE, edge_cost(r.normalized, graph.mode), r))
    for lst in successors.values():
        lst.sort(key=lambda e: e[0])

    node_best: dict[str, float] = {}
    counter = 0  # keeps heap comparisons from ever reaching the results tuple
    heap: list[tuple[float, tuple[str, ...], int, str, tuple]] = [(0.0, (), 0, LIVE_NODE, ())]
    while heap:
        cost, path, _, node, results = heapq.heappop(heap)
        if node == GOAL_NODE:
            return _plan_from(path, results, graph.mode)
        if graph.stage_filter and cost > node_best.get(node, math.inf):
            continue
        for nxt, c, r in successors.get(node, ()):
            if nxt != GOAL_NODE and nxt in path:
                continue
            new_cost = cost + c
            if graph.stage_filter and nxt != GOAL_NODE:
                best = node_best.get(nxt)
                if best is not None and new_cost > best:
                    continue
                if best is None or new_cost < best:
                    node_best[nxt] = new_cost
            new_path = path if nxt == GOAL_NODE else path + (nxt,)
            counter += 1
            heapq.heappush(heap, (new_cost, new_path, counter, nxt, results + (r,)))
    raise NoPath("goal unreachable from the live state")


def _plan_from(path: tuple[str, ...], results: tuple, mode: CombinationMode) -> Plan:
    if mode is CombinationMode.MULTIPLICATIVE:
        combined = 1.0
        for r in results:
            combined *= r.normalized
    else:
        combined = sum(1.0 / r.normalized for r in results)
    return Plan(path=path, combined_score=combined, per_edge_scores=tuple(results))


def replan(
    graph: DemoGraph,
    new_live: Frame,
    new_live_world: WorldState | None = None,
    executed: tuple[str, ...] = (),
) -> Plan:
    """Re-attach LIVE at the latest observation, restricted to stages after
    the deepest executed part, and search again."""
    if executed:
        min_stage = max(graph.part_stage(pid) for pid in executed) + 1
    else:
        min_stage = 0
    # goal edges do not depend on the live state; carry them over unchanged
    g = attach_queries(graph, new_live, new_live_world, goal=None, min_stage=min_stage)
    g.goal_edges = dict(graph.goal_edges)
    return shortest_path(g)


def dump_graph(graph: DemoGraph, path: str | Path) -> None:
    """Structured-text adjacency dump for inspection and replay."""
    doc = {
        "mode": graph.mode.value,
        "score_kind": graph.score_cfg.kind.value,
        "tau": graph.tau,
        "stage_filter": graph.stage_filter,
        "nodes": [
            {
                "part_id": p.part_id,
                "stage_index": p.stage_index,
                "is_terminal": p.is_terminal,
                "task_tag": p.task_tag,
                "source_demo_id": p.source_demo_id,
            }
            for _, p in sorted(graph.parts.items())
        ],
        "edges": [
            {
                "from": u,
                "to": v,
                "raw": r.raw,
                "normalized": r.normalized,
                "valid_pixel_fraction": r.valid_pixel_fraction,
            }
            for (u, v), r in sorted(graph.edges.items())
        ],
        "live_edges": [
            {"to": pid, "raw": r.raw, "normalized": r.normalized}
            for pid, r in sorted(graph.live_edges.items())
        ],
        "goal_edges": [
            {"from": pid, "raw": r.raw, "normalized": r.normalized}
            for pid, r in sorted(graph.goal_edges.items())
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1, allow_nan=True) + "\n")
