"""Episode orchestration: frontier expansion, sub-goal selection, local travel,
and the learned stopping criterion, with per-module ground-truth substitutes
for the ablation ladder."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import distnet, localnav, targetnet
from . import simworld as sw
from . import topomap as tm
from .simworld import AgentPose, NoiseModel, SimAgent

HEURISTIC = "heuristic"
LEARNED = "learned"
GROUND_TRUTH = "ground_truth"
RANDOM = "random"

STOP_NEAR = "stopped_near_goal"
STOP_FAR = "stopped_far"
BUDGET_EXHAUSTED = "budget_exhausted"
FRONTIER_EXHAUSTED = "frontier_exhausted"

SUCCESS_RADIUS = 1.0


@dataclass(frozen=True)
class AgentConfig:
    max_steps: int = 500
    stop_threshold: float = 0.5
    ea_mode: str = HEURISTIC        # heuristic | ground_truth (identical sensing here)
    gt_mode: str = LEARNED          # learned | ground_truth
    gd_mode: str = LEARNED          # learned | ground_truth | random
    local_budget: int = 50          # actions per sub-goal attempt
    dedupe_radius: float = tm.DEFAULT_DEDUPE_RADIUS
    clearance: float = tm.DEFAULT_CLEARANCE
    d_max: float = distnet.DEFAULT_D_MAX
    sight_range: float = 3.0        # ground-truth stopping: distance gate
    sight_fov: float = 360.0        # ground-truth stopping: FOV gate, degrees (360 = line of sight only)
    direct_rho_limit: float = 4.0   # beyond this, retrace the graph instead of one shot
    noise: NoiseModel = field(default_factory=lambda: NoiseModel(enabled=False))

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")


@dataclass
class GraphSnapshot:
    nodes: list   # (id, x, y, heading, explored)
    edges: list   # (src, dst, length)

    @classmethod
    def of(cls, graph: tm.TopoGraph) -> "GraphSnapshot":
        nodes = [(nid, n.pose.x, n.pose.y, n.pose.heading, n.explored)
                 for nid, n in sorted(graph.nodes.items())]
        edges = [(e.src, e.dst, e.length) for _, e in sorted(graph.edges.items())]
        return cls(nodes, edges)

    @property
    def explored_count(self):
        return sum(1 for n in self.nodes if n[4])


@dataclass
class EpisodeResult:
    success: bool
    agent_path_length: float
    shortest_path_length: float
    steps: int
    stop_reason: str
    graph: GraphSnapshot


def _snap_to_free(world, pose: AgentPose):
    """Nearest free cell around a (possibly drifted) pose; None when hopeless."""
    r, c = world.cell_of(pose.x, pose.y)
    for rad in range(0, 4):
        for dr in range(-rad, rad + 1):
            for dc in range(-rad, rad + 1):
                if max(abs(dr), abs(dc)) != rad:
                    continue
                rr, cc = r + dr, c + dc
                if 0 <= rr < world.height and 0 <= cc < world.width and not world.occupancy[rr, cc]:
                    return rr, cc
    return None


def gt_within_sight(world, true_pose: AgentPose, goal: AgentPose,
                    sight_range=3.0, sight_fov=120.0):
    """Ground-truth stopping gate: close, visible, and inside the field of view."""
    d = math.hypot(goal.x - true_pose.x, goal.y - true_pose.y)
    if d > sight_range:
        return False
    if not sw.line_of_sight(world, true_pose, goal):
        return False
    rel = sw.wrap_signed(sw.bearing_deg(true_pose.x, true_pose.y, goal.x, goal.y)
                         - true_pose.heading)
    return abs(rel) <= sight_fov / 2.0


def gt_frontier_distances(world, graph: tm.TopoGraph, goal_field: np.ndarray):
    out = {}
    for nid in graph.unexplored_ids():
        cell = _snap_to_free(world, graph.nodes[nid].pose)
        out[nid] = math.inf if cell is None else float(goal_field[cell])
    return out


def run_episode(world, start: AgentPose, goal: AgentPose, models=None,
                config: AgentConfig = AgentConfig(), rng=None, trace=None) -> EpisodeResult:
    """One image-goal episode.

    The loop expands the frontier at the current node, picks the sub-goal with
    the least travel-plus-predicted distance, drives there with the local
    policy, then queries the stopping model; a positive stop triggers a final
    approach. The stopping model is also consulted at the start node since the
    agent has just observed that pose.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if world.blocked_at(start.x, start.y) or world.blocked_at(goal.x, goal.y):
        raise ValueError("start or goal inside an obstacle")
    goal_field = sw.geodesic_field(world, goal)
    shortest = float(goal_field[world.cell_of(start.x, start.y)])
    if not math.isfinite(shortest):
        raise ValueError("start and goal are not connected")
    dist_model, target_model = models if models is not None else (None, None)
    if config.gd_mode == LEARNED and dist_model is None:
        raise ValueError("learned distance mode needs a distance model")
    if config.gt_mode == LEARNED and target_model is None:
        raise ValueError("learned stopping mode needs a target model")

    sim = SimAgent(world, start, config.noise, rng)
    goal_desc = sw.render_descriptor(world, goal)

    graph = tm.TopoGraph()
    current = graph.add_node(sim.observe(), tm.EXPLORED, sim.descriptor())
    graph.add_edge(current, current)
    graph.current_node = current

    if trace is not None:
        def hook(action, true_pose, est_pose):
            trace.write(f"{action},{true_pose.x:.3f},{true_pose.y:.3f},{true_pose.heading:.1f},"
                        f"{est_pose.x:.3f},{est_pose.y:.3f},{est_pose.heading:.1f},"
                        f"{len(graph.nodes)},{len(graph.edges)}\n")
        sim.hook = hook

    def remaining():
        return config.max_steps - sim.actions_taken

    def check_stop():
        if config.gt_mode == GROUND_TRUTH:
            if gt_within_sight(world, sim.true_pose, goal, config.sight_range, config.sight_fov):
                rho, phi = sim.true_pose.offset_to(goal)
                return 1.0, rho, phi
            return 0.0, 0.0, 0.0
        pred = targetnet.predict_target(target_model, sim.descriptor(), goal_desc)
        return pred.beta, max(pred.rho, 0.0), pred.phi

    def final_approach(rho, phi):
        if remaining() >= 1 and rho > 0:
            try:
                localnav.navigate_to(sim, sim.observe(), rho, phi, budget=remaining())
            except ValueError:
                pass  # target beyond the local map: stop in place
        d = math.hypot(sim.true_pose.x - goal.x, sim.true_pose.y - goal.y)
        return STOP_NEAR if d <= SUCCESS_RADIUS else STOP_FAR

    def travel_to_node(node_id, rho, phi):
        """Drive toward a node, retracing the graph when it is out of local reach.

        Always consumes at least one action so a stuck planner cannot spin the
        episode loop without burning budget.
        """
        before = sim.actions_taken
        if rho <= config.direct_rho_limit:
            legs = [(rho, phi)]
        else:
            route = tm.graph_route(graph, current, node_id) or [node_id]
            legs = []
            here = graph.nodes[current].pose
            for nid in route[1:]:
                r, p = here.offset_to(graph.nodes[nid].pose)
                legs.append((r, p))
                here = graph.nodes[nid].pose
        for i, (r, p) in enumerate(legs):
            if remaining() < 1:
                return
            est = sim.observe()
            if i > 0:  # recompute against the live estimate after the first leg
                target_pose = graph.nodes[node_id].pose if i == len(legs) - 1 else None
                if target_pose is not None:
                    r, p = est.offset_to(target_pose)
            budget = min(config.local_budget, remaining())
            try:
                localnav.navigate_to(sim, est, min(r, config.direct_rho_limit), p, budget=budget)
            except ValueError:
                break
        if sim.actions_taken == before and remaining() >= 1:
            sim.execute("rotate_left")

    stop_reason = None
    beta, rho_g, phi_g = check_stop()
    if beta > config.stop_threshold:
        stop_reason = final_approach(rho_g, phi_g)

    scan_rotations = 0
    while stop_reason is None:
        if remaining() < 1:
            stop_reason = BUDGET_EXHAUSTED
            break
        tm.expand(graph, current, sim.depth(), config.dedupe_radius, config.clearance)
        frontier = graph.unexplored_ids()
        if not frontier:
            # nothing explorable anywhere: scan in place before giving up, so a
            # spawn that faces a wall can still seed its frontier
            if scan_rotations >= 24 or remaining() < 1:
                stop_reason = FRONTIER_EXHAUSTED
                break
            sim.execute("rotate_left")
            scan_rotations += 1
            tm.mark_explored(graph, current, sim.observe(), sim.descriptor())
            continue
        scan_rotations = 0
        try:
            if config.gd_mode == GROUND_TRUTH:
                distances = gt_frontier_distances(world, graph, goal_field)
                subgoal, rho, phi = distnet.select_subgoal_from_distances(distances, graph, current)
            elif config.gd_mode == RANDOM:
                subgoal = frontier[int(rng.integers(len(frontier)))]
                rho, phi = graph.nodes[current].pose.offset_to(graph.nodes[subgoal].pose)
            else:
                scores = distnet.predict(dist_model, graph, goal_desc)
                subgoal, rho, phi = distnet.select_subgoal(scores, graph, current, config.d_max)
        except ValueError:
            stop_reason = FRONTIER_EXHAUSTED  # every candidate unreachable through the graph
            break
        travel_to_node(subgoal, rho, phi)
        tm.mark_explored(graph, subgoal, sim.observe(), sim.descriptor())
        current = subgoal
        beta, rho_g, phi_g = check_stop()
        if beta > config.stop_threshold:
            stop_reason = final_approach(rho_g, phi_g)
            break
        if remaining() < 1:
            stop_reason = BUDGET_EXHAUSTED
            break

    final_d = math.hypot(sim.true_pose.x - goal.x, sim.true_pose.y - goal.y)
    return EpisodeResult(
        success=final_d <= SUCCESS_RADIUS,
        agent_path_length=sim.path_length,
        shortest_path_length=shortest,
        steps=sim.actions_taken,
        stop_reason=stop_reason,
        graph=GraphSnapshot.of(graph),
    )


@dataclass
class BatchItem:
    episode_id: int
    result: EpisodeResult | None
    error: str | None = None


def run_batch(worlds: dict, episodes, models=None, config: AgentConfig = AgentConfig(),
              master_seed: int = 0, workers: int = 1):
    """Independent episodes over shared immutable worlds; order follows episode ids.

    episodes: iterable of (world_id, start AgentPose, goal AgentPose).
    """
    episodes = list(episodes)
    for world in worlds.values():
        world.free_graph()  # prebuild shared caches before any parallelism

    def one(i):
        world_id, start, goal = episodes[i]
        rng = np.random.default_rng((master_seed, i))
        try:
            return BatchItem(i, run_episode(worlds[world_id], start, goal, models, config, rng))
        except Exception as exc:
            return BatchItem(i, None, error=f"{type(exc).__name__}: {exc}")

    if workers <= 1:
        return [one(i) for i in range(len(episodes))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(len(episodes))))
