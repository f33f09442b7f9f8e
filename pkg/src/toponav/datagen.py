"""Passive-data pipeline: roaming videos, affinity-propagation graph building,
and supervised instance sampling for the two learned networks."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import localnav
from . import simworld as sw
from . import topomap as tm
from .simworld import AgentPose, DepthImage, NoiseModel, SimAgent, ViewDescriptor

DATASET_MAGIC = b"NRNSD1"


@dataclass(frozen=True)
class DatagenConfig:
    waypoints_min: int = 2
    waypoints_max: int = 4
    action_cap: int = 800            # hard stop for one video
    waypoint_tol: float = 0.25
    pose_weight: float = 1.0         # weight of standardized odometry vs visual features
    ap_damping: float = 0.7
    ap_max_iters: int = 200
    ap_convergence: int = 15
    ap_preference: float | None = None  # None: median pairwise similarity
    dedupe_radius: float = tm.DEFAULT_DEDUPE_RADIUS
    clearance: float = tm.DEFAULT_CLEARANCE
    subgraph_min: int = 4
    subgraph_max: int = 12
    sample_tries: int = 40
    pair_positive_fraction: float = 0.5


@dataclass
class Frame:
    true_pose: AgentPose
    est_pose: AgentPose
    depth: DepthImage
    descriptor: ViewDescriptor


@dataclass
class TrajectoryVideo:
    frames: list
    world_id: int
    seed: int

    def __len__(self):
        return len(self.frames)


@dataclass
class DistanceInstance:
    graph: tm.TopoGraph             # induced subgraph, ids preserved
    goal_node: int
    goal_descriptor: ViewDescriptor
    labels: dict                    # unexplored node id -> trajectory meters to goal
    graph_index: int = -1
    subgraph_nodes: tuple = ()


@dataclass
class TargetPairInstance:
    descriptor_a: ViewDescriptor
    descriptor_b: ViewDescriptor
    label: bool
    rho: float | None = None
    phi: float | None = None
    graph_index: int = -1
    node_a: int = -1
    node_b: int = -1


# ---------------------------------------------------------------------------
# video generation
# ---------------------------------------------------------------------------


def _world_route(world, start_cell, goal_cell):
    """A* over world occupancy (1-cell inflation keeps the rover off walls)."""
    occ = world.occupancy
    blocked = occ.copy()
    blocked[:-1, :] |= occ[1:, :]
    blocked[1:, :] |= occ[:-1, :]
    blocked[:, :-1] |= occ[:, 1:]
    blocked[:, 1:] |= occ[:, :-1]
    blocked[start_cell] = False
    blocked[goal_cell] = False
    return localnav._astar(np.full(occ.shape, localnav.FREE, dtype=np.uint8), blocked,
                           start_cell, goal_cell, 1.0,
                           (0, occ.shape[0] - 1, 0, occ.shape[1] - 1))


def generate_video(world, noise: NoiseModel, rng, cfg: DatagenConfig = DatagenConfig(),
                   world_id: int = 0, seed: int = 0,
                   sensor: sw.SensorConfig = sw.SensorConfig()) -> TrajectoryVideo:
    """Roam between 2-4 uniformly sampled waypoints along grid-shortest paths.

    Frames are recorded after every action; with noise enabled the recorded
    pose estimates drift like real odometry.
    """
    n_way = int(rng.integers(cfg.waypoints_min, cfg.waypoints_max + 1))
    for _ in range(50):
        waypoints = [sw.sample_free_pose(world, rng) for _ in range(n_way)]
        field0 = sw.geodesic_field(world, waypoints[0])
        cells = [world.cell_of(p.x, p.y) for p in waypoints]
        if all(math.isfinite(field0[c]) for c in cells[1:]):
            break
    else:
        raise RuntimeError("could not sample mutually reachable waypoints")

    sim = SimAgent(world, waypoints[0], noise, rng, sensor=sensor)

    def record():
        depth = sim.depth()
        return Frame(sim.true_pose, sim.observe(), depth,
                     sw.descriptor_from_depth(depth, world.color_count))

    frames = [record()]
    for target in waypoints[1:]:
        route = _world_route(world, world.cell_of(sim.true_pose.x, sim.true_pose.y),
                             world.cell_of(target.x, target.y))
        if route is None:
            continue
        idx = 0
        while len(frames) - 1 < cfg.action_cap:
            if math.hypot(sim.true_pose.x - target.x, sim.true_pose.y - target.y) < cfg.waypoint_tol:
                break
            while idx < len(route) - 1:
                wx, wy = world.cell_center(*route[idx])
                if math.hypot(wx - sim.true_pose.x, wy - sim.true_pose.y) >= 0.35:
                    break
                idx += 1
            wx, wy = world.cell_center(*route[idx])
            if idx >= len(route) - 1:
                wx, wy = target.x, target.y
            err = sw.wrap_signed(sw.bearing_deg(sim.true_pose.x, sim.true_pose.y, wx, wy)
                                 - sim.true_pose.heading)
            action = "forward" if abs(err) <= 7.5 else ("rotate_left" if err > 0 else "rotate_right")
            collided = sim.execute(action)
            frames.append(record())
            if collided:
                route = _world_route(world, world.cell_of(sim.true_pose.x, sim.true_pose.y),
                                     world.cell_of(target.x, target.y))
                idx = 0
                if route is None:
                    break
    if len(frames) < 2:
        frames.append(record())
    return TrajectoryVideo(frames=frames, world_id=world_id, seed=seed)


# ---------------------------------------------------------------------------
# affinity propagation
# ---------------------------------------------------------------------------


def affinity_propagation(similarity, preference=None, damping=0.9, max_iters=200,
                         convergence_window=15):
    """Exemplar clustering by responsibility/availability message passing.

    Returns an exemplar index per point; exemplars are their own exemplar.
    A deterministic jitter breaks exact symmetry so results stay reproducible.
    """
    S = np.array(similarity, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"similarity must be square, got {S.shape}")
    if not 0.5 <= damping < 1.0:
        raise ValueError("damping must be in [0.5, 1)")
    n = S.shape[0]
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    if preference is None:
        off = S[~np.eye(n, dtype=bool)]
        preference = float(np.median(off))
    np.fill_diagonal(S, preference)
    scale = np.abs(S).max() or 1.0
    S = S + 1e-10 * scale * np.random.default_rng(0).standard_normal((n, n))

    R = np.zeros((n, n))
    A = np.zeros((n, n))
    labels = None
    stable = 0
    rows = np.arange(n)
    # heavy damping crawls, so assignments can look frozen mid-transient;
    # stability only counts once the messages themselves have settled
    delta_tol = 1e-6 * max(scale, 1.0)
    for _ in range(max_iters):
        AS = A + S
        top = np.argmax(AS, axis=1)
        first = AS[rows, top]
        AS[rows, top] = -np.inf
        second = AS.max(axis=1)
        Rnew = S - first[:, None]
        Rnew[rows, top] = S[rows, top] - second
        delta = np.abs(Rnew - R).max()
        R = damping * R + (1.0 - damping) * Rnew

        Rp = np.maximum(R, 0.0)
        np.fill_diagonal(Rp, R.diagonal())
        col_sums = Rp.sum(axis=0)
        Anew = col_sums[None, :] - Rp
        diag = Anew.diagonal().copy()
        Anew = np.minimum(Anew, 0.0)
        np.fill_diagonal(Anew, diag)
        delta = max(delta, np.abs(Anew - A).max())
        A = damping * A + (1.0 - damping) * Anew

        exemplars = np.flatnonzero((A + R).diagonal() > 0)
        if len(exemplars):
            new_labels = exemplars[np.argmax(S[:, exemplars], axis=1)]
            new_labels[exemplars] = exemplars
            if labels is not None and np.array_equal(new_labels, labels) and delta < delta_tol:
                stable += 1
                if stable >= convergence_window:
                    break
            else:
                stable = 0
            labels = new_labels
    if labels is None:
        anchor = int(np.argmax((A + R).diagonal()))
        labels = np.full(n, anchor, dtype=np.int64)
    return labels.astype(np.int64)


def exemplar_set_score(similarity, preference, exemplars):
    """Objective of an exemplar set: best similarity per point + exemplar preferences."""
    S = np.array(similarity, dtype=np.float64)
    np.fill_diagonal(S, preference)
    exemplars = sorted(set(int(e) for e in exemplars))
    score = 0.0
    for i in range(len(S)):
        score += preference if i in exemplars else max(S[i, e] for e in exemplars)
    return score


# ---------------------------------------------------------------------------
# video -> topological graph
# ---------------------------------------------------------------------------


def video_features(video: TrajectoryVideo, pose_weight: float = 1.0) -> np.ndarray:
    """Per-frame clustering features: [descriptor ; weighted standardized odometry]."""
    desc = np.stack([f.descriptor.values for f in video.frames])
    pose = np.array([[f.est_pose.x, f.est_pose.y,
                      math.sin(math.radians(f.est_pose.heading)),
                      math.cos(math.radians(f.est_pose.heading))] for f in video.frames])
    std = pose.std(axis=0)
    std[std < 1e-9] = 1.0
    pose = (pose - pose.mean(axis=0)) / std
    return np.concatenate([desc, pose_weight * pose], axis=1)


def video_to_topograph(video: TrajectoryVideo, cfg: DatagenConfig = DatagenConfig()) -> tm.TopoGraph:
    """Cluster frames into place nodes, link temporally adjacent places, grow frontier."""
    if len(video) == 0:
        raise ValueError("empty video")
    feats = video_features(video, cfg.pose_weight)
    # bit-identical frames (stationary stretches) are one place by definition
    uniq, inverse = np.unique(feats, axis=0, return_inverse=True)
    diff = uniq[:, None, :] - uniq[None, :, :]
    similarity = -np.einsum("ijk,ijk->ij", diff, diff)
    uniq_labels = affinity_propagation(similarity, cfg.ap_preference, cfg.ap_damping,
                                       cfg.ap_max_iters, cfg.ap_convergence)
    # map exemplars back to original frame indices (first occurrence wins)
    first_frame = np.full(len(uniq), -1, dtype=np.int64)
    for t, u in enumerate(inverse):
        if first_frame[u] < 0:
            first_frame[u] = t
    labels = first_frame[uniq_labels[inverse]]
    exemplars = []
    for lab in labels:
        if lab not in exemplars:
            exemplars.append(int(lab))
    if not exemplars:
        raise ValueError("clustering produced no clusters")
    cluster_of = {ex: i for i, ex in enumerate(exemplars)}

    graph = tm.TopoGraph()
    centroid_frames = []
    centroid_descriptors = {}
    for ex in exemplars:
        members = np.flatnonzero(labels == ex)
        mean_feat = feats[members].mean(axis=0)
        centroid = members[int(np.argmin(((feats[members] - mean_feat) ** 2).sum(axis=1)))]
        frame = video.frames[centroid]
        pooled = np.stack([video.frames[m].descriptor.values for m in members]).mean(axis=0)
        pooled = pooled / np.linalg.norm(pooled)
        node_id = graph.add_node(frame.est_pose, tm.EXPLORED, ViewDescriptor(pooled))
        centroid_frames.append(frame)
        centroid_descriptors[node_id] = frame.descriptor

    for t in range(len(video) - 1):
        a = cluster_of[int(labels[t])]
        b = cluster_of[int(labels[t + 1])]
        if a != b and not graph.has_edge(a, b):
            graph.add_edge(a, b)
    graph.current_node = cluster_of[int(labels[-1])]

    for node_id, frame in enumerate(centroid_frames):
        tm.expand(graph, node_id, frame.depth, cfg.dedupe_radius, cfg.clearance)
    # raw single-frame views at the node centroids: training pairs and goal
    # images use these so the networks see what the agent senses at run time
    graph.centroid_descriptors = centroid_descriptors
    return graph


# ---------------------------------------------------------------------------
# instance sampling
# ---------------------------------------------------------------------------


def _grow_connected(graph: tm.TopoGraph, seed_node: int, size: int, rng):
    chosen = {seed_node}
    frontier = set(graph.neighbors(seed_node)) - chosen
    while len(chosen) < size and frontier:
        pick = sorted(frontier)[int(rng.integers(len(frontier)))]
        chosen.add(pick)
        frontier |= set(graph.neighbors(pick))
        frontier -= chosen
    return chosen


def sample_distance_instances(graph: tm.TopoGraph, count: int, rng,
                              cfg: DatagenConfig = DatagenConfig(), graph_index: int = -1):
    """Random goal + random connected subgraph; labels are trajectory-graph meters.

    Sampling is without replacement over (goal, subgraph) combinations; returns
    (instances, exhausted) where exhausted flags an unsatisfiable count.
    """
    explored = graph.explored_ids()
    if len(explored) < 2:
        raise ValueError("need at least two explored nodes")
    all_nodes = sorted(graph.nodes)
    cost_cache = {}
    seen = set()
    out = []
    tries = 0
    budget = max(count * cfg.sample_tries, 200)
    while len(out) < count and tries < budget:
        tries += 1
        goal = explored[int(rng.integers(len(explored)))]
        seed_node = all_nodes[int(rng.integers(len(all_nodes)))]
        size = int(rng.integers(min(cfg.subgraph_min, len(all_nodes)),
                                min(cfg.subgraph_max, len(all_nodes)) + 1))
        chosen = _grow_connected(graph, seed_node, size, rng)
        unexplored = [n for n in chosen if not graph.nodes[n].explored]
        if not unexplored or not any(graph.nodes[n].explored for n in chosen):
            continue
        key = (goal, frozenset(chosen))
        if key in seen:
            continue
        seen.add(key)
        if goal not in cost_cache:
            cost_cache[goal] = tm.travel_costs_from(graph, goal)
        costs = cost_cache[goal]
        if any(costs.get(n, math.inf) == math.inf for n in unexplored):
            continue
        out.append(DistanceInstance(
            graph=tm.induced_subgraph(graph, chosen),
            goal_node=goal,
            goal_descriptor=_view_of(graph, goal),
            labels={n: costs[n] for n in sorted(unexplored)},
            graph_index=graph_index,
            subgraph_nodes=tuple(sorted(chosen)),
        ))
    return out, len(out) < count


def _view_of(graph: tm.TopoGraph, node_id: int) -> ViewDescriptor:
    """Raw centroid-frame view when the graph carries one; what the agent would sense."""
    raw = getattr(graph, "centroid_descriptors", None)
    if raw is not None and node_id in raw:
        return raw[node_id]
    return graph.nodes[node_id].descriptor


def sample_target_pairs(graph: tm.TopoGraph, count: int, positive_fraction: float = 0.5,
                        rng=None, graph_index: int = -1):
    """Ordered explored pairs: adjacent ones are positive (with relative offset labels)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    explored = set(graph.explored_ids())
    adjacent = []
    for (a, b) in sorted(graph.edges):
        if a != b and a in explored and b in explored:
            adjacent.append((a, b))
            adjacent.append((b, a))
    adj_set = set(adjacent)
    non_adjacent = [(a, b) for a in sorted(explored) for b in sorted(explored)
                    if a != b and (a, b) not in adj_set]
    n_pos = int(round(count * positive_fraction))
    n_neg = count - n_pos
    if (n_pos > 0 and not adjacent) or (n_neg > 0 and not non_adjacent):
        raise ValueError("graph cannot satisfy the requested class balance")
    out = []
    for _ in range(n_pos):
        a, b = adjacent[int(rng.integers(len(adjacent)))]
        rho, phi = graph.nodes[a].pose.offset_to(graph.nodes[b].pose)
        out.append(TargetPairInstance(_view_of(graph, a), _view_of(graph, b),
                                      True, rho, phi, graph_index, a, b))
    for _ in range(n_neg):
        a, b = non_adjacent[int(rng.integers(len(non_adjacent)))]
        out.append(TargetPairInstance(_view_of(graph, a), _view_of(graph, b),
                                      False, None, None, graph_index, a, b))
    return out


# ---------------------------------------------------------------------------
# dataset assembly and file format
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    descriptor_dim: int
    graphs: list = field(default_factory=list)
    distance_instances: list = field(default_factory=list)
    target_pairs: list = field(default_factory=list)


def build_dataset(worlds, videos_per_world: int, noise: NoiseModel, master_seed: int,
                  distance_per_world: int = 1000, pairs_per_world: int = 1000,
                  cfg: DatagenConfig = DatagenConfig(),
                  sensor: sw.SensorConfig = sw.SensorConfig()) -> Dataset:
    """Videos -> graphs -> sampled instances for every world, deterministically."""
    if not worlds:
        raise ValueError("no worlds given")
    desc_dim = sw.descriptor_dim(worlds[0].color_count)
    ds = Dataset(descriptor_dim=desc_dim)
    for w_idx, world in enumerate(worlds):
        graphs = []
        for v in range(videos_per_world):
            rng = np.random.default_rng((master_seed, w_idx, v))
            video = generate_video(world, noise, rng, cfg, world_id=w_idx,
                                   seed=master_seed, sensor=sensor)
            graphs.append(video_to_topograph(video, cfg))
        per_graph_d = max(1, distance_per_world // max(len(graphs), 1))
        per_graph_p = max(1, pairs_per_world // max(len(graphs), 1))
        for g in graphs:
            g_idx = len(ds.graphs)
            ds.graphs.append(g)
            rng = np.random.default_rng((master_seed, w_idx, 10_000 + g_idx))
            inst, _ = sample_distance_instances(g, per_graph_d, rng, cfg, graph_index=g_idx)
            ds.distance_instances.extend(inst)
            try:
                ds.target_pairs.extend(
                    sample_target_pairs(g, per_graph_p, cfg.pair_positive_fraction, rng,
                                        graph_index=g_idx))
            except ValueError:
                pass  # tiny graphs may lack one class; other worlds make up for it
    return ds


def save_dataset(ds: Dataset, path) -> None:
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<IIII", ds.descriptor_dim, len(ds.graphs),
                          len(ds.distance_instances), len(ds.target_pairs)))
    for g in ds.graphs:
        blob = tm.graph_to_bytes(g, ds.descriptor_dim)
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
    for inst in ds.distance_instances:
        buf.write(struct.pack("<II", inst.graph_index, inst.goal_node))
        buf.write(inst.goal_descriptor.values.astype("<f8").tobytes())
        buf.write(struct.pack("<I", len(inst.subgraph_nodes)))
        buf.write(struct.pack(f"<{len(inst.subgraph_nodes)}I", *inst.subgraph_nodes))
        labels = sorted(inst.labels.items())
        buf.write(struct.pack("<I", len(labels)))
        for nid, meters in labels:
            buf.write(struct.pack("<Id", nid, meters))
    for pair in ds.target_pairs:
        buf.write(struct.pack("<IIIB", pair.graph_index, pair.node_a, pair.node_b,
                              1 if pair.label else 0))
        buf.write(struct.pack("<dd", pair.rho if pair.label else math.nan,
                              pair.phi if pair.label else math.nan))
        buf.write(pair.descriptor_a.values.astype("<f8").tobytes())
        buf.write(pair.descriptor_b.values.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:6] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic)")
    off = 6
    desc_dim, n_graphs, n_dist, n_pairs = struct.unpack_from("<IIII", data, off)
    off += 16
    ds = Dataset(descriptor_dim=desc_dim)
    for _ in range(n_graphs):
        (blob_len,) = struct.unpack_from("<I", data, off)
        off += 4
        graph, used = tm.graph_from_bytes(data, off)
        if used != blob_len:
            raise ValueError(f"{path}: graph blob length mismatch")
        off += blob_len
        ds.graphs.append(graph)
    for _ in range(n_dist):
        g_idx, goal = struct.unpack_from("<II", data, off)
        off += 8
        goal_desc = np.frombuffer(data, dtype="<f8", count=desc_dim, offset=off).copy()
        off += 8 * desc_dim
        (n_sub,) = struct.unpack_from("<I", data, off)
        off += 4
        nodes = struct.unpack_from(f"<{n_sub}I", data, off)
        off += 4 * n_sub
        (n_labels,) = struct.unpack_from("<I", data, off)
        off += 4
        labels = {}
        for _ in range(n_labels):
            nid, meters = struct.unpack_from("<Id", data, off)
            off += 12
            labels[nid] = meters
        ds.distance_instances.append(DistanceInstance(
            graph=tm.induced_subgraph(ds.graphs[g_idx], nodes),
            goal_node=goal,
            goal_descriptor=ViewDescriptor(goal_desc),
            labels=labels,
            graph_index=g_idx,
            subgraph_nodes=tuple(nodes),
        ))
    for _ in range(n_pairs):
        g_idx, a, b, label = struct.unpack_from("<IIIB", data, off)
        off += 13
        rho, phi = struct.unpack_from("<dd", data, off)
        off += 16
        desc_a = np.frombuffer(data, dtype="<f8", count=desc_dim, offset=off).copy()
        off += 8 * desc_dim
        desc_b = np.frombuffer(data, dtype="<f8", count=desc_dim, offset=off).copy()
        off += 8 * desc_dim
        ds.target_pairs.append(TargetPairInstance(
            ViewDescriptor(desc_a), ViewDescriptor(desc_b), bool(label),
            None if math.isnan(rho) else rho, None if math.isnan(phi) else phi,
            g_idx, a, b))
    return ds


def dataset_equal(a: Dataset, b: Dataset) -> bool:
    if (a.descriptor_dim != b.descriptor_dim or len(a.graphs) != len(b.graphs)
            or len(a.distance_instances) != len(b.distance_instances)
            or len(a.target_pairs) != len(b.target_pairs)):
        return False
    for ga, gb in zip(a.graphs, b.graphs):
        if tm.graph_to_bytes(ga, a.descriptor_dim) != tm.graph_to_bytes(gb, b.descriptor_dim):
            return False
    for ia, ib in zip(a.distance_instances, b.distance_instances):
        if (ia.graph_index, ia.goal_node, ia.subgraph_nodes) != (ib.graph_index, ib.goal_node, ib.subgraph_nodes):
            return False
        if sorted(ia.labels) != sorted(ib.labels):
            return False
        if any(abs(ia.labels[k] - ib.labels[k]) > 0 for k in ia.labels):
            return False
        if not np.array_equal(ia.goal_descriptor.values, ib.goal_descriptor.values):
            return False
    for pa, pb in zip(a.target_pairs, b.target_pairs):
        if (pa.graph_index, pa.node_a, pa.node_b, pa.label) != (pb.graph_index, pb.node_a, pb.node_b, pb.label):
            return False
        if not np.array_equal(pa.descriptor_a.values, pb.descriptor_a.values):
            return False
        if not np.array_equal(pa.descriptor_b.values, pb.descriptor_b.values):
            return False
    return True
