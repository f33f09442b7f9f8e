"""Distance-to-goal prediction over the exploration frontier.

A shared linear encoder lifts view descriptors (goal included) into the
hidden space; two edge-aware graph attention layers propagate explored-node
features along directed edges; a small head scores each unexplored node
against the goal feature. Scores live in (0, 1) and map linearly to meters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nnkit as nn
from . import topomap as tm
from .simworld import ViewDescriptor, wrap_signed, bearing_deg

DEFAULT_D_MAX = 30.0


def score_from_distance(d: float, d_max: float = DEFAULT_D_MAX) -> float:
    """Clipped inverse distance: 1 at the goal, 0 at d_max and beyond."""
    if d < 0:
        raise ValueError(f"negative distance {d}")
    return 1.0 - min(float(d), d_max) / d_max


def distance_from_score(score: float, d_max: float = DEFAULT_D_MAX) -> float:
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"score {score} outside [0, 1]")
    return (1.0 - float(score)) * d_max


@dataclass(frozen=True)
class DistanceModelConfig:
    descriptor_dim: int = 64
    hidden_dim: int = 64
    edge_dim: int = 16
    attention_dropout: float = 0.6
    d_max: float = DEFAULT_D_MAX


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-4
    seed: int = 0


@dataclass
class GraphArrays:
    """Flat view of a TopoGraph for the network: index-space, edges directed."""

    node_ids: list
    explored_rows: np.ndarray
    explored_desc: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_feats: np.ndarray
    unexplored_rows: np.ndarray
    unexplored_ids: list


def graph_arrays(graph: tm.TopoGraph) -> GraphArrays:
    """Message flow is explored -> neighbor; reverse direction uses the inverse transform."""
    node_ids = sorted(graph.nodes)
    index = {nid: i for i, nid in enumerate(node_ids)}
    explored_rows, desc = [], []
    unexplored_rows, unexplored_ids = [], []
    for nid in node_ids:
        node = graph.nodes[nid]
        if node.explored:
            explored_rows.append(index[nid])
            desc.append(node.descriptor.values)
        else:
            unexplored_rows.append(index[nid])
            unexplored_ids.append(nid)
    src, dst, feats = [], [], []
    for (a, b) in sorted(graph.edges):
        edge = graph.edges[(a, b)]
        if graph.nodes[a].explored:
            src.append(index[a])
            dst.append(index[b])
            feats.append(edge.feature())
        if a != b and graph.nodes[b].explored:
            src.append(index[b])
            dst.append(index[a])
            feats.append(edge.reverse_feature())
    return GraphArrays(
        node_ids=node_ids,
        explored_rows=np.array(explored_rows, dtype=np.int64),
        explored_desc=np.array(desc) if desc else np.zeros((0, 0)),
        edge_src=np.array(src, dtype=np.int64),
        edge_dst=np.array(dst, dtype=np.int64),
        edge_feats=np.array(feats) if feats else np.zeros((0, 16)),
        unexplored_rows=np.array(unexplored_rows, dtype=np.int64),
        unexplored_ids=unexplored_ids,
    )


class DistanceModel:
    """Encoder + two GAT layers + pairwise (node, goal) scoring head."""

    def __init__(self, config: DistanceModelConfig = DistanceModelConfig(), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        dh = config.hidden_dim
        # descriptors are unit-norm; rescale components to O(1) before encoding
        self.input_gain = float(np.sqrt(config.descriptor_dim))
        self.enc_w = nn.parameter(nn.xavier_uniform((config.descriptor_dim, dh), rng), "enc.w")
        self.enc_b = nn.parameter(np.zeros(dh), "enc.b")
        self.gat1 = nn.GatEdgeLayer(dh, dh, 16, config.edge_dim, config.attention_dropout, rng, "gat1")
        self.gat2 = nn.GatEdgeLayer(dh, dh, 16, config.edge_dim, config.attention_dropout, rng, "gat2")
        self.head_w1 = nn.parameter(nn.xavier_uniform((2 * dh, dh // 2), rng), "head.w1")
        self.head_b1 = nn.parameter(np.zeros(dh // 2), "head.b1")
        self.head_w2 = nn.parameter(nn.xavier_uniform((dh // 2, 1), rng), "head.w2")
        self.head_b2 = nn.parameter(np.zeros(1), "head.b2")

    def params(self):
        out = {t.name: t for t in (self.enc_w, self.enc_b, self.head_w1, self.head_b1,
                                   self.head_w2, self.head_b2)}
        out.update(self.gat1.params())
        out.update(self.gat2.params())
        return out

    def forward(self, arrays: GraphArrays, goal_values: np.ndarray, training=False, rng=None) -> nn.Tensor:
        """Scores for unexplored rows, shape (U,), order matching arrays.unexplored_ids."""
        if len(arrays.unexplored_ids) == 0:
            raise ValueError("graph has no unexplored nodes to score")
        n = len(arrays.node_ids)
        enc = nn.linear(nn.constant(arrays.explored_desc * self.input_gain), self.enc_w, self.enc_b)
        h0 = nn.scatter_rows(enc, arrays.explored_rows, n)  # unexplored rows stay zero
        ef = nn.constant(arrays.edge_feats)
        h1 = self.gat1.forward(h0, arrays.edge_src, arrays.edge_dst, ef, training, rng)
        h2 = self.gat2.forward(h1, arrays.edge_src, arrays.edge_dst, ef, training, rng)
        goal = nn.linear(nn.constant(goal_values[None, :] * self.input_gain), self.enc_w, self.enc_b)
        pair = nn.concat([nn.gather_rows(h2, arrays.unexplored_rows),
                          nn.broadcast_row(goal, len(arrays.unexplored_rows))], axis=1)
        hidden = nn.relu(nn.linear(pair, self.head_w1, self.head_b1))
        return nn.reshape(nn.sigmoid(nn.linear(hidden, self.head_w2, self.head_b2)), (-1,))

    def config_dict(self):
        return asdict(self.config)

    def save(self, path):
        nn.save_checkpoint(path, self.config_dict(), self.params())

    @classmethod
    def load(cls, path, config: DistanceModelConfig | None = None) -> "DistanceModel":
        saved_cfg, arrays = nn.load_checkpoint(path)
        model = cls(config if config is not None else DistanceModelConfig(**saved_cfg))
        nn.restore_params(model.params(), model.config_dict(), saved_cfg, arrays, path)
        return model


def predict(model: DistanceModel, graph: tm.TopoGraph, goal: ViewDescriptor) -> dict:
    """Evaluation-mode scores keyed by unexplored node id."""
    arrays = graph_arrays(graph)
    scores = model.forward(arrays, goal.values, training=False)
    return {nid: float(s) for nid, s in zip(arrays.unexplored_ids, scores.values)}


def select_subgoal_from_distances(distances: dict, graph: tm.TopoGraph, current_node: int):
    """Argmin of travel cost + estimated remaining meters; ties go to the lowest id."""
    if not distances:
        raise ValueError("no candidate nodes")
    costs = tm.travel_costs_from(graph, current_node)
    best, best_total = None, math.inf
    for nid in sorted(distances):
        total = costs.get(nid, math.inf) + distances[nid]
        if total < best_total:
            best, best_total = nid, total
    if best is None or not math.isfinite(best_total):
        raise ValueError("all candidates unreachable through the graph")
    cur = graph.nodes[current_node].pose
    rho, phi = cur.offset_to(graph.nodes[best].pose)
    return best, rho, phi


def select_subgoal(scores: dict, graph: tm.TopoGraph, current_node: int,
                   d_max: float = DEFAULT_D_MAX):
    distances = {nid: distance_from_score(s, d_max) for nid, s in scores.items()}
    return select_subgoal_from_distances(distances, graph, current_node)


@dataclass
class TrainResult:
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)


def _prepare(instance, d_max):
    arrays = graph_arrays(instance.graph)
    labels = instance.labels
    target = np.array([score_from_distance(labels[nid], d_max) for nid in arrays.unexplored_ids])
    return arrays, instance.goal_descriptor.values, target


def train_distance(model: DistanceModel, instances, val_instances=(), train_cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """MSE on unexplored-node scores, Adam, attention dropout active in training only.

    Instances need .graph, .goal_descriptor and .labels (meters per unexplored id).
    """
    instances = list(instances)
    if not instances:
        raise ValueError("empty training dataset")
    d_max = model.config.d_max
    prepared = [_prepare(inst, d_max) for inst in instances]
    prepared_val = [_prepare(inst, d_max) for inst in val_instances]
    rng = np.random.default_rng(train_cfg.seed)
    adam = nn.AdamState(model.params(), lr=train_cfg.lr)
    result = TrainResult()
    best_params, best_val = None, math.inf
    for _ in range(train_cfg.epochs):
        order = rng.permutation(len(prepared))
        total = 0.0
        for i in order:
            arrays, goal, target = prepared[i]
            adam.zero_grad()
            scores = model.forward(arrays, goal, training=True, rng=rng)
            loss = nn.mse(scores, target)
            loss.backward()
            adam.step()
            total += float(loss.values)
        result.train_losses.append(total / len(prepared))
        if prepared_val:
            vloss = evaluate_loss(model, prepared_val)
            result.val_losses.append(vloss)
            if vloss < best_val:  # keep the best held-out checkpoint
                best_val = vloss
                best_params = {k: p.values.copy() for k, p in model.params().items()}
    if best_params is not None:
        for k, p in model.params().items():
            p.values = best_params[k]
    return result


def evaluate_loss(model: DistanceModel, prepared) -> float:
    total = 0.0
    for arrays, goal, target in prepared:
        scores = model.forward(arrays, goal, training=False)
        total += float(nn.mse(scores, target).values)
    return total / len(prepared)


def constant_predictor_loss(instances, d_max: float = DEFAULT_D_MAX) -> float:
    """MSE of the single best constant score over every labeled node (a floor for learning)."""
    targets = []
    for inst in instances:
        targets.extend(score_from_distance(d, d_max) for d in inst.labels.values())
    targets = np.array(targets)
    return float(np.mean((targets - targets.mean()) ** 2))
