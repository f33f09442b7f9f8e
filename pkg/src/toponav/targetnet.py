"""Goal-within-sight prediction from a (current view, goal view) descriptor pair.

Both descriptors pass through one shared linear+ReLU projection, fuse by
hadamard product, then a trunk feeds three scalar heads: distance (meters),
rotation (degrees), and a sigmoid switch probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import nnkit as nn
from .simworld import ViewDescriptor, wrap_signed


@dataclass(frozen=True)
class TargetModelConfig:
    descriptor_dim: int = 64
    trunk_dropout: float = 0.25


# the rotation head regresses degrees/PHI_SCALE so desk-scale wrap-around noise
# (reversal pairs carry labels near +-180) stays inside smooth-L1's quadratic
# zone instead of flooding the shared trunk with constant-magnitude gradients;
# predictions are re-scaled to degrees at the interface
PHI_SCALE = 45.0


@dataclass(frozen=True)
class TargetTrainConfig:
    epochs: int = 15
    lr: float = 1e-4
    batch_size: int = 32
    seed: int = 0


@dataclass(frozen=True)
class TargetPrediction:
    beta: float   # goal-within-sight probability
    rho: float    # meters
    phi: float    # degrees in (-180, 180]


class TargetModel:
    def __init__(self, config: TargetModelConfig = TargetModelConfig(), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        d = config.descriptor_dim
        half = d // 2
        # unit-norm descriptors have O(1/sqrt(D)) components; the hadamard fusion
        # squares that shrinkage, so inputs are pre-scaled to O(1) per component
        self.input_gain = float(np.sqrt(d))
        self.proj_w = nn.parameter(nn.xavier_uniform((d, d), rng), "proj.w")
        self.proj_b = nn.parameter(np.zeros(d), "proj.b")
        self.trunk_w = nn.parameter(nn.xavier_uniform((d, half), rng), "trunk.w")
        self.trunk_b = nn.parameter(np.zeros(half), "trunk.b")
        self.dist_w = nn.parameter(nn.xavier_uniform((half, 1), rng), "head.dist.w")
        self.dist_b = nn.parameter(np.zeros(1), "head.dist.b")
        self.rot_w = nn.parameter(nn.xavier_uniform((half, 1), rng), "head.rot.w")
        self.rot_b = nn.parameter(np.zeros(1), "head.rot.b")
        self.switch_w = nn.parameter(nn.xavier_uniform((half, 1), rng), "head.switch.w")
        self.switch_b = nn.parameter(np.zeros(1), "head.switch.b")

    def params(self):
        return {t.name: t for t in (self.proj_w, self.proj_b, self.trunk_w, self.trunk_b,
                                    self.dist_w, self.dist_b, self.rot_w, self.rot_b,
                                    self.switch_w, self.switch_b)}

    def forward(self, current: np.ndarray, goal: np.ndarray, training=False, rng=None):
        """Batched forward; rows pair up. Returns (switch_prob, rho, phi) tensors of shape (B,)."""
        a = nn.relu(nn.linear(nn.constant(current * self.input_gain), self.proj_w, self.proj_b))
        b = nn.relu(nn.linear(nn.constant(goal * self.input_gain), self.proj_w, self.proj_b))
        fused = nn.hadamard(a, b)
        trunk = nn.relu(nn.linear(fused, self.trunk_w, self.trunk_b))
        trunk = nn.dropout(trunk, self.config.trunk_dropout,
                           rng if rng is not None else np.random.default_rng(0), training)
        flat = lambda t: nn.reshape(t, (-1,))
        switch = flat(nn.sigmoid(nn.linear(trunk, self.switch_w, self.switch_b)))
        rho = flat(nn.linear(trunk, self.dist_w, self.dist_b))
        phi = flat(nn.linear(trunk, self.rot_w, self.rot_b))
        return switch, rho, phi

    def config_dict(self):
        return asdict(self.config)

    def save(self, path):
        nn.save_checkpoint(path, self.config_dict(), self.params())

    @classmethod
    def load(cls, path, config: TargetModelConfig | None = None) -> "TargetModel":
        saved_cfg, arrays = nn.load_checkpoint(path)
        model = cls(config if config is not None else TargetModelConfig(**saved_cfg))
        nn.restore_params(model.params(), model.config_dict(), saved_cfg, arrays, path)
        return model


def predict_target(model: TargetModel, current: ViewDescriptor, goal: ViewDescriptor) -> TargetPrediction:
    switch, rho, phi = model.forward(current.values[None, :], goal.values[None, :], training=False)
    return TargetPrediction(beta=float(switch.values[0]), rho=float(rho.values[0]),
                            phi=wrap_signed(float(phi.values[0]) * PHI_SCALE))


@dataclass
class TargetTrainResult:
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    switch_accuracy: float = float("nan")
    majority_baseline: float = float("nan")
    median_rho_error: float = float("nan")
    median_phi_error: float = float("nan")


def _pair_arrays(pairs):
    cur = np.stack([p.descriptor_a.values for p in pairs])
    goal = np.stack([p.descriptor_b.values for p in pairs])
    labels = np.array([1.0 if p.label else 0.0 for p in pairs])
    pos = labels > 0.5
    rho = np.array([p.rho if p.label else 0.0 for p in pairs])
    phi = np.array([wrap_signed(p.phi) if p.label else 0.0 for p in pairs])  # degrees
    return cur, goal, labels, pos, rho, phi


def _batch_loss(model, batch_arrays, training, rng):
    cur, goal, labels, pos, rho_t, phi_t = batch_arrays
    switch, rho, phi = model.forward(cur, goal, training=training, rng=rng)
    loss = nn.bce(switch, labels)
    if pos.any():  # negatives carry no geometric label and must not leak gradient
        loss = nn.add(loss, nn.smooth_l1(rho, rho_t, mask=pos))
        loss = nn.add(loss, nn.smooth_l1(phi, phi_t / PHI_SCALE, mask=pos))
    return loss, switch


def train_target(model: TargetModel, pairs, val_pairs=(), train_cfg: TargetTrainConfig = TargetTrainConfig()) -> TargetTrainResult:
    """BCE on the switch everywhere, smooth-L1 on (rho, phi) for positive pairs only."""
    pairs = list(pairs)
    val_pairs = list(val_pairs)
    n_pos = sum(1 for p in pairs if p.label)
    if n_pos == 0 or n_pos == len(pairs):
        raise ValueError("training needs both positive and negative pairs")
    rng = np.random.default_rng(train_cfg.seed)
    adam = nn.AdamState(model.params(), lr=train_cfg.lr)
    result = TargetTrainResult()
    val_arrays = _pair_arrays(val_pairs) if val_pairs else None
    best_params, best_acc = None, -1.0
    for _ in range(train_cfg.epochs):
        order = rng.permutation(len(pairs))
        total, batches = 0.0, 0
        for start in range(0, len(order), train_cfg.batch_size):
            batch = [pairs[i] for i in order[start:start + train_cfg.batch_size]]
            adam.zero_grad()
            loss, _ = _batch_loss(model, _pair_arrays(batch), True, rng)
            loss.backward()
            adam.step()
            total += float(loss.values)
            batches += 1
        result.train_losses.append(total / batches)
        if val_arrays is not None:
            vloss, vswitch = _batch_loss(model, val_arrays, False, rng)
            result.val_losses.append(float(vloss.values))
            acc = float(((vswitch.values > 0.5) == (val_arrays[2] > 0.5)).mean())
            if acc > best_acc:  # keep the checkpoint with the best held-out accuracy
                best_acc = acc
                best_params = {k: p.values.copy() for k, p in model.params().items()}
    if best_params is not None:
        for k, p in model.params().items():
            p.values = best_params[k]
    held_out = val_pairs if val_pairs else pairs
    metrics = evaluate_target(model, held_out)
    result.switch_accuracy = metrics["switch_accuracy"]
    result.majority_baseline = metrics["majority_baseline"]
    result.median_rho_error = metrics["median_rho_error"]
    result.median_phi_error = metrics["median_phi_error"]
    return result


def evaluate_target(model: TargetModel, pairs) -> dict:
    cur, goal, labels, pos, rho_t, phi_t = _pair_arrays(list(pairs))
    switch, rho, phi = model.forward(cur, goal, training=False)
    predicted = switch.values > 0.5
    accuracy = float((predicted == (labels > 0.5)).mean())
    majority = float(max(labels.mean(), 1.0 - labels.mean()))
    if pos.any():
        rho_err = float(np.median(np.abs(rho.values[pos] - rho_t[pos])))
        phi_deg = phi.values[pos] * PHI_SCALE
        phi_err = float(np.median(np.abs([wrap_signed(d) for d in (phi_deg - phi_t[pos])])))
    else:  # pragma: no cover
        rho_err = phi_err = float("nan")
    return {
        "switch_accuracy": accuracy,
        "majority_baseline": majority,
        "median_rho_error": rho_err,
        "median_phi_error": phi_err,
    }
