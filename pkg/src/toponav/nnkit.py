"""Minimal dense-tensor reverse-mode autodiff: just the ops the two networks need.

Everything is float64. Each op builds a node holding its parents and a
closure that maps the upstream gradient to parent gradients; backward()
walks the graph in reverse topological order from a scalar root.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

CHECKPOINT_MAGIC = b"NRNSM1"


class ShapeMismatchError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "parents", "grad_fn", "name")

    def __init__(self, values, requires_grad=False, parents=(), grad_fn=None, name=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.grad_fn = grad_fn
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    def detach(self):
        return Tensor(self.values.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        self.grad = g if self.grad is None else self.grad + g

    def backward(self):
        if self.values.size != 1:
            raise ShapeMismatchError(f"backward() needs a scalar, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.values)
        for node in reversed(order):
            if node.grad_fn is None or node.grad is None:
                continue
            for parent, g in zip(node.parents, node.grad_fn(node.grad)):
                if g is not None:
                    parent._accumulate(g)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'set' if self.grad is not None else 'none'})"


def parameter(values, name=None):
    return Tensor(values, requires_grad=True, name=name)


def constant(values):
    return Tensor(values)


def _check(cond, op, *shapes):
    if not cond:
        raise ShapeMismatchError(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, "add", a.shape, b.shape)
    return Tensor(a.values + b.values, parents=(a, b), grad_fn=lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, "sub", a.shape, b.shape)
    return Tensor(a.values - b.values, parents=(a, b), grad_fn=lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    _check(a.shape == b.shape, "hadamard", a.shape, b.shape)
    return Tensor(a.values * b.values, parents=(a, b),
                  grad_fn=lambda g: (g * b.values, g * a.values))


def scale(a: Tensor, k: float) -> Tensor:
    return Tensor(a.values * k, parents=(a,), grad_fn=lambda g: (g * k,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.values.ndim == 2 and b.values.ndim == 2 and a.shape[1] == b.shape[0],
           "matmul", a.shape, b.shape)
    return Tensor(a.values @ b.values, parents=(a, b),
                  grad_fn=lambda g: (g @ b.values.T, a.values.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b broadcast over rows)."""
    _check(x.values.ndim == 2 and w.values.ndim == 2 and x.shape[1] == w.shape[0],
           "linear", x.shape, w.shape)
    out = x.values @ w.values
    if b is None:
        return Tensor(out, parents=(x, w), grad_fn=lambda g: (g @ w.values.T, x.values.T @ g))
    _check(b.shape == (w.shape[1],), "linear bias", b.shape, w.shape)
    return Tensor(out + b.values, parents=(x, w, b),
                  grad_fn=lambda g: (g @ w.values.T, x.values.T @ g, g.sum(axis=0)))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return Tensor(x.values * mask, parents=(x,), grad_fn=lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.values > 0, 1.0, slope)
    return Tensor(x.values * factor, parents=(x,), grad_fn=lambda g: (g * factor,))


def elu(x: Tensor) -> Tensor:
    neg = np.exp(np.minimum(x.values, 0.0)) - 1.0
    out = np.where(x.values > 0, x.values, neg)
    factor = np.where(x.values > 0, 1.0, neg + 1.0)
    return Tensor(out, parents=(x,), grad_fn=lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    v = x.values
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return Tensor(out, parents=(x,), grad_fn=lambda g: (g * out * (1.0 - out),))


def dropout(x: Tensor, rate: float, rng, training: bool) -> Tensor:
    """Inverted dropout; exact identity when rate is 0 or not training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return Tensor(x.values, parents=(x,), grad_fn=lambda g: (g,))
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor(x.values * keep, parents=(x,), grad_fn=lambda g: (g * keep,))


def concat(xs, axis: int = 0) -> Tensor:
    xs = list(xs)
    out = np.concatenate([t.values for t in xs], axis=axis)
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, parents=tuple(xs), grad_fn=grad_fn)


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {x.shape[0]} rows")

    def grad_fn(g):
        out = np.zeros_like(x.values)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(x.values[idx], parents=(x,), grad_fn=grad_fn)


def scatter_rows(x: Tensor, idx, num_rows: int) -> Tensor:
    """Place rows of x at positions idx in a zero matrix of num_rows rows."""
    idx = np.asarray(idx, dtype=np.int64)
    _check(x.shape[0] == len(idx), "scatter_rows", x.shape, (len(idx),))
    out = np.zeros((num_rows, x.shape[1]))
    out[idx] = x.values
    return Tensor(out, parents=(x,), grad_fn=lambda g: (g[idx],))


def broadcast_row(x: Tensor, n: int) -> Tensor:
    """Tile a (1, d) row n times; gradient sums back over the copies."""
    _check(x.values.ndim == 2 and x.shape[0] == 1, "broadcast_row", x.shape)
    return Tensor(np.repeat(x.values, n, axis=0), parents=(x,),
                  grad_fn=lambda g: (g.sum(axis=0, keepdims=True),))


def segment_sum(x: Tensor, segments, num_segments: int) -> Tensor:
    """Sum rows of x into num_segments buckets given per-row segment ids."""
    segments = np.asarray(segments, dtype=np.int64)
    _check(x.shape[0] == len(segments), "segment_sum", x.shape, (len(segments),))
    out = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(out, segments, x.values)
    return Tensor(out, parents=(x,), grad_fn=lambda g: (g[segments],))


def neighborhood_softmax(scores: Tensor, segments, num_segments: int) -> Tensor:
    """Softmax over groups of entries sharing a segment id (per-destination attention)."""
    segments = np.asarray(segments, dtype=np.int64)
    _check(scores.values.ndim == 1 and scores.shape[0] == len(segments),
           "neighborhood_softmax", scores.shape, (len(segments),))
    v = scores.values
    seg_max = np.full(num_segments, -np.inf)
    np.maximum.at(seg_max, segments, v)
    e = np.exp(v - seg_max[segments])
    seg_sum = np.zeros(num_segments)
    np.add.at(seg_sum, segments, e)
    alpha = e / seg_sum[segments]

    def grad_fn(g):
        dot = np.zeros(num_segments)
        np.add.at(dot, segments, g * alpha)
        return (alpha * (g - dot[segments]),)

    return Tensor(alpha, parents=(scores,), grad_fn=grad_fn)


def reduce_sum(x: Tensor) -> Tensor:
    return Tensor(np.array(x.values.sum()), parents=(x,),
                  grad_fn=lambda g: (np.ones_like(x.values) * g,))


def reduce_mean(x: Tensor) -> Tensor:
    n = x.values.size
    return Tensor(np.array(x.values.mean()), parents=(x,),
                  grad_fn=lambda g: (np.ones_like(x.values) * (g / n),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor(x.values.reshape(shape), parents=(x,), grad_fn=lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _resolve_mask(pred: Tensor, mask):
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        _check(mask.shape == pred.shape, "loss mask", mask.shape, pred.shape)
    if not mask.any():
        raise ValueError("loss mask selects no elements")
    return mask


def mse(pred: Tensor, target, mask=None) -> Tensor:
    """Mean squared error over unmasked elements; masked slots get zero gradient."""
    target = np.asarray(target, dtype=np.float64)
    _check(target.shape == pred.shape, "mse", target.shape, pred.shape)
    mask = _resolve_mask(pred, mask)
    n = mask.sum()
    diff = np.where(mask, pred.values - target, 0.0)
    out = np.array((diff ** 2).sum() / n)
    return Tensor(out, parents=(pred,), grad_fn=lambda g: (g * 2.0 * diff / n,))


def smooth_l1(pred: Tensor, target, mask=None, beta: float = 1.0) -> Tensor:
    """Huber-style loss: 0.5 d^2 / beta inside |d| < beta, |d| - 0.5 beta outside."""
    target = np.asarray(target, dtype=np.float64)
    _check(target.shape == pred.shape, "smooth_l1", target.shape, pred.shape)
    mask = _resolve_mask(pred, mask)
    n = mask.sum()
    diff = np.where(mask, pred.values - target, 0.0)
    a = np.abs(diff)
    per = np.where(a < beta, 0.5 * diff ** 2 / beta, a - 0.5 * beta)
    grad = np.where(a < beta, diff / beta, np.sign(diff))
    out = np.array(per.sum() / n)
    return Tensor(out, parents=(pred,), grad_fn=lambda g: (g * grad * np.where(mask, 1.0, 0.0) / n,))


def bce(prob: Tensor, label, mask=None) -> Tensor:
    """Binary cross entropy on probabilities (inputs already through a sigmoid)."""
    label = np.asarray(label, dtype=np.float64)
    _check(label.shape == prob.shape, "bce", label.shape, prob.shape)
    mask = _resolve_mask(prob, mask)
    n = mask.sum()
    p = np.clip(prob.values, 1e-12, 1.0 - 1e-12)
    per = np.where(mask, -(label * np.log(p) + (1.0 - label) * np.log1p(-p)), 0.0)
    grad = np.where(mask, (p - label) / (p * (1.0 - p)), 0.0)
    out = np.array(per.sum() / n)
    return Tensor(out, parents=(prob,), grad_fn=lambda g: (g * grad / n,))


# ---------------------------------------------------------------------------
# graph attention layer with edge features
# ---------------------------------------------------------------------------


class GatEdgeLayer:
    """Single-head graph attention over directed edges, with edge-feature attention.

    Per destination i and incoming edge (j -> i):
        score = leaky_relu(a . [W h_j ; W h_i ; U u_ji], 0.2)
        alpha = softmax over incoming edges of i
        h'_i  = elu(sum_j alpha * W h_j)
    Nodes with no incoming edges keep a zero output row.
    """

    def __init__(self, in_dim, out_dim, edge_in_dim=16, edge_dim=16, dropout_rate=0.0, rng=None, prefix="gat"):
        rng = rng if rng is not None else np.random.default_rng(0)
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError("dropout_rate outside [0, 1)")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.edge_in_dim = edge_in_dim
        self.edge_dim = edge_dim
        self.dropout_rate = dropout_rate
        self.slope = 0.2
        self.w = parameter(xavier_uniform((in_dim, out_dim), rng), f"{prefix}.w")
        self.u = parameter(xavier_uniform((edge_in_dim, edge_dim), rng), f"{prefix}.u")
        self.a = parameter(xavier_uniform((2 * out_dim + edge_dim, 1), rng), f"{prefix}.a")

    def params(self):
        return {t.name: t for t in (self.w, self.u, self.a)}

    def forward(self, h: Tensor, edge_src, edge_dst, edge_feats: Tensor, training=False, rng=None) -> Tensor:
        n = h.shape[0]
        edge_src = np.asarray(edge_src, dtype=np.int64)
        edge_dst = np.asarray(edge_dst, dtype=np.int64)
        if edge_src.size == 0:
            raise ValueError("gat forward needs at least one edge")
        if edge_src.max() >= n or edge_dst.max() >= n:
            raise IndexError("edge index out of range")
        _check(edge_feats.shape == (len(edge_src), self.edge_in_dim),
               "gat edge_feats", edge_feats.shape, (len(edge_src), self.edge_in_dim))
        wh = matmul(h, self.w)
        ue = matmul(edge_feats, self.u)
        cat = concat([gather_rows(wh, edge_src), gather_rows(wh, edge_dst), ue], axis=1)
        scores = reshape(leaky_relu(matmul(cat, self.a), self.slope), (len(edge_src),))
        alpha = neighborhood_softmax(scores, edge_dst, n)
        if training and self.dropout_rate > 0.0:
            alpha = dropout(alpha, self.dropout_rate, rng if rng is not None else np.random.default_rng(0), True)
        weighted = hadamard(gather_rows(wh, edge_src), broadcast_col(alpha, self.out_dim))
        return elu(segment_sum(weighted, edge_dst, n))


def broadcast_col(x: Tensor, d: int) -> Tensor:
    """(n,) -> (n, d) by repeating the vector as columns; gradient sums back."""
    _check(x.values.ndim == 1, "broadcast_col", x.shape)
    return Tensor(np.repeat(x.values[:, None], d, axis=1), parents=(x,),
                  grad_fn=lambda g: (g.sum(axis=1),))


# ---------------------------------------------------------------------------
# init and optimizer
# ---------------------------------------------------------------------------


def xavier_uniform(shape, rng):
    fan_in, fan_out = (shape[0], shape[-1]) if len(shape) > 1 else (shape[0], shape[0])
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class AdamState:
    """Standard Adam with bias correction, one moment pair per named parameter."""

    def __init__(self, params: dict, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.values) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in self.params.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.values)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            mhat = self.m[k] / (1.0 - self.beta1 ** t)
            vhat = self.v[k] / (1.0 - self.beta2 ** t)
            p.values -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def adam_step(params: dict, state: AdamState):
    """One optimizer step using the gradients currently stored on the tensors."""
    if set(params) != set(state.params):
        raise ValueError("adam_step: parameter set does not match state")
    state.step()


# ---------------------------------------------------------------------------
# checkpoints (magic NRNSM1), little-endian:
#   6s magic | u32 config_len | config JSON (utf-8)
#   u32 n_params | per param: u16 name_len, name, u8 ndim, u32*ndim dims, f64 data
# ---------------------------------------------------------------------------


def save_checkpoint(path, config: dict, params: dict) -> None:
    buf = io.BytesIO()
    cfg = json.dumps(config, sort_keys=True).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = params[name].values if isinstance(params[name], Tensor) else np.asarray(params[name])
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns (config dict, {name: float64 array})."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 10 or data[:6] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
    off = 6
    try:
        (cfg_len,) = struct.unpack_from("<I", data, off)
        off += 4
        config = json.loads(data[off:off + cfg_len].decode())
        off += cfg_len
        (n_params,) = struct.unpack_from("<I", data, off)
        off += 4
        params = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + name_len].decode()
            off += name_len
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).copy()
            off += 8 * count
            params[name] = arr
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return config, params


def restore_params(model_params: dict, config: dict, loaded_config: dict, loaded: dict, path="checkpoint"):
    """Copy loaded arrays into live parameters, rejecting any config or shape drift."""
    if loaded_config != config:
        raise CheckpointError(f"{path}: config mismatch: saved {loaded_config}, expected {config}")
    if set(loaded) != set(model_params):
        raise CheckpointError(f"{path}: parameter names differ")
    for name, tensor in model_params.items():
        if loaded[name].shape != tensor.values.shape:
            raise CheckpointError(f"{path}: shape mismatch on {name}")
        tensor.values = loaded[name]
