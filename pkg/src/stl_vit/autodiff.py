"""Reverse-mode automatic differentiation over dense numpy-backed tensors.

Ops build an implicit graph of `Tensor` nodes; `backward` replays it in
reverse insertion order. Scope is deliberately narrow: row-major arrays,
no broadcasting beyond the trailing-axis bias add in `linear`, float32 for
training and float64 for gradient checking.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ShapeError, ValidationError

_node_counter = itertools.count()
_grad_enabled = True

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

LAYERNORM_EPS = 1e-5


@contextmanager
def no_grad():
    """Disable graph recording; ops return detached constants."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense n-d array plus the bookkeeping needed for reverse mode.

    `data` is row-major; `grad` (filled by backward) always matches its
    shape. Tensors are immutable once created except for gradient
    accumulation during a single backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward_fn", "node_id")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward_fn=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self.parents = parents
        self._backward_fn = backward_fn
        self.node_id = next(_node_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # Convenience operators used all over the model code.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, backward_fn) -> Tensor:
    """Create an op result; records the graph only when grads can flow."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=tuple(parents),
                      backward_fn=backward_fn)
    return Tensor(data, requires_grad=False, op=op)


def _accumulate(t: Tensor, g: np.ndarray):
    # Incoming gradients are treated as read-only everywhere, so storing the
    # array without a defensive copy is safe (re-accumulation allocates).
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


@dataclass(frozen=True)
class GraphNode:
    """One record of the implicit computation graph."""

    node_id: int
    op: str
    parent_ids: tuple


@dataclass(frozen=True)
class Graph:
    """Ordered node records rooted at one tensor; insertion order is topological."""

    nodes: tuple

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        return cls(tuple(GraphNode(t.node_id, t.op, tuple(p.node_id for p in t.parents))
                         for t in _ordered_nodes(root)))


def _ordered_nodes(root: Tensor) -> list:
    """All nodes reachable from root, sorted by insertion id (a topological order)."""
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t.parents)
    nodes.sort(key=lambda t: t.node_id)
    return nodes


def backward(root: Tensor):
    """Accumulate gradients of a scalar root into every reachable tensor."""
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
    root.grad = np.ones_like(root.data)
    for node in reversed(_ordered_nodes(root)):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), "add", bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), "mul", bwd)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def bwd(g):
        _accumulate(a, g * c)

    return _make(a.data * c, (a,), "scale", bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, 2-d or stacked with identical leading batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-d")
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"matmul rank mismatch {a.data.ndim} vs {b.data.ndim}")
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.data.shape} vs {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} vs {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(np.matmul(a.data, b.data), (a, b), "matmul", bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b over the trailing axis; x may carry any leading dims."""
    x, w = as_tensor(x), as_tensor(w)
    if w.data.ndim != 2:
        raise ShapeError(f"linear weight must be 2-d, got {w.data.shape}")
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"linear: input dim {x.data.shape[-1]} != weight rows {w.data.shape[0]}")
    lead = x.data.shape[:-1]
    xf = x.data.reshape(-1, x.data.shape[-1])
    out = xf @ w.data
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (w.data.shape[1],):
            raise ShapeError(f"linear bias shape {b.data.shape} != ({w.data.shape[1]},)")
        out = out + b.data

    def bwd(g):
        gf = g.reshape(-1, w.data.shape[1])
        if x.requires_grad:
            _accumulate(x, (gf @ w.data.T).reshape(x.data.shape))
        if w.requires_grad:
            _accumulate(w, xf.T @ gf)
        if b is not None and b.requires_grad:
            _accumulate(b, gf.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out.reshape(lead + (w.data.shape[1],)), parents, "linear", bwd)


def transpose(x: Tensor, axes: tuple) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accumulate(x, np.transpose(g, inv))

    return _make(np.transpose(x.data, axes), (x,), "transpose", bwd)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)

    def bwd(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(x.data.reshape(shape), (x,), "reshape", bwd)


def concat(parts: list, axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            _accumulate(p, piece)

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), "concat", bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    x = as_tensor(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[idx] = g
            _accumulate(x, full)

    return _make(np.ascontiguousarray(x.data[idx]), (x,), "narrow", bwd)


def expand_batch(x: Tensor, batch: int) -> Tensor:
    """Tile a leading extent of 1 up to `batch`; backward sums it back."""
    x = as_tensor(x)
    if x.data.shape[0] != 1:
        raise ShapeError(f"expand_batch needs leading extent 1, got {x.data.shape}")

    def bwd(g):
        _accumulate(x, g.sum(axis=0, keepdims=True))

    tiled = np.broadcast_to(x.data, (batch,) + x.data.shape[1:]).copy()
    return _make(tiled, (x,), "expand_batch", bwd)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    x = as_tensor(x)
    n = x.data.shape[axis]

    def bwd(g):
        _accumulate(x, np.repeat(np.expand_dims(g / n, axis), n, axis=axis))

    return _make(x.data.mean(axis=axis), (x,), "mean_axis", bwd)


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def bwd(g):
        _accumulate(x, np.full_like(x.data, float(g)))

    return _make(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), "sum_all", bwd)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def gelu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        _accumulate(x, g * (cdf + x.data * pdf))

    return _make(x.data * cdf, (x,), "gelu", bwd)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(x, y * (g - dot))

    return _make(y, (x,), "softmax", bwd)


def log_softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse

    def bwd(g):
        y = np.exp(logp)
        _accumulate(x, g - y * g.sum(axis=-1, keepdims=True))

    return _make(logp, (x,), "log_softmax", bwd)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layernorm affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def bwd(g):
        gf = g.reshape(-1, d)
        if gain.requires_grad:
            _accumulate(gain, np.einsum("rd,rd->d", gf, xhat.reshape(-1, d)))
        if bias.requires_grad:
            _accumulate(bias, gf.sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (dxhat - m1 - xhat * m2))

    return _make(gain.data * xhat + bias.data, (x, gain, bias), "layernorm", bwd)


# ---------------------------------------------------------------------------
# fused attention cores (hand-written backwards keep the graph small and all
# intermediates contiguous; both are grad-checked against central differences)


def multi_head_attention(x: Tensor, wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor,
                         wv: Tensor, bv: Tensor, num_heads: int,
                         attn_out: list | None = None) -> Tensor:
    """Token self-attention: project q/k/v, softmax over tokens per head,
    aggregate values. Returns the (B, T, D) context before the output
    projection; appends the (B, H, T, T) attention probabilities to
    `attn_out` when given."""
    b, t, d = x.data.shape
    if d % num_heads != 0:
        raise ShapeError(f"num_heads {num_heads} must divide embed dim {d}")
    dh = d // num_heads
    inv = 1.0 / np.sqrt(dh)

    xf = x.data.reshape(-1, d)
    qf = xf @ wq.data + bq.data
    kf = xf @ wk.data + bk.data
    vf = xf @ wv.data + bv.data

    def to_heads(m):
        return np.ascontiguousarray(m.reshape(b, t, num_heads, dh).transpose(0, 2, 1, 3))

    qh = to_heads(qf) * inv
    kh = to_heads(kf)
    vh = to_heads(vf)
    scores = np.matmul(qh, kh.swapaxes(-1, -2))
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    attn = scores
    if attn_out is not None:
        attn_out.append(attn.copy())
    ctx = np.matmul(attn, vh)
    out = np.ascontiguousarray(ctx.transpose(0, 2, 1, 3)).reshape(b, t, d)

    def bwd(g):
        gh = np.ascontiguousarray(g.reshape(b, t, num_heads, dh).transpose(0, 2, 1, 3))
        d_attn = np.matmul(gh, vh.swapaxes(-1, -2))
        dvh = np.matmul(attn.swapaxes(-1, -2), gh)
        dscores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
        dqh = np.matmul(dscores, kh) * inv
        dkh = np.matmul(dscores.swapaxes(-1, -2), qh)

        def from_heads(m):
            return np.ascontiguousarray(m.transpose(0, 2, 1, 3)).reshape(-1, d)

        dqf, dkf, dvf = from_heads(dqh), from_heads(dkh), from_heads(dvh)
        if x.requires_grad:
            _accumulate(x, (dqf @ wq.data.T + dkf @ wk.data.T + dvf @ wv.data.T)
                        .reshape(b, t, d))
        for w_, b_, df in ((wq, bq, dqf), (wk, bk, dkf), (wv, bv, dvf)):
            if w_.requires_grad:
                _accumulate(w_, xf.T @ df)
            if b_.requires_grad:
                _accumulate(b_, df.sum(axis=0))

    return _make(out, (x, wq, bq, wk, bk, wv, bv), "multi_head_attention", bwd)


def channel_token_attention(x: Tensor, wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor,
                            wv: Tensor, bv: Tensor, attn_out: list | None = None) -> Tensor:
    """Channel-axis attention: q/k/v transposed to channel-major (B, D, T),
    keys softmaxed over the token dimension, cross-channel context matrix
    applied along the query path, result transposed back to (B, T, D)."""
    b, t, d = x.data.shape
    inv = 1.0 / np.sqrt(t)

    xf = x.data.reshape(-1, d)
    qf = xf @ wq.data + bq.data
    kf = xf @ wk.data + bk.data
    vf = xf @ wv.data + bv.data

    def channel_major(m):
        return np.ascontiguousarray(m.reshape(b, t, d).transpose(0, 2, 1))

    qt, kt, vt = channel_major(qf), channel_major(kf), channel_major(vf)
    weights = kt - kt.max(axis=-1, keepdims=True)
    np.exp(weights, out=weights)
    weights /= weights.sum(axis=-1, keepdims=True)          # (B, D, T), rows over tokens
    if attn_out is not None:
        attn_out.append(weights.copy())
    context = np.matmul(weights, vt.swapaxes(-1, -2)) * inv  # (B, D, D)
    out_t = np.matmul(context, qt)                           # (B, D, T)
    out = np.ascontiguousarray(out_t.transpose(0, 2, 1))

    def bwd(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 1))      # (B, D, T)
        dcontext = np.matmul(gt, qt.swapaxes(-1, -2))
        dqt = np.matmul(context.swapaxes(-1, -2), gt)
        dweights = np.matmul(dcontext, vt) * inv
        dvt = np.matmul(dcontext.swapaxes(-1, -2), weights) * inv
        dkt = weights * (dweights - (dweights * weights).sum(axis=-1, keepdims=True))

        def token_major(m):
            return np.ascontiguousarray(m.transpose(0, 2, 1)).reshape(-1, d)

        dqf, dkf, dvf = token_major(dqt), token_major(dkt), token_major(dvt)
        if x.requires_grad:
            _accumulate(x, (dqf @ wq.data.T + dkf @ wk.data.T + dvf @ wv.data.T)
                        .reshape(b, t, d))
        for w_, b_, df in ((wq, bq, dqf), (wk, bk, dkf), (wv, bv, dvf)):
            if w_.requires_grad:
                _accumulate(w_, xf.T @ df)
            if b_.requires_grad:
                _accumulate(b_, df.sum(axis=0))

    return _make(out, (x, wq, bq, wk, bk, wv, bv), "channel_token_attention", bwd)


# ---------------------------------------------------------------------------
# losses and targets


def one_hot(indices, num_classes: int) -> Tensor:
    """Rows of the identity selected by integer class indices."""
    idx = np.asarray(indices, dtype=np.int64)
    if num_classes < 2:
        raise ValidationError(f"one_hot needs num_classes >= 2, got {num_classes}")
    if idx.size and (idx.min() < 0 or idx.max() >= num_classes):
        raise ValidationError("one_hot: class index out of range")
    out = np.zeros(idx.shape + (num_classes,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return Tensor(out)


def smooth_labels(targets, epsilon: float) -> Tensor:
    """Mix one-hot rows with the uniform distribution by factor epsilon."""
    t = as_tensor(targets)
    if not 0.0 <= epsilon < 1.0:
        raise ValidationError(f"smoothing epsilon must be in [0, 1), got {epsilon}")
    rows = t.data.reshape(-1, t.data.shape[-1])
    if not (np.all((rows == 0.0) | (rows == 1.0)) and np.all(rows.sum(axis=-1) == 1.0)):
        raise ValidationError("smooth_labels expects one-hot rows")
    k = t.data.shape[-1]
    return Tensor(t.data * (1.0 - epsilon) + epsilon / k)


def blend_uniform(probs: np.ndarray, epsilon: float) -> np.ndarray:
    """Label smoothing generalized to arbitrary probability rows."""
    if not 0.0 <= epsilon < 1.0:
        raise ValidationError(f"smoothing epsilon must be in [0, 1), got {epsilon}")
    k = probs.shape[-1]
    return probs * (1.0 - epsilon) + epsilon / k


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over rows of -sum(target * log_softmax(logits)).

    `target` rows must be probability distributions; gradients flow to
    logits only ((softmax - target) / #rows).
    """
    logits = as_tensor(logits)
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    if logits.data.shape != tgt.shape:
        raise ShapeError(f"cross_entropy: logits {logits.data.shape} vs target {tgt.shape}")
    k = logits.data.shape[-1]
    if k < 2:
        raise ValidationError(f"cross_entropy needs K >= 2, got K={k}")
    row_sums = tgt.reshape(-1, k).sum(axis=-1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise ValidationError("cross_entropy: target rows must sum to 1 (+/- 1e-6)")
    rows = int(np.prod(logits.data.shape[:-1], dtype=np.int64)) if logits.data.ndim > 1 else 1

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    loss = -(tgt * logp).sum() / rows

    def bwd(g):
        _accumulate(logits, (np.exp(logp) - tgt) * (float(g) / rows))

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), "cross_entropy", bwd)


# ---------------------------------------------------------------------------
# stochastic regularizers


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Zero each element with probability `rate`, rescaling survivors."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return _make(x.data, (x,), "dropout_id", lambda g: _accumulate(x, g))
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.data.dtype)

    def bwd(g):
        _accumulate(x, g * keep)

    return _make(x.data * keep, (x,), "dropout", bwd)


def drop_path(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Stochastic depth: zero a whole residual branch per leading-axis sample."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"drop_path rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return _make(x.data, (x,), "drop_path_id", lambda g: _accumulate(x, g))
    shape = (x.data.shape[0],) + (1,) * (x.data.ndim - 1)
    keep = (rng.random(shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.data.dtype)

    def bwd(g):
        _accumulate(x, g * keep)

    return _make(x.data * keep, (x,), "drop_path", bwd)


# ---------------------------------------------------------------------------
# verification


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-8)
    coordinate-wise. `x` should be float64; float32 cannot reach the
    tolerances this is used with.
    """
    x.zero_grad()
    out = f(x)
    backward(out)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x).data)
        flat[i] = orig - eps
        lo = float(f(x).data)
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
