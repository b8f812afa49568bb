"""Minimal reverse-mode tensor engine.

Every array in the pipeline is a float64 ``Tensor``. Operations record
themselves on the active ``Tape`` (a thread-local, append-only list of
nodes); ``Tape.backward`` replays the nodes in reverse append order and
accumulates vector-Jacobian products into ``Tensor.grad``. Tensors that
take part in a recorded computation must not be mutated in place.

The engine is deliberately small: it supports exactly the primitives the
detection pipeline needs (batched matmul, softmax, activations, bilinear
map sampling, concatenation, axis reductions) plus a central
finite-difference checker used by the test suites.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

_local = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tape:
    """Append-only record of differentiable operations.

    One logical thread builds and differentiates a tape; use as a context
    manager so nested tapes restore the previous one on exit.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        self._outer = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._outer
        return False

    def _append(self, node: "_Node"):
        self.nodes.append(node)

    def leaves(self) -> list["Tensor"]:
        """Gradient-requiring tensors consumed by the tape but produced
        outside it, in first-use order."""
        produced = {id(n.out) for n in self.nodes}
        seen: set[int] = set()
        out = []
        for n in self.nodes:
            for t in n.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out

    def backward(self, loss: "Tensor"):
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf.

        Existing ``.grad`` values are overwritten, never added to, so two
        losses on the same tape can be differentiated independently.
        Leaves the loss does not depend on receive zero gradients.
        """
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = gi if acc is None else acc + gi
        for leaf in self.leaves():
            g = grads.get(id(leaf))
            leaf.grad = np.zeros_like(leaf.data) if g is None else g


class _Node:
    __slots__ = ("name", "inputs", "out", "vjp")

    def __init__(self, name, inputs, out, vjp):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


class Tensor:
    """Dense float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(name: str, inputs: Sequence[Tensor], data: np.ndarray,
            vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._append(_Node(name, tuple(inputs), out, vjp))
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _record("add", (a, b), data,
                   lambda g: (_sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    return _record("sub", (a, b), data,
                   lambda g: (_sum_to_shape(g, a.shape), _sum_to_shape(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return _record("mul", (a, b), data,
                   lambda g: (_sum_to_shape(g * b.data, a.shape),
                              _sum_to_shape(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data
    return _record("div", (a, b), data,
                   lambda g: (_sum_to_shape(g / b.data, a.shape),
                              _sum_to_shape(-g * a.data / (b.data * b.data), b.shape)))


def power(x: Tensor, p: float) -> Tensor:
    """x**p with scalar exponent. Non-integer p requires x > 0."""
    data = x.data ** p
    return _record("power", (x,), data,
                   lambda g: (g * p * x.data ** (p - 1.0),))


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)
    return _record("exp", (x,), data, lambda g: (g * data,))


def log(x: Tensor) -> Tensor:
    """Natural log; domain x > 0."""
    data = np.log(x.data)
    return _record("log", (x,), data, lambda g: (g / x.data,))


def absolute(x: Tensor) -> Tensor:
    data = np.abs(x.data)
    sign = np.sign(x.data)
    return _record("abs", (x,), data, lambda g: (g * sign,))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to the first operand."""
    data = np.maximum(a.data, b.data)
    mask = (a.data >= b.data).astype(np.float64)
    return _record("maximum", (a, b), data,
                   lambda g: (_sum_to_shape(g * mask, a.shape),
                              _sum_to_shape(g * (1.0 - mask), b.shape)))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    data = np.minimum(a.data, b.data)
    mask = (a.data <= b.data).astype(np.float64)
    return _record("minimum", (a, b), data,
                   lambda g: (_sum_to_shape(g * mask, a.shape),
                              _sum_to_shape(g * (1.0 - mask), b.shape)))


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0.0),
                   lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    data = _sigmoid(x.data)
    return _record("sigmoid", (x,), data, lambda g: (g * data * (1.0 - data),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)), computed without overflow for large |x|."""
    data = np.where(x.data >= 0, -np.log1p(np.exp(-np.abs(x.data))),
                    x.data - np.log1p(np.exp(-np.abs(x.data))))
    return _record("log_sigmoid", (x,), data, lambda g: (g * _sigmoid(-x.data),))


def hard_sigmoid(x: Tensor) -> Tensor:
    """clamp(x/6 + 0.5, 0, 1); subgradient 1/6 strictly inside, 0 outside."""
    data = np.clip(x.data / 6.0 + 0.5, 0.0, 1.0)
    inside = (np.abs(x.data) < 3.0).astype(np.float64) / 6.0
    return _record("hard_sigmoid", (x,), data, lambda g: (g * inside,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along one axis."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _record("softmax", (x,), data, vjp)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return _record("reshape", (x,), x.data.reshape(shape),
                   lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (x,), x.data.transpose(axes),
                   lambda g: (g.transpose(inv),))


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice/int/ellipsis) indexing."""
    data = x.data[key]

    def vjp(g):
        buf = np.zeros_like(x.data)
        buf[key] = g
        return (buf,)

    return _record("getitem", (x,), data, vjp)


def take_pairs(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather x[rows[i], cols[i]] along the first two axes; duplicates
    accumulate in the backward scatter."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    data = x.data[rows, cols]

    def vjp(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, (rows, cols), g)
        return (buf,)

    return _record("take_pairs", (x,), data, vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tensors, data, vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record("stack", tensors, data, vjp)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", (x,), data, vjp)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return reduce_sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reduce_max(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the subgradient goes to the first argmax."""
    data = x.data.max(axis=axis, keepdims=keepdims)
    idx = x.data.argmax(axis=axis)
    onehot = np.zeros_like(x.data)
    np.put_along_axis(onehot, np.expand_dims(idx, axis), 1.0, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (onehot * g,)

    return _record("max", (x,), data, vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_sum_to_shape(ga, a.shape), _sum_to_shape(gb, b.shape))

    return _record("matmul", (a, b), data, vjp)


# ---------------------------------------------------------------------------
# bilinear map sampling


def bilinear_sample(feature_map: Tensor, points: Tensor) -> Tensor:
    """Read a feature map at fractional positions.

    ``feature_map`` is (H, W, C) or (B, H, W, C); ``points`` is (P, 2) or
    (B, P, 2) holding normalized (x, y) in [0, 1]^2. Unbatched points
    against batched maps are read at the same positions in every batch
    element. A normalized x maps to pixel column x*W - 0.5, so grid
    centers are hit exactly. Out-of-bounds neighbors contribute zero
    (zero padding). Differentiable in both the map and the points.
    """
    batched = feature_map.ndim == 4
    if not batched and feature_map.ndim != 3:
        raise ShapeError(f"feature map must be (H,W,C) or (B,H,W,C), got {feature_map.shape}")
    if points.shape[-1] != 2:
        raise ShapeError(f"points must end in 2 coordinates, got {points.shape}")

    shared_points = points.ndim == 2
    if not shared_points and (points.ndim != 3 or not batched):
        raise ShapeError(f"points shape {points.shape} does not pair with map {feature_map.shape}")
    fmap = feature_map.data if batched else feature_map.data[None]
    pts = np.broadcast_to(points.data, fmap.shape[:1] + points.shape) \
        if shared_points else points.data
    B, H, W, C = fmap.shape
    P = pts.shape[1]

    px = pts[..., 0] * W - 0.5
    py = pts[..., 1] * H - 0.5
    x0 = np.floor(px).astype(np.intp)
    y0 = np.floor(py).astype(np.intp)
    fx = px - x0
    fy = py - y0

    flat = fmap.reshape(B, H * W, C)
    bidx = np.arange(B, dtype=np.intp)[:, None]

    corner_vals = []
    corner_idx = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        cx = x0 + dx
        cy = y0 + dy
        valid = (cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)
        lin = np.where(valid, cy * W + cx, 0)
        vals = flat[bidx, lin] * valid[..., None]
        corner_vals.append(vals)
        corner_idx.append((lin, valid))
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    weights = (w00, w01, w10, w11)
    data = sum(w[..., None] * v for w, v in zip(weights, corner_vals))

    # dw/dfx and dw/dfy per corner, in the same order as above
    dwx = (-(1 - fy), (1 - fy), -fy, fy)
    dwy = (-(1 - fx), -fx, (1 - fx), fx)

    def vjp(g):
        g3 = g.reshape(B, P, C)
        gmap = np.zeros((B, H * W, C))
        gx = np.zeros((B, P))
        gy = np.zeros((B, P))
        for w, vals, (lin, valid), dx_, dy_ in zip(weights, corner_vals, corner_idx, dwx, dwy):
            contrib = (w * valid)[..., None] * g3
            np.add.at(gmap, (bidx, lin), contrib)
            gv = (g3 * vals).sum(axis=-1)
            gx += dx_ * gv
            gy += dy_ * gv
        gmap = gmap.reshape(B, H, W, C)
        gpts = np.stack([gx * W, gy * H], axis=-1)
        if not batched:
            gmap = gmap[0]
        if shared_points:
            gpts = gpts.sum(axis=0) if batched else gpts[0]
        return (gmap, gpts)

    out_data = data if batched else data[0]
    return _record("bilinear_sample", (feature_map, points), out_data, vjp)


# ---------------------------------------------------------------------------
# layers


class Parameter(Tensor):
    """A named leaf tensor that optimizers update."""

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)


class Linear:
    """y = x @ W + b over the trailing axis."""

    def __init__(self, w: Parameter, b: Parameter):
        self.w = w
        self.b = b

    def __call__(self, x: Tensor) -> Tensor:
        d_in, _ = self.w.shape
        lead = x.shape[:-1]
        flat = reshape(x, (-1, d_in)) if x.ndim != 2 else x
        y = matmul(flat, self.w) + self.b
        if x.ndim != 2:
            y = reshape(y, lead + (self.w.shape[1],))
        return y

    def params(self) -> list[Parameter]:
        return [self.w, self.b]


class LayerNorm:
    """Normalization over the trailing axis with learnable gain and bias."""

    EPS = 1e-5

    def __init__(self, gain: Parameter, bias: Parameter):
        self.gain = gain
        self.bias = bias

    def __call__(self, x: Tensor) -> Tensor:
        mu = reduce_mean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = reduce_mean(centered * centered, axis=-1, keepdims=True)
        inv = power(var + _as_tensor(self.EPS), -0.5)
        return centered * inv * self.gain + self.bias

    def params(self) -> list[Parameter]:
        return [self.gain, self.bias]


class MultiHeadAttention:
    """Scaled dot-product attention over pure projection matrices.

    Queries are (..., Nq, D) and keys/values (..., Nk, D) with matching
    leading axes; d_k is D / heads. Projections carry no biases: a key
    bias would shift every logit of a query row equally, a direction
    softmax ignores. The attention weights of the latest call are kept
    on ``last_weights`` for inspection by tests.
    """

    def __init__(self, heads: int, wq: Parameter, wk: Parameter,
                 wv: Parameter, wo: Parameter):
        d = wq.shape[1]
        if d % heads != 0:
            raise ConfigError(f"model dim {d} not divisible by {heads} heads")
        self.heads = heads
        self.d_head = d // heads
        self.wq, self.wk, self.wv, self.wo = wq, wk, wv, wo
        self.last_weights: np.ndarray | None = None

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor) -> Tensor:
        h, dk = self.heads, self.d_head
        q = self._split(matmul(q_in, self.wq), h, dk)
        k = self._split(matmul(k_in, self.wk), h, dk)
        v = self._split(matmul(v_in, self.wv), h, dk)
        logits = matmul(q, transpose(k, _swap_last_two(k.ndim))) * (1.0 / math.sqrt(dk))
        att = softmax(logits, axis=-1)
        self.last_weights = att.data
        mixed = matmul(att, v)  # (..., h, Nq, dk)
        merged = self._merge(mixed)
        return matmul(merged, self.wo)

    @staticmethod
    def _split(x: Tensor, h: int, dk: int) -> Tensor:
        # (..., N, D) -> (..., h, N, dk)
        lead = x.shape[:-2]
        n = x.shape[-2]
        y = reshape(x, lead + (n, h, dk))
        axes = tuple(range(len(lead))) + (x.ndim - 2 + 1, x.ndim - 2, x.ndim)
        return transpose(y, axes)

    @staticmethod
    def _merge(x: Tensor) -> Tensor:
        # (..., h, N, dk) -> (..., N, h*dk)
        lead = x.shape[:-3]
        h, n, dk = x.shape[-3:]
        axes = tuple(range(len(lead))) + (x.ndim - 2, x.ndim - 3, x.ndim - 1)
        return reshape(transpose(x, axes), lead + (n, h * dk))

    def params(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv, self.wo]


def _swap_last_two(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                      eps: float = 1e-6, max_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` re-evaluates the scalar objective from the current parameter
    values. Returns the max relative error over all checked coordinates,
    with denominator max(|analytic|, |numeric|, 1e-8). When
    ``max_coords`` is given, that many coordinates per parameter are
    sampled with ``rng`` instead of sweeping all of them.
    """
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.array(p.grad, copy=True) for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        idxs = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(numeric - gflat[i]) / max(abs(numeric), abs(gflat[i]), 1e-8)
            worst = max(worst, err)
    return worst
