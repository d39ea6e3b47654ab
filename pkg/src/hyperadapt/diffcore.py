"""Dense numpy tensors with a small reverse-mode differentiation engine.

Every primitive is a forward function plus an adjoint registered under the
op name. ``backward`` walks the recorded graph in reverse topological order
and accumulates vector-Jacobian products.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

DTYPE = np.float64

_ids = itertools.count()


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class MissingAdjointError(RuntimeError):
    pass


class Node:
    __slots__ = ("id", "op", "inputs", "value", "requires_grad", "ctx", "name")

    def __init__(self, value, op="leaf", inputs=(), requires_grad=False, ctx=None, name=None):
        self.id = next(_ids)
        self.op = op
        self.inputs = tuple(inputs)
        self.value = value
        self.requires_grad = requires_grad
        self.ctx = ctx
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_node(other), -1.0))

    def __rsub__(self, other):
        return add(as_node(other), scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def _leaf_value(value):
    # contiguous copies keep BLAS on one code path, so results never depend on input strides
    return np.ascontiguousarray(value, dtype=DTYPE)


def constant(value, name=None) -> Node:
    return Node(_leaf_value(value), name=name)


def parameter(value, name=None) -> Node:
    return Node(_leaf_value(value), requires_grad=True, name=name)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


# op name -> adjoint(ctx, grad_out, out_value, inputs) -> tuple of input grads
_ADJOINTS: dict[str, Callable] = {}


def register_adjoint(op: str):
    def deco(fn):
        _ADJOINTS[op] = fn
        return fn
    return deco


def _make(op, value, inputs, ctx=None) -> Node:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    requires_grad = any(n.requires_grad for n in inputs)
    if not requires_grad:
        # nothing upstream needs a gradient; drop the graph edges
        return Node(value, op=op)
    return Node(value, op=op, inputs=inputs, requires_grad=True, ctx=ctx)


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- primitives

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _make("add", a.value + b.value, (a, b))


@register_adjoint("add")
def _add_adj(ctx, g, out, inputs):
    a, b = inputs
    return unbroadcast(g, a.value.shape), unbroadcast(g, b.value.shape)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _make("mul", a.value * b.value, (a, b))


@register_adjoint("mul")
def _mul_adj(ctx, g, out, inputs):
    a, b = inputs
    return (unbroadcast(g * b.value, a.value.shape),
            unbroadcast(g * a.value, b.value.shape))


def scale(a, c: float) -> Node:
    a = as_node(a)
    return _make("scale", a.value * c, (a,), ctx=c)


@register_adjoint("scale")
def _scale_adj(c, g, out, inputs):
    return (g * c,)


def relu(a) -> Node:
    a = as_node(a)
    return _make("relu", np.maximum(a.value, 0.0), (a,))


@register_adjoint("relu")
def _relu_adj(ctx, g, out, inputs):
    # subgradient 0 at exactly 0
    return (g * (inputs[0].value > 0.0),)


def mean(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    return _make("mean", np.mean(a.value, axis=axis, keepdims=keepdims), (a,), ctx=(axis, keepdims))


@register_adjoint("mean")
def _mean_adj(ctx, g, out, inputs):
    axis, keepdims = ctx
    shape = inputs[0].value.shape
    if axis is None:
        count = int(np.prod(shape))
        return (np.broadcast_to(g, shape) / count,)
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    count = int(np.prod([shape[ax] for ax in axes]))
    if not keepdims:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g, shape) / count,)


def reshape(a, shape) -> Node:
    a = as_node(a)
    return _make("reshape", a.value.reshape(shape), (a,))


@register_adjoint("reshape")
def _reshape_adj(ctx, g, out, inputs):
    return (g.reshape(inputs[0].value.shape),)


def matmul(a, b) -> Node:
    """Matrix product with numpy batch broadcasting; both operands need ndim >= 2."""
    a, b = as_node(a), as_node(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if a.value.shape[-1] != b.value.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.value.shape} @ {b.value.shape}")
    return _make("matmul", np.matmul(a.value, b.value), (a, b))


@register_adjoint("matmul")
def _matmul_adj(ctx, g, out, inputs):
    a, b = inputs
    ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
    gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
    return unbroadcast(ga, a.value.shape), unbroadcast(gb, b.value.shape)


def lowrank_product(a, b) -> Node:
    """``a @ b`` for a thin inner dimension, summed one rank-1 term at a time.

    The fixed left-to-right order makes the result reproducible bit for bit
    by any explicit sum over the inner index (BLAS kernels may fuse
    multiply-adds and round differently).
    """
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"lowrank_product shape mismatch: {av.shape} @ {bv.shape}")
    out = av[..., :, 0:1] * bv[..., 0:1, :]
    for c in range(1, av.shape[-1]):
        out = out + av[..., :, c:c + 1] * bv[..., c:c + 1, :]
    return _make("lowrank_product", out, (a, b))


@register_adjoint("lowrank_product")
def _lowrank_product_adj(ctx, g, out, inputs):
    a, b = inputs
    ga = unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape) if a.requires_grad else None
    gb = unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape) if b.requires_grad else None
    return ga, gb


def gather(table, indices) -> Node:
    """Row lookup ``table[indices]`` for a 2-D table and integer index vector."""
    table = as_node(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.value.shape[0]):
        raise IndexError("gather index out of range")
    return _make("gather", table.value[idx], (table,), ctx=idx)


@register_adjoint("gather")
def _gather_adj(idx, g, out, inputs):
    grad = np.zeros_like(inputs[0].value)
    np.add.at(grad, idx, g)
    return (grad,)


def concat(nodes: Sequence, axis=-1) -> Node:
    nodes = tuple(as_node(n) for n in nodes)
    value = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    return _make("concat", value, nodes, ctx=(axis, sizes))


@register_adjoint("concat")
def _concat_adj(ctx, g, out, inputs):
    axis, sizes = ctx
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def softmax_xent(logits, labels) -> Node:
    """Mean softmax cross-entropy of ``(N, C)`` logits against integer labels."""
    logits = as_node(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.value
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"softmax_xent expects (N, C) logits and N labels, got {z.shape}, {labels.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsumexp[:, None]
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    return _make("softmax_xent", np.asarray(loss), (logits,), ctx=(labels, logp))


@register_adjoint("softmax_xent")
def _softmax_xent_adj(ctx, g, out, inputs):
    labels, logp = ctx
    n = logp.shape[0]
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return (grad * (g / n),)


def _im2col(x, kh, kw):
    n, c, hp, wp = x.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    # (N, C, Ho, Wo, kh, kw) -> (N, C*kh*kw, Ho*Wo)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return cols, ho, wo


def conv2d(x, w, padding="same") -> Node:
    """Stride-1 cross-correlation.

    ``x`` is ``(N, C_in, H, W)``. ``w`` is either a shared kernel
    ``(C_out, C_in, K_h, K_w)`` or one kernel per sample
    ``(N, C_out, C_in, K_h, K_w)``. Both cases run the same batched
    product, so a broadcast kernel and its materialized copies agree bit
    for bit.
    """
    x, w = as_node(x), as_node(w)
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim not in (4, 5):
        raise ShapeError(f"conv2d expects 4-D input and 4/5-D kernel, got {xv.shape}, {wv.shape}")
    n, c_in, h, wd = xv.shape
    c_out, wc_in, kh, kw = wv.shape[-4:]
    if wc_in != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {c_in}, kernel {wc_in}")
    if wv.ndim == 5 and wv.shape[0] != n:
        raise ShapeError(f"per-sample kernel batch {wv.shape[0]} != input batch {n}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("'same' padding needs odd kernel extents")
        ph, pw = kh // 2, kw // 2
        xp = np.pad(xv, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    elif padding == "valid":
        ph = pw = 0
        xp = xv
    else:
        raise ValueError(f"unsupported padding {padding!r}")
    cols, ho, wo = _im2col(xp, kh, kw)
    wf = wv.reshape(wv.shape[:-4] + (c_out, c_in * kh * kw))
    wb = np.broadcast_to(wf, (n, c_out, c_in * kh * kw))
    out = np.matmul(wb, cols).reshape(n, c_out, ho, wo)
    ctx = dict(cols=cols, wb=wb, xp_shape=xp.shape, pad=(ph, pw), k=(kh, kw), c_in=c_in, c_out=c_out)
    return _make("conv2d", out, (x, w), ctx=ctx)


@register_adjoint("conv2d")
def _conv2d_adj(ctx, g, out, inputs):
    x, w = inputs
    n, c_out, ho, wo = g.shape
    kh, kw = ctx["k"]
    c_in = ctx["c_in"]
    gf = g.reshape(n, c_out, ho * wo)
    gw = gx = None
    if w.requires_grad:
        dwf = np.matmul(gf, np.swapaxes(ctx["cols"], 1, 2))
        if w.value.ndim == 4:
            dwf = dwf.sum(axis=0)
        gw = dwf.reshape(w.value.shape)
    if x.requires_grad:
        dcols = np.matmul(np.swapaxes(ctx["wb"], 1, 2), gf).reshape(n, c_in, kh, kw, ho, wo)
        dxp = np.zeros(ctx["xp_shape"])
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, i, j]
        ph, pw = ctx["pad"]
        gx = dxp[:, :, ph:dxp.shape[2] - ph, pw:dxp.shape[3] - pw]
    return gx, gw


# ------------------------------------------------------------------ backward

class GradientMap(dict):
    """Maps node id to gradient array; also indexable by the node itself."""

    def __getitem__(self, key):
        return super().__getitem__(key.id if isinstance(key, Node) else key)

    def __contains__(self, key):
        return super().__contains__(key.id if isinstance(key, Node) else key)

    def get(self, key, default=None):
        return super().get(key.id if isinstance(key, Node) else key, default)


def _topological(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for parent in node.inputs:
            if parent.requires_grad and parent.id not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> GradientMap:
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
    grads = GradientMap()
    if not loss.requires_grad:
        return grads
    order = _topological(loss)
    for node in order:
        if node.inputs and node.op not in _ADJOINTS:
            raise MissingAdjointError(f"no adjoint registered for op {node.op!r}")
    dict.__setitem__(grads, loss.id, np.ones_like(loss.value))
    for node in reversed(order):
        g = dict.__getitem__(grads, node.id)
        if not node.inputs:
            continue
        input_grads = _ADJOINTS[node.op](node.ctx, g, node.value, node.inputs)
        for parent, pg in zip(node.inputs, input_grads):
            if not parent.requires_grad or pg is None:
                continue
            prev = dict.get(grads, parent.id)
            dict.__setitem__(grads, parent.id, pg if prev is None else prev + pg)
    return grads


# ------------------------------------------------------- graphs and checking

class Graph:
    """A reusable computation: ``build(inputs, params) -> root node``.

    ``placeholders`` maps feed names to declared shapes; ``None`` in a shape
    matches any extent.
    """

    def __init__(self, build: Callable, params: Mapping[str, np.ndarray],
                 placeholders: Mapping[str, tuple]):
        self.build = build
        self.params = {k: np.asarray(v, dtype=DTYPE) for k, v in params.items()}
        self.placeholders = dict(placeholders)
        self.root: Node | None = None
        self.param_nodes: dict[str, Node] = {}

    def _check_feeds(self, feeds):
        missing = set(self.placeholders) - set(feeds)
        extra = set(feeds) - set(self.placeholders)
        if missing or extra:
            raise ShapeError(f"feeds do not match placeholders (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, declared in self.placeholders.items():
            shape = np.shape(feeds[name])
            if len(shape) != len(declared) or any(d is not None and d != s for d, s in zip(declared, shape)):
                raise ShapeError(f"feed {name!r} has shape {shape}, declared {declared}")

    def evaluate(self, feeds, params=None, track=True) -> Node:
        self._check_feeds(feeds)
        params = self.params if params is None else params
        make = parameter if track else constant
        param_nodes = {k: make(v, name=k) for k, v in params.items()}
        inputs = {k: (np.asarray(v) if np.asarray(v).dtype.kind in "iu" else constant(v, name=k))
                  for k, v in feeds.items()}
        root = self.build(inputs, param_nodes)
        if track:
            self.root, self.param_nodes = root, param_nodes
        return root


def forward(graph: Graph, feeds: Mapping) -> np.ndarray:
    return graph.evaluate(feeds).value


def relative_error(a, b):
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


@dataclass(frozen=True)
class GradCheck:
    max_rel_error: float
    passed: bool


def numerical_gradient(graph: Graph, feeds, name: str, eps: float) -> np.ndarray:
    base = graph.params[name]
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        params = dict(graph.params)
        plus, minus = base.copy(), base.copy()
        plus.reshape(-1)[i] += eps
        minus.reshape(-1)[i] -= eps
        params[name] = plus
        f_plus = graph.evaluate(feeds, params, track=False).value
        params[name] = minus
        f_minus = graph.evaluate(feeds, params, track=False).value
        flat[i] = (float(f_plus) - float(f_minus)) / (2.0 * eps)
    return grad


def check_gradients(graph: Graph, feeds, eps: float = 1e-5, tol: float = 1e-6) -> dict[str, GradCheck]:
    """Compare analytic gradients of every parameter with central differences."""
    if eps <= 0 or tol <= 0:
        raise ValueError("eps and tol must be positive")
    root = graph.evaluate(feeds)
    grads = backward(root)
    report = {}
    for name, node in graph.param_nodes.items():
        analytic = grads.get(node)
        if analytic is None:
            analytic = np.zeros_like(node.value)
        numeric = numerical_gradient(graph, feeds, name, eps)
        err = float(relative_error(analytic, numeric).max()) if numeric.size else 0.0
        report[name] = GradCheck(err, err <= tol)
    return report
