"""Minimal define-by-run reverse-mode autodiff over dense numpy arrays.

Only the operations the trajectory model needs are provided. Binary
elementwise ops require identical shapes; the single exception is
``add_bias`` which adds a 1-D vector along the last axis.

Values are float32 by default. ``precision(np.float64)`` switches the dtype
used for newly created tensors, which is how finite-difference checks run in
a 64-bit shadow mode.
"""

from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

_DTYPE = np.float32
# When not None, ops with discrete branches (relu, clip, min) append their
# branch decisions here. Finite-difference checks use it to detect kinks.
_BRANCH_TRACE: list | None = None


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


@contextlib.contextmanager
def record_branches() -> Iterator[list]:
    """Collect branch decisions (relu masks, argmins, clip masks) of ops run inside."""
    global _BRANCH_TRACE
    previous = _BRANCH_TRACE
    _BRANCH_TRACE = []
    try:
        yield _BRANCH_TRACE
    finally:
        _BRANCH_TRACE = previous


def _record(decision: np.ndarray) -> None:
    if _BRANCH_TRACE is not None:
        _BRANCH_TRACE.append(decision)


class RngState:
    """Seeded random stream backed by numpy's PCG64 bit generator.

    PCG64 output is specified bit-for-bit, so a seed yields the same stream on
    every platform. ``child(*keys)`` derives an independent stream whose seed
    is the first 8 bytes (little-endian) of sha256("<seed>/<key>/...").
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def child(self, *keys) -> "RngState":
        text = "/".join([str(self.seed), *map(str, keys)])
        digest = hashlib.sha256(text.encode()).digest()
        return RngState(int.from_bytes(digest[:8], "little"))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


class Node:
    """A value in the computation graph, plus its accumulated gradient."""

    __slots__ = ("value", "_grad", "requires_grad", "_parents", "_backward", "name", "_consumed")

    def __init__(self, value: np.ndarray, requires_grad: bool = False, parents: tuple = (),
                 backward: Callable | None = None, name: str | None = None):
        self.value = value
        self._grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.value.size != 1:
            raise UsageError(f"item() needs a single-element node, shape is {self.shape}")
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape}, dtype={self.value.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return sub(self, other)

    def __mul__(self, other: "Node") -> "Node":
        return mul(self, other)

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)

    def backward(self) -> None:
        """Run reverse accumulation from this scalar node.

        Every reachable node that requires grad ends up holding dself/dnode.
        Calling it twice on the same graph raises; use ``reset_graph`` first.
        """
        if self.value.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise UsageError("backward() already ran on this graph; call reset_graph() first")
        order = _topological_order(self)
        self._grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is None or node._grad is None:
                continue
            grads = node._backward(node._grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent._grad = g if parent._grad is None else parent._grad + g
        self._consumed = True

    def reset_graph(self) -> None:
        for node in _topological_order(self):
            node._grad = None
        self._consumed = False


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Node:
    """Wrap external data as a graph leaf; rejects NaN/Inf."""
    value = np.array(data, dtype=_DTYPE)
    if not np.all(np.isfinite(value)):
        raise ValueError(f"non-finite entries in tensor{' ' + name if name else ''}")
    return Node(value, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Node:
    return tensor(data, requires_grad=True, name=name)


def _result(value: np.ndarray, parents: tuple, backward: Callable) -> Node:
    if any(p.requires_grad for p in parents):
        return Node(value, True, parents, backward)
    return Node(value)


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ---------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return _result(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return _result(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(x: Node, c: float) -> Node:
    return _result(x.value * c, (x,), lambda g: (g * c,))


def add_bias(x: Node, b: Node) -> Node:
    """x[..., n] + b[n]: the only broadcasting the engine supports."""
    if b.value.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    n = b.shape[0]
    return _result(x.value + b.value, (x, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)))


def tanh(x: Node) -> Node:
    y = np.tanh(x.value)
    return _result(y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x: Node) -> Node:
    y = _sigmoid(x.value)
    return _result(y, (x,), lambda g: (g * y * (1 - y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1 / (1 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1 + e)
    return out


def relu(x: Node) -> Node:
    mask = x.value > 0
    _record(mask)
    return _result(x.value * mask, (x,), lambda g: (g * mask,))


def exp(x: Node) -> Node:
    y = np.exp(x.value)
    return _result(y, (x,), lambda g: (g * y,))


def sqrt(x: Node) -> Node:
    y = np.sqrt(x.value)
    # d sqrt at 0 is unbounded; route zero gradient there instead of inf
    safe = np.where(y > 0, y, 1)
    return _result(y, (x,), lambda g: (np.where(y > 0, g / (2 * safe), 0),))


def clip(x: Node, low: float, high: float) -> Node:
    inside = (x.value >= low) & (x.value <= high)
    _record(inside)
    return _result(np.clip(x.value, low, high), (x,), lambda g: (g * inside,))


def elementwise(kind: str, *operands: Node, factor: float | None = None) -> Node:
    """Dispatch by name: add, sub, mul, tanh, sigmoid, relu, exp, scale."""
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu, "exp": exp}
    if kind in binary:
        return binary[kind](*operands)
    if kind in unary:
        return unary[kind](*operands)
    if kind == "scale":
        if factor is None:
            raise UsageError("scale needs factor=")
        return scale(operands[0], factor)
    raise UsageError(f"unknown elementwise op {kind!r}")


# -- linear algebra and reductions ---------------------------------------

def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    return _result(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def linear(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """Fully connected layer on the last axis of x (any leading shape)."""
    lead = x.shape[:-1]
    flat = x if x.value.ndim == 2 else reshape(x, (-1, x.shape[-1]))
    out = matmul(flat, weight)
    if bias is not None:
        out = add_bias(out, bias)
    return out if x.value.ndim == 2 else reshape(out, (*lead, weight.shape[1]))


def sum(x: Node, axis=None) -> Node:  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.sum(x.value, axis=axis), (x,), back)


def mean(x: Node, axis=None) -> Node:
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis), 1.0 / float(count))


def min(x: Node, axis: int) -> Node:  # noqa: A001
    """Minimum along one axis; the gradient goes to the selected entry only."""
    idx = np.argmin(x.value, axis=axis)
    _record(idx)
    picked = np.take_along_axis(x.value, np.expand_dims(idx, axis), axis)

    def back(g):
        out = np.zeros_like(x.value)
        np.put_along_axis(out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (out,)

    return _result(np.squeeze(picked, axis), (x,), back)


def softmax(x: Node) -> Node:
    """Softmax over the last axis, max-subtracted for stability."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), back)


def weighted_sum(weights: Node, values: Node) -> Node:
    """out[b, :] = sum_s weights[b, s] * values[b, s, :]."""
    if weights.value.ndim != 2 or values.value.ndim != 3 or weights.shape != values.shape[:2]:
        raise ShapeError(f"weighted_sum: weights {weights.shape} vs values {values.shape}")
    w, v = weights.value, values.value

    def back(g):
        return np.einsum("bd,bsd->bs", g, v), w[:, :, None] * g[:, None, :]

    return _result(np.einsum("bs,bsd->bd", w, v), (weights, values), back)


# -- structural ----------------------------------------------------------

def concat(parts: Sequence[Node], axis: int = 0) -> Node:
    if not parts:
        raise ShapeError("concat of zero parts")
    if len(parts) == 1:
        return parts[0]
    ndim = parts[0].value.ndim
    ax = axis % ndim
    ref = parts[0].shape
    for p in parts[1:]:
        if p.value.ndim != ndim or any(p.shape[d] != ref[d] for d in range(ndim) if d != ax):
            raise ShapeError(f"concat axis {axis}: incompatible shapes {ref} and {p.shape}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]
    return _result(np.concatenate([p.value for p in parts], axis=ax), tuple(parts),
                   lambda g: tuple(np.split(g, bounds, axis=ax)))


def stack(parts: Sequence[Node], axis: int = 0) -> Node:
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape != ref:
            raise ShapeError(f"stack: shape mismatch {ref} vs {p.shape}")
    ax = axis % (len(ref) + 1)

    def back(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(parts)))

    return _result(np.stack([p.value for p in parts], axis=ax), tuple(parts), back)


def reshape(x: Node, shape) -> Node:
    old = x.shape
    return _result(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x: Node, index) -> Node:
    """Basic (slice/int) indexing."""

    def back(g):
        out = np.zeros_like(x.value)
        out[index] = g
        return (out,)

    return _result(x.value[index], (x,), back)


def take(x: Node, indices, axis: int = 0) -> Node:
    """Gather along an axis; repeated indices accumulate in backward."""
    indices = np.asarray(indices)

    def back(g):
        out = np.zeros_like(x.value)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return _result(np.take(x.value, indices, axis=axis), (x,), back)


def dropout(x: Node, rate: float, rng: RngState | None, training: bool) -> Node:
    """Inverted dropout: survivors are scaled by 1/(1-rate) while training."""
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.value.dtype) / (1 - rate)
    return _result(x.value * keep, (x,), lambda g: (g * keep,))


# -- recurrent cell ------------------------------------------------------

@dataclass
class GRUParams:
    """Weights for one GRU cell, gate order (reset, update, candidate).

    w_x: [d_in, 3*d_h], w_h: [d_h, 3*d_h], b: [3*d_h]. The candidate block of
    w_h multiplies r*h, so this equals the textbook W[x; h] formulation.
    """

    w_x: Node
    w_h: Node
    b: Node

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_x.shape[0]

    def nodes(self) -> list[Node]:
        return [self.w_x, self.w_h, self.b]


def gru_cell(x: Node, h: Node, params: GRUParams) -> Node:
    """One fused GRU update for a batch of rows (or a single 1-D vector).

    r = sig(x Wx_r + h Wh_r + b_r), u = sig(x Wx_u + h Wh_u + b_u),
    c = tanh(x Wx_c + (r*h) Wh_c + b_c), h' = (1-u)*h + u*c.
    """
    if x.value.ndim == 1 and h.value.ndim == 1:
        out = gru_cell(reshape(x, (1, -1)), reshape(h, (1, -1)), params)
        return reshape(out, (-1,))
    hs = params.hidden_size
    if x.shape[-1] != params.input_size or h.shape[-1] != hs or x.shape[0] != h.shape[0]:
        raise ShapeError(f"gru_cell: x {x.shape}, h {h.shape} vs weights "
                         f"{params.w_x.shape}, {params.w_h.shape}")
    xv, hv = x.value, h.value
    wx, wh, bv = params.w_x.value, params.w_h.value, params.b.value
    gx = xv @ wx + bv
    gh = hv @ wh[:, : 2 * hs]
    r = _sigmoid(gx[:, :hs] + gh[:, :hs])
    u = _sigmoid(gx[:, hs: 2 * hs] + gh[:, hs:])
    rh = r * hv
    c = np.tanh(gx[:, 2 * hs:] + rh @ wh[:, 2 * hs:])
    out = (1 - u) * hv + u * c

    def back(g):
        dc_pre = g * u * (1 - c * c)
        du_pre = g * (c - hv) * u * (1 - u)
        drh = dc_pre @ wh[:, 2 * hs:].T
        dr_pre = drh * hv * r * (1 - r)
        dgx = np.concatenate([dr_pre, du_pre, dc_pre], axis=1)
        dgh = dgx[:, : 2 * hs]
        dh = g * (1 - u) + drh * r + dgh @ wh[:, : 2 * hs].T
        dwh = np.concatenate([hv.T @ dgh, rh.T @ dc_pre], axis=1)
        return dgx @ wx.T, dh, xv.T @ dgx, dwh, dgx.sum(axis=0)

    parents = (x, h, params.w_x, params.w_h, params.b)
    return _result(out, parents, back)


# -- optimizer -----------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(values: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam; updates the arrays in ``values`` in place."""
    state.step += 1
    t = state.step
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for name, value in values.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def zero_grads(nodes: Iterable[Node]) -> None:
    for node in nodes:
        node.zero_grad()
