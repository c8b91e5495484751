"""Reverse-mode automatic differentiation over dense float64 tensors.

Eager evaluation: every op computes its value at construction time and the
resulting :class:`Tensor` carries the DAG needed for the backward pass.
Shapes are checked per op; element-wise arithmetic only broadcasts when one
operand's shape is a suffix of the other's (leading-axis expansion) — any
other alignment must go through an explicit :func:`broadcast_to` or
:func:`reshape`, which keeps shape errors local to the op that caused them.
All values are float64 and every op output is checked for non-finite entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class ShapeMismatchError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class GradientError(AutodiffError):
    pass


def _check_finite(op: str, data: np.ndarray) -> None:
    # single-pass reduction: any nan/inf entry makes the sum non-finite
    with np.errstate(over="ignore", invalid="ignore"):
        total = data.sum()
    if not np.isfinite(total):
        raise NonFiniteError(f"non-finite values in output of op '{op}'")


class Tensor:
    """A node in the computation DAG.

    Leaves are created directly (``Tensor(data, requires_grad=...)``); internal
    nodes are created by the op functions below and hold a backward closure
    that accumulates gradients into their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple = (),
        backward: Callable[[np.ndarray], None] | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(op, arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; right-hand scalars/arrays are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, constant(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, idx):
        return take(self, idx)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False, op="const")


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True, op="param")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _node(op: str, data: np.ndarray, parents: tuple, backward) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, op=op, parents=parents, backward=backward if rg else None)


# ---------------------------------------------------------------------------
# broadcasting rules
# ---------------------------------------------------------------------------

def _is_suffix(small: tuple, big: tuple) -> bool:
    k = len(small)
    return k <= len(big) and (k == 0 or big[len(big) - k:] == small)


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> tuple:
    if a.shape == b.shape:
        return a.shape
    if _is_suffix(b.shape, a.shape):
        return a.shape
    if _is_suffix(a.shape, b.shape):
        return b.shape
    raise ShapeMismatchError(
        f"op '{op}': shapes {a.shape} and {b.shape} are not equal and neither is "
        f"a trailing suffix of the other; use reshape/broadcast_to explicitly"
    )


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over the leading axes that were added by suffix broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    if grad.shape != shape:
        # size-1 axes expanded by an explicit broadcast
        axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(np.broadcast_to(g, t.shape), dtype=np.float64)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("add", a, b)
    out = a.data + b.data

    def backward(g):
        _accum(a, _reduce_to(g, a.shape))
        _accum(b, _reduce_to(g, b.shape))

    return _node("add", out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("sub", a, b)
    out = a.data - b.data

    def backward(g):
        _accum(a, _reduce_to(g, a.shape))
        _accum(b, _reduce_to(-g, b.shape))

    return _node("sub", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("mul", a, b)
    out = a.data * b.data

    def backward(g):
        _accum(a, _reduce_to(g * b.data, a.shape))
        _accum(b, _reduce_to(g * a.data, b.shape))

    return _node("mul", out, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"op 'matmul': operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"op 'matmul': inner dimensions differ, {a.shape} @ {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    if not (_is_suffix(la, lb) or _is_suffix(lb, la)):
        raise ShapeMismatchError(f"op 'matmul': batch dims {la} and {lb} do not align as a suffix")
    out = a.data @ b.data

    def backward(g):
        _accum(a, _reduce_to(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accum(b, _reduce_to(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node("matmul", out, (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    ax = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    out = np.transpose(a.data, ax)
    inv = np.argsort(ax)

    def backward(g):
        _accum(a, np.transpose(g, inv))

    return _node("transpose", out, (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeMismatchError(f"op 'reshape': cannot reshape {a.shape} to {tuple(shape)}") from exc

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _node("reshape", out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeMismatchError("op 'concat': empty input list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accum(t, piece)

    return _node("concat", out, tuple(tensors), backward)


def take(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def backward(g):
        if a.requires_grad:
            full = np.zeros(a.shape, dtype=np.float64)
            np.add.at(full, idx, g)
            _accum(a, full)

    return _node("slice", np.asarray(out), (a,), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _node("sum", np.asarray(out), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims)
    scale = 1.0 / float(count)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g * scale, a.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg * scale, a.shape).copy())

    return _node("mean", np.asarray(out), (a,), backward)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeMismatchError(f"op 'broadcast': cannot broadcast {a.shape} to {shape}") from exc

    def backward(g):
        extra = len(shape) - a.ndim
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, s in enumerate(a.shape) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        _accum(a, g)

    return _node("broadcast", out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        _accum(a, g * out)

    return _node("exp", out, (a,), backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    _check_finite("log", out)

    def backward(g):
        _accum(a, g / a.data)

    return _node("log", out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    _check_finite("sqrt", out)

    def backward(g):
        _accum(a, g * (0.5 / out))

    return _node("sqrt", out, (a,), backward)


def square(a: Tensor) -> Tensor:
    out = a.data * a.data

    def backward(g):
        _accum(a, g * (2.0 * a.data))

    return _node("square", out, (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)

    def backward(g):
        _accum(a, g * _sigmoid(a.data))

    return _node("softplus", out, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    phi_big = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi_big

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accum(a, g * (phi_big + x * pdf))

    return _node("gelu", out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        _accum(a, out * (g - dot))

    return _node("softmax", out, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis of a, then scale and shift."""
    dm = a.shape[-1]
    if gain.shape != (dm,) or bias.shape != (dm,):
        raise ShapeMismatchError(
            f"op 'layer_norm': gain/bias shapes {gain.shape}/{bias.shape} do not match last axis {dm}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            _accum(gain, np.sum(g * xhat, axis=tuple(range(g.ndim - 1))))
        if bias.requires_grad:
            _accum(bias, np.sum(g, axis=tuple(range(g.ndim - 1))))
        if a.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = np.mean(gx * xhat, axis=-1, keepdims=True)
            _accum(a, inv * (gx - m1 - xhat * m2))

    return _node("layer_norm", out, (a, gain, bias), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout with an explicit mask stream; identity when not training."""
    if not train or rate <= 0.0:
        return a
    if rng is None:
        raise GradientError("op 'dropout': training mode requires an explicit rng")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    out = a.data * mask

    def backward(g):
        _accum(a, g * mask)

    return _node("dropout", out, (a,), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, rate: float = 0.0,
              rng: np.random.Generator | None = None, train: bool = False) -> Tensor:
    """Scaled dot-product attention composed from primitives.

    q, k, v: (..., tokens, head_dim).
    """
    dk = q.shape[-1]
    scores = mul(matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))),
                 constant(1.0 / np.sqrt(dk)))
    weights = dropout(softmax(scores, axis=-1), rate, rng, train)
    return matmul(weights, v)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def gradients(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Backpropagate from a scalar loss; returns gradients aligned with params.

    Each reachable node's backward closure runs exactly once (reverse
    topological order), so shared subexpressions accumulate correctly.
    Parameters not reachable from the loss get zero gradients.
    """
    params = list(params)
    if loss.size != 1:
        raise GradientError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any trainable parameter")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones(loss.shape, dtype=np.float64)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    out = []
    for p in params:
        out.append(p.grad.copy() if p.grad is not None else np.zeros(p.shape, dtype=np.float64))
    return out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam state; moments are allocated lazily per parameter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise GradientError(f"Adam lr must be positive, got {self.lr}")


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One Adam update, in place.  Validates every gradient before mutating
    anything so a NaN gradient cannot leave a partial update behind."""
    for name, p in params.items():
        if name not in grads:
            raise GradientError(f"missing gradient for parameter '{name}'")
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatchError(f"gradient shape {g.shape} != param shape {p.shape} for '{name}'")
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter '{name}'")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.first_moment.setdefault(name, np.zeros(p.shape, dtype=np.float64))
        v = state.second_moment.setdefault(name, np.zeros(p.shape, dtype=np.float64))
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# finite differences (test/selfcheck oracle)
# ---------------------------------------------------------------------------

def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-8)
    return float(np.max(np.abs(a - b))) / denom
