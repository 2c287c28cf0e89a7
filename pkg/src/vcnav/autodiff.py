"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is rebuilt on every forward pass: operations record onto the
currently active :class:`Tape`, and :func:`backward` replays the records once
in reverse creation order. A tape is single-use; calling backward on it twice
raises :class:`TapeConsumed`. Every operation validates its output for
NaN/Inf so numerical blowups surface at the op boundary that produced them.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NonFiniteValue(ArithmeticError):
    """A NaN or Inf appeared at an operation boundary."""


class NonScalarLoss(ValueError):
    """backward() was called on a tensor with more than one element."""


class TapeConsumed(RuntimeError):
    """backward() was called twice on the same tape without a re-forward."""


_active_tape: "Tape | None" = None


class Tape:
    """Ordered record of operations, usable as a context manager.

    Creation order is topological order because operands must exist before
    the op that consumes them, so backward is a single reverse sweep.
    """

    __slots__ = ("nodes", "consumed", "_prev")

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.consumed = False
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        global _active_tape
        self._prev = _active_tape
        _active_tape = self
        return self

    def __exit__(self, *exc) -> None:
        global _active_tape
        _active_tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    """Return the tape ops currently record onto, or None in inference mode."""
    return _active_tape


def _check_finite(arr: np.ndarray, op: str) -> None:
    # single-pass probe: the sum is NaN/Inf iff some element is
    s = float(np.add.reduce(arr, None)) if arr.size else 0.0
    if not math.isfinite(s):
        if np.isfinite(arr).all():
            return  # pathological cancellation of huge finite values
        raise NonFiniteValue(f"non-finite value produced by op '{op}'")


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode autodiff.

    ``requires_grad`` marks trainable leaves. Non-leaf tensors carry a
    reference to their parents and a backward callable while their tape is
    alive. Gradients are lazily allocated and accumulate across backward
    passes until explicitly cleared.
    """

    __slots__ = ("values", "name", "requires_grad", "_grad", "_parents", "_backward", "_tape")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(values, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.values = arr
        self.name = name
        self.requires_grad = requires_grad
        self._grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def grad(self) -> np.ndarray:
        """Accumulated gradient; zeros if nothing has flowed here yet."""
        if self._grad is None:
            return np.zeros_like(self.values)
        return self._grad

    def has_grad(self) -> bool:
        return self._grad is not None

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeMismatch(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def _tracked(self) -> bool:
        return self.requires_grad or (self._tape is not None and self._tape is _active_tape)

    # -- operator sugar, all composed from the primitive ops --------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _NEG_ONE)

    def __sub__(self, other):
        return add(self, mul(other, _NEG_ONE))

    def __rsub__(self, other):
        return add(mul(self, _NEG_ONE), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


def parameter(values, name: str | None = None) -> Tensor:
    """Create a trainable leaf."""
    return Tensor(values, requires_grad=True, name=name)


# shared scalar constants; never trainable, never written to
_NEG_ONE = Tensor(-1.0)
_HALF = Tensor(0.5)
_ONE = Tensor(1.0)


def constant(values) -> Tensor:
    """Create a non-trainable tensor (no gradient ever flows into it)."""
    if isinstance(values, Tensor):
        return values
    return Tensor(values, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _emit(values: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording it when the active tape can reach a leaf."""
    _check_finite(values, op)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.name = None
    out.requires_grad = False
    out._grad = None
    out._parents = ()
    out._backward = None
    out._tape = None
    tape = _active_tape
    if tape is not None:
        for p in parents:
            if p.requires_grad or p._tape is tape:
                out._parents = parents
                out._backward = backward_fn
                out._tape = tape
                tape.nodes.append(out)
                break
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- primitive operations --------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix/vector product for 1-D and 2-D operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ShapeMismatch(f"matmul supports 1-D/2-D operands, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul inner dims differ: {av.shape} @ {bv.shape}")
    out = av @ bv

    def backward_fn(g: np.ndarray):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1 and bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        return bv * g, av * g  # inner product, g is 0-d

    return _emit(np.asarray(out), "matmul", (a, b), backward_fn)


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.values + b.values
    except ValueError as e:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}") from e
    ash, bsh = a.shape, b.shape

    def backward_fn(g: np.ndarray):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _emit(out, "add", (a, b), backward_fn)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.values * b.values
    except ValueError as e:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}") from e
    av, bv = a.values, b.values

    def backward_fn(g: np.ndarray):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _emit(out, "mul", (a, b), backward_fn)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.values)

    def backward_fn(g: np.ndarray):
        return (g * (1.0 - out * out),)

    return _emit(out, "tanh", (x,), backward_fn)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.values, 0.0)
    pos = x.values > 0.0

    def backward_fn(g: np.ndarray):
        return (g * pos,)

    return _emit(out, "relu", (x,), backward_fn)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.values)

    def backward_fn(g: np.ndarray):
        return (g * out,)

    return _emit(out, "exp", (x,), backward_fn)


def log(x) -> Tensor:
    """Natural log; non-positive inputs surface as NonFiniteValue."""
    x = _as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.values)
    xv = x.values

    def backward_fn(g: np.ndarray):
        return (g / xv,)

    return _emit(out, "log", (x,), backward_fn)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over all elements or along an axis."""
    x = _as_tensor(x)
    out = x.values.sum(axis=axis, keepdims=keepdims)
    xsh = x.shape

    def backward_fn(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g, xsh).copy() if g.ndim == 0 else np.full(xsh, g),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, xsh).copy(),)

    return _emit(np.asarray(out), "sum", (x,), backward_fn)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis."""
    x = _as_tensor(x)
    z = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g: np.ndarray):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _emit(out, "softmax", (x,), backward_fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    """Concatenate tensors along an existing axis."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeMismatch("concat of zero tensors")
    try:
        out = np.concatenate([t.values for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"concat: {[t.shape for t in ts]}") from e
    sizes = [t.values.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g: np.ndarray):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(out, "concat", tuple(ts), backward_fn)


def narrow(x, key) -> Tensor:
    """Basic indexing (ints, slices, None, tuples thereof); no fancy indexing."""
    x = _as_tensor(x)
    out = x.values[key]
    xsh = x.shape

    def backward_fn(g: np.ndarray):
        gx = np.zeros(xsh)
        gx[key] += g
        return (gx,)

    return _emit(np.asarray(out), "slice", (x,), backward_fn)


def dropout_mask(x, rate: float, rng: np.random.Generator) -> Tensor:
    """Zero elements with probability ``rate`` and rescale survivors by 1/(1-rate)."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = rng.random(x.shape) >= rate
    scale = keep / (1.0 - rate)
    out = x.values * scale

    def backward_fn(g: np.ndarray):
        return (g * scale,)

    return _emit(out, "dropout_mask", (x,), backward_fn)


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sum": reduce_sum,
    "softmax": softmax,
    "concat": concat,
    "slice": narrow,
    "dropout_mask": dropout_mask,
}


def forward_primitive(kind: str, inputs, **kwargs) -> Tensor:
    """Dispatch one primitive by name; the complete op vocabulary of the engine."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    if kind in ("concat",):
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's grad.

    The loss must be a scalar recorded on a live tape. Leaves not reachable
    from the loss keep a zero gradient. The tape is consumed afterwards.
    """
    if loss.values.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise RuntimeError("loss is not attached to a tape (was it computed under `with Tape()`?)")
    if tape.consumed:
        raise TapeConsumed("backward already ran on this tape; rebuild the graph first")
    tape.consumed = True
    loss._grad = np.ones_like(loss.values)
    for node in reversed(tape.nodes):
        g = node._grad
        if g is None:
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not (parent.requires_grad or parent._tape is tape):
                continue
            if parent._grad is None:
                parent._grad = np.array(pg)  # own the buffer; pg may alias node storage
            else:
                parent._grad += pg
        if not node.requires_grad:
            node._grad = None


# -- composites (built from primitives, differentiable end to end) ---------


def logsumexp(x) -> Tensor:
    """log(sum(exp(x))) over all elements, stabilized by a detached max shift."""
    x = _as_tensor(x)
    m = float(x.values.max())
    shifted = add(x, -m)  # constant shift: exact gradient is softmax(x)
    return add(log(reduce_sum(exp(shifted))), m)


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Scale a vector to unit Euclidean norm (differentiably)."""
    x = _as_tensor(x)
    sq = add(reduce_sum(mul(x, x)), eps)
    inv_norm = exp(mul(log(sq), -0.5))
    return mul(x, inv_norm)


def sigmoid(x) -> Tensor:
    """Logistic function via tanh: sigma(x) = (1 + tanh(x/2)) / 2."""
    return mul(add(tanh(mul(x, _HALF)), _ONE), _HALF)
