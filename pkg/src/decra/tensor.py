"""Dense float64 tensors with tape-based reverse-mode autodiff and Adam.

Operations record themselves on the innermost active :class:`Tape`.  Outside
any tape (or inside :func:`no_grad`) they are plain numpy computations, which
is how frozen forward passes such as augmentation predictions are run.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> backward(loss, tape)
    >>> w.grad
    array([2., 4.])
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NonFiniteError

DTYPE = np.float64

_TAPES: list = []


class Tensor:
    """An n-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _scalar_error(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


@dataclass
class Node:
    """One recorded operation: output, inputs and the vector-Jacobian rule."""

    op: str
    out: Tensor
    inputs: tuple
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of operations, replayed in reverse by :func:`backward`."""

    nodes: list = field(default_factory=list)
    _produced: set = field(default_factory=set, repr=False)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.out))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def __len__(self) -> int:
        return len(self.nodes)


@contextlib.contextmanager
def no_grad():
    """Suspend recording; results inside are constants to any outer tape."""
    _TAPES.append(None)
    try:
        yield
    finally:
        _TAPES.pop()


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, data: np.ndarray) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _emit(op: str, data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(op, out, inputs, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    return _emit("add", data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc
    return _emit("sub", data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    return _emit("mul", data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        with np.errstate(divide="ignore", invalid="ignore"):  # non-finite results are caught later
            data = a.data / b.data
    except ValueError as exc:
        raise DimensionError(f"div: cannot broadcast {a.shape} with {b.shape}") from exc
    return _emit("div", data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / b.data**2, b.shape)))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data**2) / np.sqrt(2.0 * np.pi)
    return _emit("gelu", x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _emit("relu", x.data * on, (x,), lambda g: (g * on,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


ACTIVATIONS = {"gelu": gelu, "relu": relu, "tanh": tanh}


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


# shape and reduction


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # (..., n) x (n, p): fold leading axes into one GEMM
        a2 = a.data.reshape(-1, a.shape[-1])
        data = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _emit("matmul", data, (a, b), vjp)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: batch dimensions differ, {a.shape} x {b.shape}") from exc

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", data, (a, b), vjp)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", np.asarray(data), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _emit("reshape", data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inverse),))


def getitem(x: Tensor, key) -> Tensor:
    data = np.array(x.data[key])

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _emit("getitem", data, (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    cuts = np.cumsum(sizes)[:-1]
    return _emit("concat", data, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


# normalisation and losses


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"log_softmax over empty axis {axis} of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _emit("log_softmax", y, (x,),
                 lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    n = x.shape[-1] if x.ndim else 0
    if n == 0:
        raise DimensionError("layer_norm over a zero-length row")
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        lead = tuple(range(x.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _emit("layer_norm", out, (x, gain, bias), vjp)


def cross_entropy(logits: Tensor, target, reduction: str = "mean") -> Tensor:
    """``-sum(target * log_softmax(logits))`` per row, reduced over all rows.

    ``target`` holds one probability distribution per row (same shape as
    ``logits``).  ``reduction`` is ``"mean"``, ``"sum"`` or ``"none"``.
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    if target.shape != logits.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs target {target.shape}")
    if logits.ndim == 0 or logits.shape[-1] == 0:
        raise DimensionError("cross_entropy needs a non-empty class axis")
    sums = target.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-4) or np.any(target < 0):
        raise ContractError("cross_entropy: target rows must be probability distributions")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    per_row = -(target * logp).sum(axis=-1)
    p = np.exp(logp)
    if reduction == "none":
        return _emit("cross_entropy", per_row, (logits,),
                     lambda g: (g[..., None] * (p - target),))
    if reduction == "sum":
        scale = 1.0
    elif reduction == "mean":
        scale = 1.0 / max(per_row.size, 1)
    else:
        raise ContractError(f"unknown reduction {reduction!r}")
    return _emit("cross_entropy", np.asarray(per_row.sum() * scale), (logits,),
                 lambda g: (g * scale * (p - target),))


def one_hot(ids, depth: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros(ids.shape + (depth,), dtype=DTYPE)
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


def embed(table: Tensor, ids, weights=None) -> Tensor:
    """Mixture lookup: ``out[..., :] = sum_k weights[..., k] * table[ids[..., k]]``.

    With ``weights`` omitted, ``ids`` are plain indices and this is a row
    lookup.  Sparse soft rows (a distribution over a few vocabulary entries)
    embed as the distribution-weighted sum of embedding rows.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if weights is None:
        ids = ids[..., None]
        weights = np.ones(ids.shape, dtype=DTYPE)
    weights = np.asarray(weights, dtype=DTYPE)
    if ids.shape != weights.shape:
        raise DimensionError(f"embed: ids {ids.shape} vs weights {weights.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError("embed: id outside the table")
    data = np.einsum("...k,...kh->...h", weights, table.data[ids])

    def vjp(g):
        gt = np.zeros_like(table.data)
        contrib = weights[..., None] * g[..., None, :]
        np.add.at(gt, ids.reshape(-1), contrib.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit("embed", data, (table,), vjp)


# backward and optimisation


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise ContractError("backward needs the tape the loss was recorded on")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    pending = {id(loss): np.ones_like(loss.data)}
    if not tape.produced(loss):
        _accumulate_leaf(loss, pending.pop(id(loss)))
        return
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            if tape.produced(t):
                prev = pending.get(id(t))
                pending[id(t)] = gi if prev is None else prev + gi
            else:
                _accumulate_leaf(t, gi)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.broadcast_to(g, t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g
    if not np.isfinite(t.grad).all():
        raise NonFiniteError(f"non-finite gradient in {t.name or 'tensor'}")


@dataclass
class AdamState:
    """Moments and step counter for :func:`adam_step`."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update; clears every parameter's grad afterwards."""
    for p in params:
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {p.name or p.shape} has no gradient")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    if len(state.first_moment) != len(params):
        raise ContractError("adam_step: parameter list does not match optimizer state")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        if m.shape != p.shape:
            raise ContractError(f"adam_step: moment shape {m.shape} != parameter {p.shape}")
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.grad = None
