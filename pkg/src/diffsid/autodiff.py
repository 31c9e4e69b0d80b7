"""Small define-by-run reverse-mode autodiff over dense float64 arrays.

Every primitive records one entry on the active :class:`Tape`; ``backward``
replays the tape in reverse. Only the operations the tokenizer and the
sequence model need are provided, and broadcasting is limited to adding a
bias over the last axis.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
NEG_INF = -1e9


class Tensor:
    __slots__ = ("data", "_grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self._grad = None
        self.requires_grad = requires_grad
        self.node: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


@dataclass
class _Entry:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    kind: str


class Tape:
    """Ordered record of executed primitives; inputs always precede outputs."""

    def __init__(self):
        self.entries: list[_Entry] = []
        self.enabled = True

    def record(self, kind, inputs, output, backward) -> Tensor:
        if self.enabled and any(t.requires_grad for t in inputs):
            output.requires_grad = True
            output.node = len(self.entries)
            self.entries.append(_Entry(tuple(inputs), output, backward, kind))
        return output

    def reset(self) -> None:
        for entry in self.entries:
            entry.output.node = None
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


def reset_tape() -> None:
    _TAPE.reset()


@contextmanager
def no_grad():
    previous = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = previous


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dx into ``x.grad`` for every tensor upstream of ``loss``."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, tuple[Tensor, np.ndarray]] = {id(loss): (loss, np.ones_like(loss.data))}
    stop = loss.node if loss.node is not None else -1
    for entry in reversed(_TAPE.entries[: stop + 1]):
        slot = grads.pop(id(entry.output), None)
        if slot is None:
            continue
        g = slot[1]
        out = entry.output
        out._grad = g if out._grad is None else out._grad + g
        for inp, gi in zip(entry.inputs, entry.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = (inp, grads[key][1] + gi)
            else:
                grads[key] = (inp, gi)
    for tensor, g in grads.values():
        tensor._grad = g if tensor._grad is None else tensor._grad + g


def _shape_error(kind: str, *tensors) -> ValueError:
    shapes = ", ".join(str(t.shape) for t in tensors)
    return ValueError(f"{kind}: incompatible shapes {shapes}")


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``b`` either a (k, n) matrix shared across a's leading
    axes or a batch with the same leading axes as ``a``."""
    if a.data.ndim < 1 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a, b)
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise _shape_error("matmul", a, b)
    out = Tensor(a.data @ b.data)

    def back(g):
        if b.data.ndim == 2:
            ga = g @ b.data.T
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _TAPE.record("matmul", (a, b), out, back)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias over a's last axis."""
    if a.shape == b.shape:
        out = Tensor(a.data + b.data)
        return _TAPE.record("add", (a, b), out, lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        out = Tensor(a.data + b.data)
        return _TAPE.record(
            "add", (a, b), out, lambda g: (g, g.reshape(-1, g.shape[-1]).sum(axis=0))
        )
    raise _shape_error("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("sub", a, b)
    out = Tensor(a.data - b.data)
    return _TAPE.record("sub", (a, b), out, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("mul", a, b)
    out = Tensor(a.data * b.data)
    return _TAPE.record("mul", (a, b), out, lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return _TAPE.record("scale", (a,), out, lambda g: (g * c,))


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    out = Tensor(np.array(a.data.sum()))
    return _TAPE.record("sum", (a,), out, lambda g: (np.full_like(a.data, g),))


def mean(a: Tensor) -> Tensor:
    return scale(total(a), 1.0 / a.data.size)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _TAPE.record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    return _TAPE.record("transpose", (a,), out, lambda g: (np.transpose(g, inverse),))


def softmax(a: Tensor) -> Tensor:
    out = Tensor(_softmax(a.data))

    def back(g):
        y = out.data
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _TAPE.record("softmax", (a,), out, back)


def log_softmax(a: Tensor) -> Tensor:
    out = Tensor(_log_softmax(a.data))

    def back(g):
        y = np.exp(out.data)
        return (g - y * g.sum(axis=-1, keepdims=True),)

    return _TAPE.record("log_softmax", (a,), out, back)


def gather_rows(table: Tensor, index) -> Tensor:
    """Embedding lookup: ``table[index]`` for an integer array of any shape."""
    index = np.asarray(index)
    if table.data.ndim != 2:
        raise _shape_error("gather_rows", table)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ValueError(
            f"gather_rows: index out of range for table of {table.shape[0]} rows"
        )
    out = Tensor(table.data[index])

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _TAPE.record("gather_rows", (table,), out, back)


def take_last(a: Tensor, index) -> Tensor:
    """Pick ``a[..., index[...]]``: one entry of the last axis per leading position."""
    index = np.asarray(index)
    if index.shape != a.shape[:-1]:
        raise _shape_error("take_last", a, Tensor(index))
    out = Tensor(np.take_along_axis(a.data, index[..., None], axis=-1)[..., 0])

    def back(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, index[..., None], g[..., None], axis=-1)
        return (ga,)

    return _TAPE.record("take_last", (a,), out, back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ndim = tensors[0].data.ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim or t.shape[:ax] + t.shape[ax + 1 :] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1 :]:
            raise _shape_error("concat", *tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax))
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _TAPE.record("concat", tuple(tensors), out, back)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n = a.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise _shape_error("layer_norm", a, gain, bias)
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data)

    def back(g):
        gx = g * gain.data
        ga = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, n)
        return ga, (g2 * xhat.reshape(-1, n)).sum(axis=0), g2.sum(axis=0)

    return _TAPE.record("layer_norm", (a, gain, bias), out, back)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(a.data * mask)
    return _TAPE.record("relu", (a,), out, lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner),)

    return _TAPE.record("gelu", (a,), out, back)


def sq_error_sum(a: Tensor, b: Tensor) -> Tensor:
    """``sum((a - b)**2)`` as a scalar."""
    if a.shape != b.shape:
        raise _shape_error("sq_error_sum", a, b)
    diff = a.data - b.data
    out = Tensor(np.array((diff**2).sum()))
    return _TAPE.record("sq_error_sum", (a, b), out, lambda g: (2 * g * diff, -2 * g * diff))


def neg_sq_dist(x: Tensor, codebook: Tensor) -> Tensor:
    """Logits ``-||x_n - e_k||^2`` for rows x (n, d) against entries (K, d)."""
    if x.data.ndim != 2 or codebook.data.ndim != 2 or x.shape[1] != codebook.shape[1]:
        raise _shape_error("neg_sq_dist", x, codebook)
    diff = x.data[:, None, :] - codebook.data[None, :, :]
    out = Tensor(-(diff**2).sum(axis=-1))

    def back(g):
        w = -2.0 * g[:, :, None] * diff
        return w.sum(axis=1), -w.sum(axis=0)

    return _TAPE.record("neg_sq_dist", (x, codebook), out, back)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Summed negative log-likelihood of integer targets over the last axis."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise _shape_error("cross_entropy", logits, Tensor(targets))
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise ValueError("cross_entropy: target index outside the vocabulary")
    logp = _log_softmax(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)
    out = Tensor(np.array(-picked.sum()))

    def back(g):
        gl = np.exp(logp)
        np.put_along_axis(
            gl, targets[..., None], np.take_along_axis(gl, targets[..., None], axis=-1) - 1.0, axis=-1
        )
        return (g * gl,)

    return _TAPE.record("cross_entropy", (logits,), out, back)


def soft_cross_entropy(logits: Tensor, probs: Tensor) -> Tensor:
    """``-sum(probs * log_softmax(logits))``; differentiable in both arguments."""
    if logits.shape != probs.shape:
        raise _shape_error("soft_cross_entropy", logits, probs)
    logp = _log_softmax(logits.data)
    out = Tensor(np.array(-(probs.data * logp).sum()))

    def back(g):
        s = probs.data.sum(axis=-1, keepdims=True)
        return g * (np.exp(logp) * s - probs.data), -g * logp

    return _TAPE.record("soft_cross_entropy", (logits, probs), out, back)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data.copy())


def attention_scores(q: Tensor, k: Tensor, mask=None) -> Tensor:
    """Scaled dot-product scores ``q k^T / sqrt(d) + mask``.

    ``q`` is (..., Lq, d), ``k`` is (..., Lk, d); ``mask`` is a constant additive
    array broadcastable to (..., Lq, Lk), with ``NEG_INF`` at blocked pairs.
    """
    if q.data.ndim < 2 or q.shape[:-2] != k.shape[:-2] or q.shape[-1] != k.shape[-1]:
        raise _shape_error("attention_scores", q, k)
    c = 1.0 / math.sqrt(q.shape[-1])
    s = (q.data @ np.swapaxes(k.data, -1, -2)) * c
    if mask is not None:
        s = s + mask
    out = Tensor(s)

    def back(g):
        return (g @ k.data) * c, (np.swapaxes(g, -1, -2) @ q.data) * c

    return _TAPE.record("attention_scores", (q, k), out, back)


# ---------------------------------------------------------------------------
# straight-through composition

_PINNED: list | None = None
_PIN_CURSOR = [0]


@contextmanager
def pinned_straight_through():
    """Freeze the detached side of every :func:`detached` call.

    The first evaluation inside the block records the hard and soft values;
    later evaluations reuse them, so ``hard(theta0) + soft(theta) -
    soft(theta0)`` can be probed by finite differences around ``theta0``.
    """
    global _PINNED
    previous = _PINNED
    _PINNED = []
    _PIN_CURSOR[0] = 0
    try:
        yield _restart_pins
    finally:
        _PINNED = previous


def _restart_pins():
    _PIN_CURSOR[0] = 0


def _pin(value: np.ndarray) -> np.ndarray:
    if _PINNED is None:
        return value
    i = _PIN_CURSOR[0]
    if i == len(_PINNED):
        _PINNED.append(np.array(value, dtype=DTYPE, copy=True))
    _PIN_CURSOR[0] = i + 1
    return _PINNED[i]


def detached(a: Tensor) -> Tensor:
    """Stop-gradient copy of ``a``; inside :func:`pinned_straight_through` the
    copy taken on the first evaluation is replayed instead."""
    if _PINNED is None:
        return stop_gradient(a)
    return Tensor(_pin(a.data))


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard`` exactly; gradient of ``soft``."""
    hard = np.asarray(hard, dtype=DTYPE)
    if hard.shape != soft.shape:
        raise _shape_error("straight_through", Tensor(hard), soft)
    return add(Tensor(_pin(hard)), sub(soft, detached(soft)))


# ---------------------------------------------------------------------------
# numerics shared with non-differentiable callers


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


softmax_np = _softmax
log_softmax_np = _log_softmax


def finite_diff_check(f: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5) -> float:
    """Largest relative gap between the tape gradient of ``f`` at ``point`` and a
    central difference, ``|a - n| / (|a| + |n| + 1e-12)``.

    ``f`` must be deterministic; any randomness has to come from a fixed stream.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = Tensor(point.data.copy(), requires_grad=True)
    reset_tape()
    _restart_pins()
    loss = f(x)
    backward(loss)
    analytic = x.grad.copy()
    reset_tape()
    numeric = np.zeros_like(analytic)
    base = x.data.copy()
    with no_grad():
        for i in np.ndindex(base.shape):
            probe = base.copy()
            probe[i] += step
            _restart_pins()
            hi = f(Tensor(probe)).item()
            probe[i] = base[i] - step
            _restart_pins()
            lo = f(Tensor(probe)).item()
            numeric[i] = (hi - lo) / (2 * step)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(rel.max()) if rel.size else 0.0
