"""Dense arrays with tape-based reverse-mode differentiation.

Only the handful of operations the network needs are provided. Every op
is a plain function taking and returning :class:`Tensor`; when a
:class:`Tape` is active and any input requires gradients, the op appends
a node holding its backward rule. :func:`backward` then replays the tape
in reverse.

Tensors are treated as immutable: ops never write into ``.data``. The
optimizer replaces a parameter's array wholesale.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError

_DTYPE = [np.float32]
_TAPES: list["Tape"] = []


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


def default_dtype():
    return _DTYPE[-1]


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.array(data, dtype=dtype or _DTYPE[-1])
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class _Node:
    inputs: tuple
    output: Tensor
    backward: object


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; ops executed inside are recorded in order,
    so every node's inputs are produced before the node itself.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self.nodes)


@contextlib.contextmanager
def no_grad():
    """Suspend recording, e.g. for inference inside a training step."""
    saved = _TAPES[:]
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.name = None
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].nodes.append(_Node(tuple(inputs), out, backward_fn))
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(tape: Tape, loss: Tensor, params=None):
    """Gradients of a scalar ``loss`` with respect to tape leaves.

    Returns a dict keyed by tensor. With ``params`` given, exactly those
    tensors are keys, and parameters the loss does not reach map to zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    seen = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        if node.output is not loss:
            del grads[id(node.output)]
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.data.dtype)
            key = id(inp)
            seen[key] = inp
            grads[key] = grads[key] + gi if key in grads else gi
    if params is None:
        return {seen[k]: v for k, v in grads.items()}
    return {p: grads.get(id(p), np.zeros_like(p.data)) for p in params}


# -- elementwise ---------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b):
    """Element-wise product; size-1 axes of either operand broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from None

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), bw)


def scale(x, c):
    x = as_tensor(x)
    return _result(x.data * x.dtype.type(c), (x,), lambda g: (g * c,))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


# -- linear algebra ------------------------------------------------------

def affine(x, weight, bias, activation="none"):
    """``act(x @ weight + bias)`` over the last axis of ``x``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise DimensionError(
            f"affine: input {x.shape} incompatible with weight {weight.shape} / bias {bias.shape}"
        )
    if activation not in ("relu", "none"):
        raise ValueError(f"unknown activation {activation!r}")
    z = x.data @ weight.data + bias.data
    mask = None
    if activation == "relu":
        mask = z > 0
        z = np.where(mask, z, 0).astype(z.dtype)

    def bw(g):
        if mask is not None:
            g = g * mask
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        return g @ weight.data.T, x2.T @ g2, g2.sum(axis=0, dtype=np.float64)

    return _result(z, (x, weight, bias), bw)


def matmul(a, b):
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not chain")

    # strided operands push numpy off the BLAS path
    ad, bd = np.ascontiguousarray(a.data), np.ascontiguousarray(b.data)

    def bw(g):
        g = np.ascontiguousarray(g)
        return (g @ np.ascontiguousarray(np.swapaxes(bd, -1, -2)),
                np.ascontiguousarray(np.swapaxes(ad, -1, -2)) @ g)

    return _result(ad @ bd, (a, b), bw)


# -- normalisation -------------------------------------------------------

def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data.astype(np.float64)
    z = np.exp(z - z.max(axis=axis, keepdims=True))
    s64 = z / z.sum(axis=axis, keepdims=True)
    s = s64.astype(x.dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        return (s64 * (g64 - (g64 * s64).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), bw)


def softmax_last(x):
    return softmax(x, axis=-1)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out64 = z - lse
    probs = np.exp(out64)

    def bw(g):
        g64 = g.astype(np.float64)
        return (g64 - probs * g64.sum(axis=axis, keepdims=True),)

    return _result(out64.astype(x.dtype), (x,), bw)


# -- reductions ----------------------------------------------------------

def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = np.asarray(np.sum(x.data, axis=axis, dtype=np.float64), dtype=x.dtype)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result(out, (x,), bw)


def mean(x, axis=None):
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / count)


def max_reduce(x, axis):
    """Maximum along ``axis``; gradient goes to the first maximal entry."""
    x = as_tensor(x)
    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis).squeeze(axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result(out, (x,), bw)


# -- indexing and shape --------------------------------------------------

def gather(x, index):
    """Rows of ``x`` picked by an integer array; output ``index.shape + x.shape[1:]``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ContractError(f"gather index out of range for {x.shape[0]} rows")

    def bw(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        np.add.at(gx, index.ravel(), g.reshape((-1,) + x.shape[1:]))
        return (gx,)

    return _result(x.data[index], (x,), bw)


def scatter_add(x, index, num_rows):
    """Sum slices of ``x`` into ``num_rows`` rows; the adjoint of :func:`gather`."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    if index.shape != x.shape[: index.ndim]:
        raise DimensionError(f"scatter_add: index {index.shape} does not lead {x.shape}")
    tail = x.shape[index.ndim:]
    out = np.zeros((num_rows,) + tail, dtype=np.float64)
    np.add.at(out, index.ravel(), x.data.reshape((-1,) + tail))
    return _result(out.astype(x.dtype), (x,), lambda g: (g[index],))


def take_last(x, index):
    """``out[n] = x[n, index[n]]`` for a 2-D ``x``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    rows = np.arange(x.shape[0])

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[rows, index] = g
        return (gx,)

    return _result(x.data[rows, index], (x,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}: {e}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), bw)


def slice_axis(x, axis, start, stop):
    x = as_tensor(x)
    axis = axis % x.ndim
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _result(x.data[sl], (x,), bw)


def transpose(x, axes):
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x, shape):
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


# -- parameters ----------------------------------------------------------

@dataclass
class Affine:
    """One fully connected layer applied over the last axis."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, fan_in, fan_out, rng):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True))

    @property
    def fan_in(self):
        return self.weight.shape[0]

    @property
    def fan_out(self):
        return self.weight.shape[1]

    def __call__(self, x, activation="none"):
        return affine(x, self.weight, self.bias, activation)

    def named_parameters(self, prefix):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


# -- finite differences --------------------------------------------------

def grad_check(forward, params, step=1e-3, max_entries=None, rng=None):
    """Largest relative disagreement between tape gradients and central differences.

    ``forward`` is a zero-argument callable returning a scalar tensor built
    from ``params``. For each parameter the error is
    ``|analytic - cd| / max(|analytic|, |cd|, 1e-8)`` with ``|.|`` the
    Euclidean norm over the checked entries. ``max_entries`` caps how many
    entries per parameter are perturbed (chosen with ``rng``).

    Run under ``precision(np.float64)`` with float64 parameters; single
    precision cannot resolve a 1e-3 step.
    """
    params = list(params)
    with Tape() as tape:
        loss = forward()
    grads = backward(tape, loss, params)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p in params:
        original = p.data
        entries = np.arange(original.size)
        if max_entries is not None and original.size > max_entries:
            entries = np.sort(rng.choice(original.size, max_entries, replace=False))
        analytic = grads[p].ravel()[entries].astype(np.float64)
        numeric = np.empty(len(entries))
        try:
            for n, e in enumerate(entries):
                values = []
                for sign in (1.0, -1.0):
                    bumped = original.copy()
                    bumped.flat[e] += sign * step
                    p.data = bumped
                    values.append(float(forward().data))
                numeric[n] = (values[0] - values[1]) / (2 * step)
        finally:
            p.data = original
        diff = np.linalg.norm(analytic - numeric)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, diff / denom)
    return worst
