"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every forward operation executed while a :class:`Tape` is active, and that
touches at least one tensor requiring gradients, appends a node to the tape.
:func:`backward` walks the tape in reverse and accumulates gradients into
:class:`Parameter` accumulators.

    >>> p = Parameter(np.array([1.0, 2.0]), name="p")
    >>> with Tape() as tape:
    ...     loss = (p * p).sum()
    >>> grads = backward(loss, tape)
    >>> p.grad
    array([2., 4.])
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericDomainError

GROUPS = (
    "pixel-decoder",
    "mask-mlp",
    "class-linear",
    "prompt-projection",
    "query-init",
    "pra",
    "void-embedding",
    "distribution-prompts",
)

LN_EPS = 1e-5

_ACTIVE: list = []


class Tape:
    """Ordered record of primitive operations.

    Used as a context manager; nested tapes shadow outer ones.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def __len__(self):
        return len(self.nodes)


class no_grad:
    """Suspend recording inside the block."""

    def __enter__(self):
        _ACTIVE.append(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False


def _current_tape():
    return _ACTIVE[-1] if _ACTIVE else None


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tensor:
    """Row-major float64 array, optionally tracked for differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self._requires_grad = bool(requires_grad)

    @property
    def requires_grad(self):
        return self._requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """Trainable tensor with a gradient accumulator and a group tag."""

    def __init__(self, data, name="", group="pra", trainable=True):
        super().__init__(data)
        if group not in GROUPS:
            raise ContractError(f"unknown parameter group {group!r}")
        self.name = name
        self.group = group
        self.trainable = bool(trainable)
        self.grad = np.zeros_like(self.data)

    @property
    def requires_grad(self):
        return self.trainable

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, group={self.group!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, inputs, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out._requires_grad = False
    tape = _current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out._requires_grad = True
        tape.nodes.append(_Node(inputs, out, backward_fn))
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad
    return _record(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if ra else None,
            _unbroadcast(g * ad, bd.shape) if rb else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0):
        idx = tuple(int(i) for i in np.argwhere(b.data == 0)[0])
        raise NumericDomainError(f"div: zero divisor at index {idx}")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product of an (m, k) and a (k, n) tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T if ra else None, ad.T @ g if rb else None))


# -- shape manipulation -------------------------------------------------------


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    src = a.shape
    return _record(out.copy(), (a,), lambda g: (g.reshape(src),))


def _unique_target(idx, shape):
    """True when ``idx`` addresses each element at most once."""
    parts = idx if isinstance(idx, tuple) else (idx,)
    arrays = [np.asarray(p) for p in parts if not isinstance(p, slice) and p is not None and p is not Ellipsis]
    if not arrays:
        return True
    if len(arrays) == 1 and arrays[0].dtype == bool:
        return True
    if len(arrays) == 1 and arrays[0].ndim == 1:
        a = arrays[0]
        return np.unique(a).size == a.size
    return False


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def bwd(g):
        full = np.zeros(src)
        if _unique_target(idx, src):
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record(np.array(a.data[idx]), (a,), bwd)


def concat(tensors: Sequence, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise DimensionError(f"concat: {err}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bwd(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _record(out, tuple(tensors), bwd)


def upsample_nearest(a, factor) -> Tensor:
    """Nearest-neighbour upsampling of a (C, h, w) raster by integer factors."""
    a = as_tensor(a)
    fh, fw = factor
    if a.ndim != 3:
        raise DimensionError(f"upsample expects (C, h, w), got {a.shape}")
    c, h, w = a.shape
    out = np.repeat(np.repeat(a.data, fh, axis=1), fw, axis=2)
    return _record(out, (a,), lambda g: (g.reshape(c, h, fh, w, fw).sum(axis=(2, 4)),))


# -- reductions ---------------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) / float(n)


# -- elementwise --------------------------------------------------------------


def _domain_check(tag, x, bad):
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NumericDomainError(f"{tag}: argument outside domain at index {idx} (value {x[idx]!r})")


def elementwise(tag: str, x) -> Tensor:
    """Apply one of sigmoid, tanh, relu, exp, log, sqrt elementwise."""
    x = as_tensor(x)
    d = x.data
    if tag == "sigmoid":
        out = np.empty_like(d)
        pos = d >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        e = np.exp(d[~pos])
        out[~pos] = e / (1.0 + e)
        return _record(out, (x,), lambda g: (g * out * (1.0 - out),))
    if tag == "tanh":
        out = np.tanh(d)
        return _record(out, (x,), lambda g: (g * (1.0 - out * out),))
    if tag == "relu":
        keep = d > 0
        return _record(np.where(keep, d, 0.0), (x,), lambda g: (g * keep,))
    if tag == "exp":
        out = np.exp(d)
        return _record(out, (x,), lambda g: (g * out,))
    if tag == "log":
        _domain_check("log", d, ~(d > 0))
        return _record(np.log(d), (x,), lambda g: (g / d,))
    if tag == "sqrt":
        _domain_check("sqrt", d, ~(d >= 0))
        out = np.sqrt(d)
        return _record(out, (x,), lambda g: (g * 0.5 / out,))
    raise ContractError(f"unknown elementwise op {tag!r}")


def sigmoid(x):
    return elementwise("sigmoid", x)


def tanh(x):
    return elementwise("tanh", x)


def relu(x):
    return elementwise("relu", x)


def exp(x):
    return elementwise("exp", x)


def log(x):
    return elementwise("log", x)


def sqrt(x):
    return elementwise("sqrt", x)


def square(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return _record(d * d, (x,), lambda g: (2.0 * g * d,))


def clip(x, lo, hi) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input is inside."""
    x = as_tensor(x)
    d = x.data
    inside = (d >= lo) & (d <= hi)
    return _record(np.clip(d, lo, hi), (x,), lambda g: (g * inside,))


def softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last dimension, got shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return _record(out, (x,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def layer_norm(x, gain, bias, eps=LN_EPS) -> Tensor:
    """Row-wise normalisation of an (n, c) tensor followed by an affine map."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DimensionError(
            f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape} are inconsistent"
        )
    d = x.data
    mu = d.mean(axis=1, keepdims=True)
    var = ((d - mu) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (d - mu) * rstd
    gd = gain.data

    def bwd(g):
        gx = g * gd
        dx = rstd * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record(xhat * gd + bias.data, (x, gain, bias), bwd)


def safe_norm(x, axis=-1, eps=1e-24) -> Tensor:
    """Euclidean norm along ``axis``; ``eps`` keeps the gradient finite at zero."""
    return sqrt(tsum(square(x), axis=axis) + eps)


def cosine(a, b, axis=-1) -> Tensor:
    return tsum(a * b, axis=axis) / (safe_norm(a, axis) * safe_norm(b, axis))


# -- differentiation ----------------------------------------------------------


def backward(root: Tensor, tape: Tape) -> dict:
    """Reverse-mode sweep from a scalar ``root``.

    Gradients of every Parameter reached are added to its ``grad``
    accumulator. Returns ``{leaf: gradient}`` for every leaf tensor that
    requires gradients and appears on the tape (unreached leaves get zeros).
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not tape.nodes or not any(n.output is root for n in tape.nodes):
        raise ContractError("root tensor was not produced on this tape")
    grads = {id(root): np.ones_like(root.data)}
    leaves = {}
    produced = {id(n.output) for n in tape.nodes}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, tg in zip(node.inputs, in_grads):
            if tg is None or not t.requires_grad:
                continue
            key = id(t)
            if key not in produced:
                leaves[key] = t
            if key in grads:
                grads[key] = grads[key] + tg
            else:
                grads[key] = np.array(tg, dtype=np.float64)
    out = {}
    for key, leaf in leaves.items():
        g = grads.get(key, np.zeros_like(leaf.data)).reshape(leaf.shape)
        if isinstance(leaf, Parameter):
            leaf.grad += g
        out[leaf] = g
    return out


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    point: Sequence[np.ndarray] | None = None,
) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f`` takes no arguments and rebuilds the scalar from the current values
    of ``params``. Error per coordinate is
    ``|a - c| / (|a| + |c| + 1e-8)``.
    """
    params = list(params)
    if point is not None:
        for p, v in zip(params, point):
            p.data[...] = v
    saved_grads = [p.grad.copy() if isinstance(p, Parameter) else None for p in params]
    with Tape() as tape:
        root = f()
    if not math.isfinite(root.item()):
        raise NumericDomainError("finite_diff_check: f is not finite at the base point")
    analytic = backward(root, tape) if tape.nodes else {}
    for p, saved in zip(params, saved_grads):
        if saved is not None:
            p.grad = saved

    worst = 0.0
    with no_grad():
        for p in params:
            a = analytic.get(p, np.zeros_like(p.data))
            flat = p.data.reshape(-1)
            af = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericDomainError(f"finite_diff_check: f not finite near coordinate {i} of {p!r}")
                central = (fp - fm) / (2.0 * h)
                err = abs(af[i] - central) / (abs(af[i]) + abs(central) + 1e-8)
                worst = max(worst, err)
    return worst
