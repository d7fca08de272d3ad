"""Dense numpy tensors with reverse-mode automatic differentiation.

Every primitive that touches a tensor with ``requires_grad=True`` records a
node carrying a monotonically increasing sequence number.  ``backward`` walks
the recorded nodes reachable from the output in descending sequence order,
which is exactly the reverse of the order in which they were recorded.
"""

from __future__ import annotations

import itertools
import math
import os
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "ContractError",
    "NumericInstabilityError",
    "tensor",
    "zeros",
    "ones",
    "randn",
    "no_grad",
    "grad_enabled",
    "backward",
    "forward_eval",
    "get_dtype",
    "set_precision",
    "precision",
    "matmul",
    "linear",
    "transpose",
    "reshape",
    "softmax",
    "log_softmax",
    "layer_norm",
    "relu",
    "gelu",
    "embedding",
    "cross_entropy",
    "l1_norm",
    "l2_norm",
    "diag_scale",
]


class DimensionError(ValueError):
    """Raised when operand shapes do not fit a primitive's signature."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its contract."""


class NumericInstabilityError(ArithmeticError):
    """Raised when a loss or gradient is not finite."""


_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = threading.local()
_seq = itertools.count()


def _precision_from_env() -> str:
    value = os.environ.get("PEFTLAB_PRECISION", "f64").strip().lower()
    if value not in _DTYPES:
        raise ValueError(f"PEFTLAB_PRECISION must be one of {sorted(_DTYPES)}, got {value!r}")
    return value


def get_dtype() -> type:
    name = getattr(_state, "precision", None) or _precision_from_env()
    return _DTYPES[name]


def set_precision(name: str | None) -> None:
    """Override the working precision for this thread ("f32", "f64" or None for env)."""
    if name is not None and name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}")
    _state.precision = name


@contextmanager
def precision(name: str):
    previous = getattr(_state, "precision", None)
    set_precision(name)
    try:
        yield
    finally:
        _state.precision = previous


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tape:
    """Ordered record of the primitives executed while the tape is active."""

    def __init__(self) -> None:
        self.records: list[tuple[str, Tensor]] = []

    @property
    def ops(self) -> list[str]:
        return [name for name, _ in self.records]

    def __enter__(self) -> Tape:
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def backward(self, output: Tensor) -> None:
        backward(output)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or get_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._seq = -1
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    def backward(self) -> None:
        backward(self)

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_dtype()), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=get_dtype()), requires_grad=requires_grad)


def randn(shape, rng: np.random.Generator, std: float = 1.0, requires_grad: bool = False) -> Tensor:
    return Tensor(rng.standard_normal(shape) * std, requires_grad=requires_grad)


def _as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = fn
        out._seq = next(_seq)
        stack = getattr(_state, "tapes", None)
        if stack:
            stack[-1].records.append((op, out))
    else:
        out._parents = ()
        out._backward = None
        out._seq = -1
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``.grad`` of every trainable leaf."""
    if output.data.size != 1:
        raise ContractError(f"backward requires a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if node._backward is None or id(node) in nodes:
            continue
        nodes[id(node)] = node
        stack.extend(node._parents)
    order = sorted(nodes.values(), key=lambda n: n._seq, reverse=True)
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node._backward(g, grads)


def _send(t: Tensor, g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
    """Route an upstream gradient to ``t``: leaves accumulate, interior nodes buffer."""
    if not t.requires_grad:
        return
    if t._backward is None:
        _accumulate(t, g)
    elif id(t) in grads:
        grads[id(t)] = grads[id(t)] + g
    else:
        grads[id(t)] = g


def forward_eval(program: Callable[..., Tensor], inputs: Sequence[Tensor]) -> tuple[Tensor, Tape]:
    """Run ``program(*inputs)`` under a fresh tape and return (output, tape)."""
    with Tape() as tape:
        out = program(*inputs)
    return out, tape


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_check("add", a, b)

    def fn(g, grads):
        _send(a, _unbroadcast(g, a.shape), grads)
        _send(b, _unbroadcast(g, b.shape), grads)

    return _make(a.data + b.data, (a, b), "add", fn)


def neg(a: Tensor) -> Tensor:
    def fn(g, grads):
        _send(a, -g, grads)

    return _make(-a.data, (a,), "neg", fn)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_check("mul", a, b)

    def fn(g, grads):
        if a.requires_grad:
            _send(a, _unbroadcast(g * b.data, a.shape), grads)
        if b.requires_grad:
            _send(b, _unbroadcast(g * a.data, b.shape), grads)

    return _make(a.data * b.data, (a, b), "mul", fn)


def power(a: Tensor, exponent: float) -> Tensor:
    def fn(g, grads):
        _send(a, g * exponent * a.data ** (exponent - 1), grads)

    return _make(a.data**exponent, (a,), "pow", fn)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def fn(g, grads):
        _send(a, g * out_data, grads)

    return _make(out_data, (a,), "exp", fn)


def log(a: Tensor) -> Tensor:
    def fn(g, grads):
        _send(a, g / a.data, grads)

    return _make(np.log(a.data), (a,), "log", fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def fn(g, grads):
        _send(a, g * mask, grads)

    return _make(a.data * mask, (a,), "relu", fn)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def fn(g, grads):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        _send(a, g * (cdf + x * pdf), grads)

    return _make(x * cdf, (a,), "gelu", fn)


# -- reductions and shape ------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def fn(g, grads):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _send(a, np.broadcast_to(g, a.shape), grads)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), "sum", fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None

    def fn(g, grads):
        _send(a, g.reshape(a.shape), grads)

    return _make(out, (a,), "reshape", fn)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose: need at least 2 dims, got shape {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def fn(g, grads):
        _send(a, g.transpose(inverse), grads)

    return _make(a.data.transpose(axes), (a,), "transpose", fn)


def getitem(a: Tensor, index) -> Tensor:
    def fn(g, grads):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _send(a, full, grads)

    return _make(a.data[index], (a,), "slice", fn)


# -- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def fn(g, grads):
        if a.requires_grad:
            _send(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape), grads)
        if b.requires_grad:
            _send(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape), grads)

    return _make(out, (a, b), "matmul", fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (..., d1) and weight (d2, d1)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def fn(g, grads):
        if x.requires_grad:
            _send(x, g @ weight.data, grads)
        g2 = g.reshape(-1, g.shape[-1])
        if weight.requires_grad:
            _send(weight, g2.T @ x.data.reshape(-1, x.shape[-1]), grads)
        if bias is not None and bias.requires_grad:
            _send(bias, g2.sum(axis=0), grads)

    return _make(out, parents, "linear", fn)


def diag_scale(m: Tensor, v: Tensor) -> Tensor:
    """``m @ diag(v)``: scale column k of ``m`` by ``v[k]``."""
    if v.ndim != 1 or m.shape[-1] != v.shape[0]:
        raise DimensionError(f"diag_scale: matrix {m.shape} does not match vector {v.shape}")

    def fn(g, grads):
        if m.requires_grad:
            _send(m, g * v.data, grads)
        if v.requires_grad:
            _send(v, (g * m.data).reshape(-1, v.shape[0]).sum(axis=0), grads)

    return _make(m.data * v.data, (m, v), "diag_scale", fn)


# -- neural primitives -------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g, grads):
        _send(a, y * (g - (g * y).sum(axis=axis, keepdims=True)), grads)

    return _make(y, (a,), "softmax", fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def fn(g, grads):
        _send(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True), grads)

    return _make(y, (a,), "log_softmax", fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def fn(g, grads):
        if x.requires_grad:
            gx = g * gamma.data
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _send(x, dx, grads)
        if gamma.requires_grad:
            _send(gamma, (g * xhat).reshape(-1, d).sum(axis=0), grads)
        if beta.requires_grad:
            _send(beta, g.reshape(-1, d).sum(axis=0), grads)

    return _make(out, (x, gamma, beta), "layernorm", fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: token id out of range [0, {table.shape[0]})")

    def fn(g, grads):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _send(table, full, grads)

    return _make(table.data[ids], (table,), "embedding", fn)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int | None = None) -> Tensor:
    """Mean token-level cross-entropy over positions whose target != ignore_index."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    keep = np.ones_like(t, dtype=bool) if ignore_index is None else t != ignore_index
    count = max(int(keep.sum()), 1)
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    safe_t = np.where(keep, t, 0)
    picked = logp[np.arange(len(t)), safe_t]
    loss = -(picked * keep).sum() / count

    def fn(g, grads):
        p = np.exp(logp)
        p[np.arange(len(t)), safe_t] -= 1.0
        p *= keep[:, None] / count
        _send(logits, (g * p).reshape(logits.shape), grads)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), "cross_entropy", fn)


def l1_norm(a: Tensor) -> Tensor:
    """Sum of absolute values; the subgradient at zero is 0."""

    def fn(g, grads):
        _send(a, g * np.sign(a.data), grads)

    return _make(np.asarray(np.abs(a.data).sum(), dtype=a.dtype), (a,), "l1_norm", fn)


def l2_norm(a: Tensor, axis=None) -> Tensor:
    """Euclidean norm over ``axis`` (all entries when None); gradient 0 at the origin."""
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))

    def fn(g, grads):
        gk = g if axis is None else np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(norm > 0, a.data / norm, 0.0)
        _send(a, gk * ratio, grads)

    out = norm.reshape(()) if axis is None else np.squeeze(norm, axis=axis)
    return _make(np.asarray(out), (a,), "l2_norm", fn)


def stack_scalars(values: Iterable[Tensor]) -> Tensor:
    """Sum a sequence of scalar tensors (left to right, deterministic order)."""
    total = None
    for v in values:
        total = v if total is None else total + v
    if total is None:
        return Tensor(0.0)
    return total
