"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op builds its output eagerly and attaches a backward closure that maps
the upstream gradient to gradients for each parent. ``backward`` walks the
recorded graph once in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """An op was called outside its contract (non-scalar loss, bad axis, ...)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Tensor] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a single-element tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --- recording ----------------------------------------------------------------

class ComputationRecord:
    """Ordered trace of ops executed while the record is active.

    Each entry is ``(op_fn, inputs, kwargs, output)``; :meth:`replay` re-runs
    the ops from the original leaves and returns the recomputed outputs.
    """

    def __init__(self):
        self.entries: list[tuple] = []

    def __len__(self) -> int:
        return len(self.entries)

    def replay(self) -> list[Tensor]:
        remap: dict[int, Tensor] = {}
        outputs = []
        for fn, inputs, kwargs, out in self.entries:
            args = [remap.get(id(t), t) if isinstance(t, Tensor) else t for t in inputs]
            res = fn(*args, **kwargs)
            if isinstance(res, tuple):
                res = res[0]
            remap[id(out)] = res
            outputs.append(res)
        return outputs


_ACTIVE_RECORDS: list[ComputationRecord] = []


@contextlib.contextmanager
def record():
    rec = ComputationRecord()
    _ACTIVE_RECORDS.append(rec)
    try:
        yield rec
    finally:
        _ACTIVE_RECORDS.remove(rec)


def _log(fn, inputs, kwargs, out):
    for rec in _ACTIVE_RECORDS:
        rec.entries.append((fn, tuple(inputs), dict(kwargs), out))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_axis(x: Tensor, axis: int) -> int:
    nd = x.ndim
    if not -nd <= axis < nd:
        raise ContractError(f"axis {axis} out of range for shape {list(x.shape)}")
    return axis % nd


# --- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot add shapes {list(a.shape)} and {list(b.shape)}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    out = _node(data, (a, b), backward, "add")
    _log(add, (a, b), {}, out)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"cannot subtract shapes {list(a.shape)} and {list(b.shape)}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    out = _node(data, (a, b), backward, "sub")
    _log(sub, (a, b), {}, out)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot multiply shapes {list(a.shape)} and {list(b.shape)}") from None

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    out = _node(data, (a, b), backward, "mul")
    _log(mul, (a, b), {}, out)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    out = _node(x.data * c, (x,), backward, "scale")
    _log(scale, (x,), {"c": c}, out)
    return out


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def backward(g):
        return (g * y,)

    out = _node(y, (x,), backward, "exp")
    _log(exp, (x,), {}, out)
    return out


def log(x: Tensor) -> Tensor:
    def backward(g):
        return (g / x.data,)

    out = _node(np.log(x.data), (x,), backward, "log")
    _log(log, (x,), {}, out)
    return out


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, no gradient path."""
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out.op = "stop_gradient"
    _log(stop_gradient, (x,), {}, out)
    return out


# --- shape ops ----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {list(x.shape)} to {list(shape)}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    out = _node(data, (x,), backward, "reshape")
    _log(reshape, (x,), {"shape": shape}, out)
    return out


def transpose(x: Tensor, axes=None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        if x.ndim < 2:
            raise ContractError(f"transpose needs ndim >= 2, got shape {list(x.shape)}")
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    out = _node(x.data.transpose(axes), (x,), backward, "transpose")
    _log(transpose, (x,), {"axes": axes}, out)
    return out


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise DimensionError(f"cannot concat shapes {[list(x.shape) for x in xs]} on axis {axis}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    out = _node(data, xs, backward, "concat")
    _log(_concat_star, tuple(xs), {"axis": axis}, out)
    return out


def _concat_star(*xs, axis=-1):
    return concat(xs, axis=axis)


# --- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {list(a.shape)} x {list(b.shape)}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul shape mismatch: {list(a.shape)} x {list(b.shape)}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    out = _node(data, (a, b), backward, "matmul")
    _log(matmul, (a, b), {}, out)
    return out


# --- reductions ---------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    out = _node(np.asarray(data, dtype=np.float64), (x,), backward, "sum")
    _log(sum, (x,), {"axis": axis, "keepdims": keepdims}, out)
    return out


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = float(x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims) / count, dtype=np.float64)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    out = _node(data, (x,), backward, "mean")
    _log(mean, (x,), {"axis": axis, "keepdims": keepdims}, out)
    return out


def reduce_max(x: Tensor, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """Per-slice maximum along ``axis`` and the first index attaining it.

    The gradient is routed to the first argmax only.
    """
    axis = _check_axis(x, axis)
    if x.shape[axis] == 0:
        raise ContractError(f"reduce_max over empty axis {axis} of shape {list(x.shape)}")
    idx = np.argmax(x.data, axis=axis)
    vals = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    out = _node(vals, (x,), backward, "reduce_max")
    _log(reduce_max, (x,), {"axis": axis}, out)
    return out, idx


# --- normalisation ------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    out = _node(y, (x,), backward, "softmax")
    _log(softmax, (x,), {"axis": axis}, out)
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    out = _node(y, (x,), backward, "log_softmax")
    _log(log_softmax, (x,), {"axis": axis}, out)
    return out


def layer_norm(x: Tensor, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply optional affine gain/bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def backward(g):
        gx = (inv / n) * (n * g - g.sum(axis=-1, keepdims=True)
                          - xhat * (g * xhat).sum(axis=-1, keepdims=True))
        return (gx,)

    out = _node(xhat, (x,), backward, "layer_norm")
    _log(_layer_norm_plain, (x,), {"eps": eps}, out)
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def _layer_norm_plain(x, eps=1e-5):
    return layer_norm(x, eps=eps)


# --- differentiation ----------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Returns a map from ``id(leaf)`` to its gradient tensor.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[id(node)] = node
            node.grad = Tensor(g) if node.grad is None else Tensor(node.grad.data + g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return {k: v.grad for k, v in leaves.items()}


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``."""
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = probe.grad.data if probe.grad is not None else np.zeros_like(probe.data)
    numeric = np.zeros_like(x.data)
    base = x.data.astype(np.float64).copy()
    flat = base.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(Tensor(base.copy())).item()
        flat[i] = old - eps
        fm = f(Tensor(base.copy())).item()
        flat[i] = old
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
    return _rel_err(analytic, numeric)


def gradcheck_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                     per_param: bool = False):
    """Like :func:`finite_diff_check` but perturbs ``params`` in place.

    ``loss_fn`` must rebuild the graph from the live parameter tensors.
    Returns the worst error, or one error per parameter with ``per_param``.
    """
    for p in params:
        p.grad = None
    backward(loss_fn())
    errors = []
    for p in params:
        analytic = p.grad.data.copy() if p.grad is not None else np.zeros_like(p.data)
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = loss_fn().item()
            flat[i] = old - eps
            fm = loss_fn().item()
            flat[i] = old
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
        errors.append(_rel_err(analytic, numeric))
    for p in params:
        p.grad = None
    if per_param:
        return errors
    return max(errors, default=0.0)


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
