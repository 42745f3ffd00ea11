"""Dense float64 arrays with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient; outside a tape every op is a plain numpy call, which
keeps environment rollouts and evaluation cheap.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)
    >>> float(x.grad[0])
    6.0
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_LOG_2PI = float(np.log(2.0 * np.pi))


class DiffMathError(Exception):
    pass


class ShapeError(DiffMathError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        desc = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class DomainError(DiffMathError, ValueError):
    def __init__(self, op: str, detail: str):
        self.op = op
        super().__init__(f"{op}: {detail}")


class BackwardError(DiffMathError, RuntimeError):
    pass


class GradCheckError(DiffMathError, RuntimeError):
    def __init__(self, message: str, param_name: str | None = None, index: int | None = None):
        self.param_name = param_name
        self.index = index
        super().__init__(message)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

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
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    @property
    def T(self): return transpose(self)


ArrayLike = Tensor | np.ndarray | float | int


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str
    needs: tuple[bool, ...]


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops.

    Nodes are appended in execution order, so the record is already topologically
    sorted and backward is a single reversed sweep.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise BackwardError("backward already ran on this tape; call reset() or record a new tape")
        if loss.size != 1:
            raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise BackwardError("loss was not recorded on this tape")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig, need in zip(node.inputs, in_grads, node.needs):
                if ig is None or not need:
                    continue
                if inp._tape is None:
                    if inp.grad is None:
                        inp.grad = np.array(ig, dtype=np.float64, copy=True).reshape(inp.shape)
                    else:
                        inp.grad = inp.grad + ig
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = ig if prev is None else prev + ig
        self.nodes.clear()


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it."""
    if loss._tape is None:
        raise BackwardError("loss is not attached to a tape (was it computed inside `with Tape():`?)")
    loss._tape.backward(loss)


class no_grad_for:
    """Temporarily mark tensors as not requiring gradients."""

    def __init__(self, tensors: Iterable[Tensor]):
        self.tensors = list(tensors)
        self._saved: list[bool] = []

    def __enter__(self):
        self._saved = [t.requires_grad for t in self.tensors]
        for t in self.tensors:
            t.requires_grad = False
        return self

    def __exit__(self, *exc):
        for t, flag in zip(self.tensors, self._saved):
            t.requires_grad = flag


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    tape = _active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    out._tape = tape
    # flags are captured now so no_grad_for scopes hold even if backward runs later
    tape.nodes.append(_Node(out, inputs, backward_fn, op, tuple(t.requires_grad for t in inputs)))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# elementwise binary ops

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return _emit(ad * bd, (a, b), bw, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0.0):
        raise DomainError("div", "division by zero")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)
    return _emit(out, (a, b), bw, "div")


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,), "neg")


def where(cond, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Select from ``a`` where ``cond`` is true, else from ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    try:
        out = np.where(cond, a.data, b.data)
    except ValueError:
        raise ShapeError("where", cond.shape, a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return _emit(out, (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                            _unbroadcast(np.where(cond, 0.0, g), sb)), "where")


# elementwise unary ops

def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp", f"overflow (max input {a.data.max():.4g})")
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log", f"non-positive input (min {a.data.min():.4g})")
    ad = a.data
    return _emit(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt", f"negative input (min {a.data.min():.4g})")
    out = np.sqrt(a.data)

    def bw(g):
        if np.any(out == 0.0):
            raise DomainError("sqrt", "gradient undefined at 0")
        return (g * 0.5 / out,)
    return _emit(out, (a,), bw, "sqrt")


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softplus(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit(_softplus(ad), (a,), lambda g: (g * _sigmoid(ad),), "softplus")


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit(np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0.0),), "relu")


def elu(a: ArrayLike, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    neg_part = alpha * np.expm1(np.minimum(ad, 0.0))
    out = np.where(ad > 0.0, ad, neg_part)
    return _emit(out, (a,), lambda g: (g * np.where(ad > 0.0, 1.0, neg_part + alpha),), "elu")


def clip(a: ArrayLike, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input is inside [lo, hi]."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _emit(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


def maximum(a: ArrayLike, floor: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit(np.maximum(ad, floor), (a,), lambda g: (g * (ad >= floor),), "maximum")


def stop_gradient(a: ArrayLike) -> Tensor:
    return Tensor(as_tensor(a).data)


# reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand_reduced(g: np.ndarray, shape, axes, keepdims) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    return _emit(np.sum(a.data, axis=axes, keepdims=keepdims), (a,),
                 lambda g: (_expand_reduced(g, shape, axes, keepdims),), "sum")


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    n = int(np.prod([shape[ax] for ax in axes])) if axes else 1
    if n == 0:
        raise ShapeError("mean", shape)
    return _emit(np.mean(a.data, axis=axes, keepdims=keepdims), (a,),
                 lambda g: (_expand_reduced(g, shape, axes, keepdims) / n,), "mean")


def logsumexp(a: ArrayLike, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    ad = a.data
    m = np.max(ad, axis=axes, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(ad - m), axis=axes, keepdims=True)
    out_k = np.log(s) + m
    soft = np.exp(ad - out_k)
    out = out_k if keepdims else np.squeeze(out_k, axis=axes)
    shape = a.shape
    return _emit(out, (a,), lambda g: (_expand_reduced(g, shape, axes, keepdims) * soft,), "logsumexp")


# structural ops

def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        idx = [slice(None)] * g.ndim
        res = []
        for i in range(len(ts)):
            idx[ax] = slice(bounds[i], bounds[i + 1])
            res.append(g[tuple(idx)])
        return res
    return _emit(out, ts, bw, "concat")


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[t.shape for t in ts]) from None
    ax = axis % out.ndim
    return _emit(out, ts, lambda g: [np.take(g, i, axis=ax) for i in range(len(ts))], "stack")


def getitem(a: ArrayLike, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ShapeError("getitem", shape) from exc
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return _emit(np.array(out, copy=True), (a,), bw, "getitem")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _emit(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: ArrayLike, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", old, tuple(shape)) from None
    return _emit(out, (a,), lambda g: (_unbroadcast(g, old),), "broadcast_to")


# linear algebra

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb
    return _emit(ad @ bd, (a, b), bw, "matmul")


def linear(x: ArrayLike, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` as one taped node; ``x`` may carry leading batch axes."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear", x.shape, weight.shape)
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)
    return _emit(out, inputs, bw, "linear")


def gru_cell(x: ArrayLike, h: ArrayLike, w_x: Tensor, w_h: Tensor, b_x: Tensor, b_h: Tensor) -> Tensor:
    """Fused GRU update (reset, update, candidate gates in that column order).

    r = sigmoid(x Wx_r + bx_r + h Wh_r + bh_r)
    u = sigmoid(x Wx_u + bx_u + h Wh_u + bh_u)
    n = tanh(x Wx_n + bx_n + r * (h Wh_n + bh_n))
    h' = (1 - u) * n + u * h
    """
    x, h = as_tensor(x), as_tensor(h)
    H = h.shape[-1]
    if w_x.shape != (x.shape[-1], 3 * H) or w_h.shape != (H, 3 * H):
        raise ShapeError("gru_cell", x.shape, h.shape, w_x.shape, w_h.shape)
    xd, hd = x.data, h.data
    gx = xd @ w_x.data + b_x.data
    gh = hd @ w_h.data + b_h.data
    r = _sigmoid(gx[..., :H] + gh[..., :H])
    u = _sigmoid(gx[..., H:2 * H] + gh[..., H:2 * H])
    ghn = gh[..., 2 * H:]
    n = np.tanh(gx[..., 2 * H:] + r * ghn)
    out = (1.0 - u) * n + u * hd

    def bw(g):
        dn = g * (1.0 - u)
        du = g * (hd - n)
        dn_pre = dn * (1.0 - n * n)
        dr_pre = dn_pre * ghn * r * (1.0 - r)
        du_pre = du * u * (1.0 - u)
        dgx = np.concatenate([dr_pre, du_pre, dn_pre], axis=-1)
        dgh = np.concatenate([dr_pre, du_pre, dn_pre * r], axis=-1)
        dx = dgx @ w_x.data.T if x.requires_grad else None
        dh = (dgh @ w_h.data.T + g * u) if h.requires_grad else None
        dgx2 = dgx.reshape(-1, 3 * H)
        dgh2 = dgh.reshape(-1, 3 * H)
        dwx = xd.reshape(-1, xd.shape[-1]).T @ dgx2 if w_x.requires_grad else None
        dwh = hd.reshape(-1, H).T @ dgh2 if w_h.requires_grad else None
        dbx = dgx2.sum(axis=0) if b_x.requires_grad else None
        dbh = dgh2.sum(axis=0) if b_h.requires_grad else None
        return dx, dh, dwx, dwh, dbx, dbh
    return _emit(out, (x, h, w_x, w_h, b_x, b_h), bw, "gru_cell")


def sq_dist_matrix(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Pairwise squared euclidean distances ``D[i, j] = ||a_i - b_j||^2`` for 2-D inputs."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("sq_dist_matrix", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = (ad * ad).sum(1)[:, None] + (bd * bd).sum(1)[None, :] - 2.0 * (ad @ bd.T)
    np.maximum(out, 0.0, out=out)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = 2.0 * (g.sum(1)[:, None] * ad - g @ bd)
        if b.requires_grad:
            gb = 2.0 * (g.sum(0)[:, None] * bd - g.T @ ad)
        return ga, gb
    return _emit(out, (a, b), bw, "sq_dist_matrix")


# gaussian helpers used by the distribution algebra

def gaussian_log_prob(x: ArrayLike, mu: ArrayLike, std: ArrayLike) -> Tensor:
    """Elementwise ``-0.5 * ((x - mu)^2 / std^2 + log std^2 + log 2pi)``."""
    x, mu, std = as_tensor(x), as_tensor(mu), as_tensor(std)
    try:
        shape = np.broadcast_shapes(x.shape, mu.shape, std.shape)
    except ValueError:
        raise ShapeError("gaussian_log_prob", x.shape, mu.shape, std.shape) from None
    if np.any(std.data <= 0.0):
        raise DomainError("gaussian_log_prob", "std must be positive")
    sd = std.data
    z = (x.data - mu.data) / sd
    out = -0.5 * (z * z + 2.0 * np.log(sd) + _LOG_2PI)

    def bw(g):
        gz = g * z / sd
        return (_unbroadcast(-gz, x.shape) if x.requires_grad else None,
                _unbroadcast(gz, mu.shape) if mu.requires_grad else None,
                _unbroadcast(g * (z * z - 1.0) / sd, std.shape) if std.requires_grad else None)
    del shape
    return _emit(out, (x, mu, std), bw, "gaussian_log_prob")


def gaussian_kl(mu_q: ArrayLike, std_q: ArrayLike, mu_p: ArrayLike, std_p: ArrayLike) -> Tensor:
    """Elementwise KL(N(mu_q, std_q^2) || N(mu_p, std_p^2))."""
    ts = tuple(as_tensor(t) for t in (mu_q, std_q, mu_p, std_p))
    try:
        np.broadcast_shapes(*[t.shape for t in ts])
    except ValueError:
        raise ShapeError("gaussian_kl", *[t.shape for t in ts]) from None
    mq, sq, mp, sp = (t.data for t in ts)
    if np.any(sq <= 0.0) or np.any(sp <= 0.0):
        raise DomainError("gaussian_kl", "std must be positive")
    diff = mq - mp
    vp = sp * sp
    ratio = sq / sp
    out = np.log(sp) - np.log(sq) + 0.5 * (ratio * ratio + diff * diff / vp) - 0.5
    out = np.maximum(out, 0.0)

    def bw(g):
        res = (
            g * diff / vp,
            g * (sq / vp - 1.0 / sq),
            -g * diff / vp,
            g * (1.0 / sp - (sq * sq + diff * diff) / (vp * sp)),
        )
        return tuple(_unbroadcast(r, t.shape) if t.requires_grad else None for r, t in zip(res, ts))
    return _emit(out, ts, bw, "gaussian_kl")


# parameter handling

def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: int
    per_param: dict[str, float]
    n_checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(p.name or f"param{i}", p) for i, p in enumerate(params)]


def check_gradients(f: Callable[[], Tensor], params, eps: float = 1e-5,
                    max_per_param: int | None = None, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare taped gradients of ``f`` against central finite differences.

    ``f`` must be deterministic: draw any noise from a fixed seed inside it.
    ``max_per_param`` subsamples coordinates of large parameters.
    """
    named = _named(params)
    zero_grads(p for _, p in named)
    with Tape() as tape:
        loss = f()
    if loss.size != 1:
        raise BackwardError(f"grad_check needs a scalar function, got shape {loss.shape}")
    if loss._tape is None:
        raise GradCheckError("function output does not depend on any parameter")
    tape.backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape)) for name, p in named}

    worst = (0.0, "", -1)
    per_param: dict[str, float] = {}
    n_checked = 0
    for name, p in named:
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        idxs = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idxs = (rng or np.random.default_rng(0)).choice(flat.size, max_per_param, replace=False)
        pworst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"non-finite function value perturbing {name}[{i}]", name, int(i))
            num = (fp - fm) / (2.0 * eps)
            an = a_flat[i]
            err = abs(an - num) / max(1.0, abs(an), abs(num))
            n_checked += 1
            if err > pworst:
                pworst = err
            if err > worst[0]:
                worst = (err, name, int(i))
        per_param[name] = pworst
    zero_grads(p for _, p in named)
    return GradCheckReport(worst[0], worst[1], worst[2], per_param, n_checked)


def grad_check(f: Callable[[], Tensor], params, eps: float = 1e-5) -> float:
    """Max over parameters of ``|analytic - numeric| / max(1, |analytic|, |numeric|)``."""
    return check_gradients(f, params, eps).max_rel_error
