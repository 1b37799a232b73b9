"""Dense tensors with reverse-mode automatic differentiation.

Every primitive returns a new :class:`Tensor`; when any input requires a
gradient the result keeps references to its parents together with a closure
that maps the output gradient to parent gradients. :func:`backward` walks the
graph once in reverse topological order.

Broadcasting is limited to leading (batch) dimensions: the smaller operand's
shape must be a suffix of the larger one's, e.g. ``(B, T, d) + (d,)``.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, DimensionError, NonFiniteError, ParameterError, UsageError

_state = {"dtype": np.float32, "grad": True}


@contextlib.contextmanager
def precision(bits: int):
    """Set the dtype of newly created tensors (32 for training, 64 for gradient checks)."""
    if bits not in (32, 64):
        raise ParameterError(f"precision must be 32 or 64, got {bits}")
    prev = _state["dtype"]
    _state["dtype"] = np.float64 if bits == 64 else np.float32
    try:
        yield
    finally:
        _state["dtype"] = prev


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or _state["dtype"], copy=True)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._parents = ()
        t._backward = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return NotImplemented

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return permute(self, axes)

    @property
    def T(self):
        return swap_last(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=like.dtype))


def _finite_fast(data: np.ndarray) -> bool:
    flat = data.ravel()
    return math.isfinite(np.dot(flat, flat))


def _make(
    data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str, check: bool = True
) -> Tensor:
    # NaN or Inf anywhere poisons the sum of squares; full scan only to rule out overflow
    if check and not _finite_fast(data) and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor._wrap(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_suffix(a: tuple, b: tuple, op: str) -> None:
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{op}: shapes {a} and {b} differ beyond leading batch dims")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


_ones_cache: dict = {}


def _rowsum(x: np.ndarray) -> np.ndarray:
    """Sum over the last axis keeping it as size 1; a mat-vec beats ufunc.reduce on short rows."""
    key = (x.shape[-1], x.dtype)
    ones = _ones_cache.get(key)
    if ones is None:
        ones = _ones_cache[key] = np.ones((x.shape[-1], 1), dtype=x.dtype)
    return x @ ones


def _rowmax(x: np.ndarray) -> np.ndarray:
    """Max over the last axis (kept as size 1) by pairwise halving; exact and faster than ufunc.reduce."""
    m = x
    while m.shape[-1] > 1:
        half = m.shape[-1] // 2
        top = np.maximum(m[..., :half], m[..., half : 2 * half])
        if m.shape[-1] % 2:
            top[..., :1] = np.maximum(top[..., :1], m[..., -1:])
        m = top
    return m


# elementwise ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), back, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0)
    return _make(y, (a,), lambda g: (g * (y > 0),), "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError below
        y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``a + floor``."""
    z = a.data + a.dtype.type(floor)
    if (z <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return _make(np.log(z), (a,), lambda g: (g / z,), "log")


# shape ---------------------------------------------------------------------


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape", check=False)


def permute(a: Tensor, axes: tuple) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "permute", check=False)


def swap_last(a: Tensor) -> Tensor:
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "swap_last", check=False)


def getitem(a: Tensor, idx) -> Tensor:
    src, dt = a.shape, a.dtype
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, slice, type(Ellipsis))) or i is None for i in parts)

    def back(g):
        out = np.zeros(src, dtype=dt)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back, "getitem", check=False)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    ax = axis % datas[0].ndim
    for d in datas[1:]:
        if d.ndim != datas[0].ndim or any(
            d.shape[i] != datas[0].shape[i] for i in range(d.ndim) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {[x.shape for x in datas]}")
    bounds = np.cumsum([d.shape[ax] for d in datas])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate(datas, axis=ax), tuple(tensors), back, "concat", check=False)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    if len({d.shape for d in datas}) != 1:
        raise DimensionError(f"stack: shapes differ {[d.shape for d in datas]}")
    out = np.stack(datas, axis=axis)
    ax = axis % out.ndim

    def back(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(datas)))

    return _make(out, tuple(tensors), back, "stack", check=False)


# reductions ----------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = math.prod(a.shape[ax] for ax in axes)
    return scale(tsum(a, axis, keepdims), 1.0 / n)


# linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading batch dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = gb = None
        if bd.ndim == 2:
            if a.requires_grad:
                ga = g @ bd.T
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), back, "matmul")


# softmax family --------------------------------------------------------------


def _softmax(x: np.ndarray) -> np.ndarray:
    e = x - _rowmax(x)
    np.exp(e, out=e)
    e /= _rowsum(e)
    return e


def row_softmax(x: Tensor, t: float = 1.0) -> Tensor:
    """Softmax along the last axis at temperature ``t``."""
    if not t > 0:
        raise ParameterError(f"softmax temperature must be > 0, got {t}")
    inv_t = x.dtype.type(1.0 / t)
    y = _softmax(x.data / x.dtype.type(t) if t != 1 else x.data)

    def back(g):
        gy = g * y
        gy -= _rowsum(gy) * y
        if inv_t != 1:
            gy *= inv_t
        return (gy,)

    return _make(y, (x,), back, "row_softmax")


def normalize_rows(x: Tensor, floor: float = 0.0) -> Tensor:
    """Divide each last-axis row by its sum (after adding ``floor`` to every entry)."""
    z = x.data + x.dtype.type(floor)
    s = _rowsum(z)
    if (s <= 0).any():
        raise NonFiniteError("normalize_rows: row sum must be positive")
    y = z / s

    def back(g):
        return ((g - _rowsum(g * y)) / s,)

    return _make(y, (x,), back, "normalize_rows")


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_logits expects (B, C) logits, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {n}")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise DataError(f"labels must be integers in [0, {c})")
    z = logits.data - _rowmax(logits.data)
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(n)
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.dtype)

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1
        return (p * (g / n),)

    return _make(loss, (logits,), back, "cross_entropy_logits")


# normalisation ---------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    d = xd.shape[-1]
    inv_d = xd.dtype.type(1.0 / d)
    xc = xd - _rowsum(xd) * inv_d
    inv = 1.0 / np.sqrt(_rowsum(xc * xc) * inv_d + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gamma.data

    def back(g):
        gxhat = g * gd
        gx = gxhat - _rowsum(gxhat) * inv_d
        gx -= xhat * (_rowsum(gxhat * xhat) * inv_d)
        gx *= inv
        g2 = g.reshape(-1, d)
        ggamma = (xhat.reshape(-1, d) * g2).sum(axis=0)
        gbeta = g2.sum(axis=0)
        return gx, ggamma, gbeta

    return _make(xhat * gd + beta.data, (x, gamma, beta), back, "layer_norm")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each last-axis vector to unit Euclidean norm."""
    n = np.sqrt(_rowsum(x.data * x.data) + x.dtype.type(eps))
    y = x.data / n

    def back(g):
        return ((g - y * _rowsum(g * y)) / n,)

    return _make(y, (x,), back, "l2_normalize")


# convolution -----------------------------------------------------------------


def conv1d_out_len(t: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-t // stride)
    if padding == "valid":
        return (t - k) // stride + 1 if t >= k else 0
    raise ParameterError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: str = "same") -> Tensor:
    """Temporal convolution. ``x`` is (..., T, D_in), ``w`` is (k, D_in, D_out)."""
    if stride < 1:
        raise ParameterError(f"stride must be positive, got {stride}")
    if w.ndim != 3 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[0]
    t = x.shape[-2]
    t_out = conv1d_out_len(t, k, stride, padding)
    if t_out < 1:
        raise ParameterError(f"conv1d: empty output for T={t}, k={k}, stride={stride}, {padding}")
    pad_total = max((t_out - 1) * stride + k - t, 0) if padding == "same" else 0
    left = pad_total // 2
    xd, wd = x.data, w.data
    widths = [(0, 0)] * (xd.ndim - 2) + [(left, pad_total - left), (0, 0)]
    xp = np.pad(xd, widths)
    span = stride * (t_out - 1) + 1
    out = xp[..., 0:span:stride, :] @ wd[0]
    for j in range(1, k):
        out = out + xp[..., j : j + span : stride, :] @ wd[j]
    parents: tuple = (x, w)
    if b is not None:
        out = out + b.data
        parents = (x, w, b)

    def back(g):
        need_x = x.requires_grad
        gxp = np.zeros_like(xp) if need_x else None
        gw = np.empty_like(wd)
        g2 = g.reshape(-1, g.shape[-1])
        for j in range(k):
            win = xp[..., j : j + span : stride, :]
            gw[j] = win.reshape(-1, win.shape[-1]).T @ g2
            if need_x:
                gxp[..., j : j + span : stride, :] += g @ wd[j].T
        gx = gxp[..., left : left + t, :] if need_x else None
        grads = (gx, gw)
        if b is not None:
            grads += (g2.sum(axis=0),)
        return grads

    return _make(out, parents, back, "conv1d")


# backward --------------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray] | None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    With ``params`` given, returns a name -> gradient map covering exactly those
    parameters; ones unreachable from ``loss`` get zeros.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topo(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
    if params is None:
        return None
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()
    }


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[Tensor],
    eps: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` recomputes the scalar from the current parameter values; parameters
    are perturbed in place and restored.
    """
    plist = list(params.values()) if isinstance(params, Mapping) else list(params)
    for p in plist:
        p.grad = None
    backward(f())
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in plist]
    worst = 0.0
    with no_grad():
        for p, a in zip(plist, analytic):
            flat = p.data.reshape(-1)
            af = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                c = (fp - fm) / (2 * eps)
                err = abs(af[i] - c) / (abs(af[i]) + abs(c) + 1e-12)
                worst = max(worst, float(err))
    for p in plist:
        p.grad = None
    return worst
