"""Dense tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. :func:`backward`
walks the graph once in reverse topological order.

Broadcasting is restricted to leading-axis expansion: a binary operand may
have fewer dimensions than the other only if its shape is a suffix of the
other's shape. Anything else needs an explicit :func:`expand`.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_leaf_counter = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class Tensor:
    __slots__ = ("_data", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in DTYPES else np.float64
        dtype = np.dtype(dtype)
        if dtype not in DTYPES:
            raise TypeError(f"unsupported dtype {dtype}; use float32 or float64")
        self._data = np.array(arr, dtype=dtype)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        # Buffers are replaced, never edited, so graphs holding the old one stay valid.
        value = np.asarray(value)
        if value.shape != self._data.shape or value.dtype != self._data.dtype:
            raise ShapeError(
                f"cannot replace {self._data.dtype}{list(self._data.shape)} data "
                f"with {value.dtype}{list(value.shape)}"
            )
        self._data = np.array(value, copy=True)

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else float(self._data)

    def detach(self) -> "Tensor":
        return Tensor(self._data, requires_grad=False)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}, op={self.op}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out._data = data if type(data) is np.ndarray else np.asarray(data)
    out.name = None
    out.op = op
    needs = any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    for p in parents:
        p._data.flags.writeable = False
    return out


def _check_dtypes(op: str, *ts: Tensor) -> None:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise TypeError(f"{op}: mixed dtypes {dt} and {t.dtype}")


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"{op}: incompatible shapes {list(sa)} and {list(sb)} (only leading-axis expansion is allowed)")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_dtypes("add", a, b)
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_dtypes("sub", a, b)
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), -_reduce_to(g, sb)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_dtypes("mul", a, b)
    _binary_shapes("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_dtypes("div", a, b)
    _binary_shapes("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _reduce_to(g / bd, ad.shape), _reduce_to(-g * out / bd, bd.shape)

    return _make(out, (a, b), backward, "div")


def power(x: Tensor, exponent: float) -> Tensor:
    xd = x.data

    def backward(g):
        return (g * exponent * xd ** (exponent - 1),)

    return _make(xd**exponent, (x,), backward, "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _make(out, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (g / xd,)

    return _make(np.log(xd), (x,), backward, "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _make(out, (x,), backward, "sqrt")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), backward, "relu")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axes, keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot reshape {list(x.shape)} to {list(shape)}")
    orig = x.shape

    def backward(g):
        return (g.reshape(orig),)

    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {list(x.shape)} to {list(shape)}") from e
    return _make(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)) or len(axes) != x.ndim:
        raise ShapeError(f"transpose: invalid permutation {list(axes)} for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _make(x.data.transpose(axes), (x,), backward, "transpose")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of size-1 (or missing leading) axes to ``shape``."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as e:
        raise ShapeError(f"expand: cannot expand {list(x.shape)} to {list(shape)}") from e
    src = x.shape
    lead = len(shape) - len(src)
    keep = tuple(i + lead for i, s in enumerate(src) if s == 1 and shape[i + lead] != 1)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        if keep:
            g = g.sum(axis=tuple(k - lead for k in keep), keepdims=True)
        return (g,)

    return _make(out, (x,), backward, "expand")


def slice_(x: Tensor, starts: Sequence[int], stops: Sequence[int]) -> Tensor:
    """Contiguous slice ``x[starts[0]:stops[0], ...]`` with strict bounds."""
    if len(starts) != len(stops) or len(starts) > x.ndim:
        raise ShapeError(f"slice: {len(starts)} bounds given for rank {x.ndim}")
    index = []
    for ax, (lo, hi) in enumerate(zip(starts, stops)):
        if not 0 <= lo < hi <= x.shape[ax]:
            raise IndexError(f"slice: range [{lo}, {hi}) out of bounds for axis {ax} of extent {x.shape[ax]}")
        index.append(slice(lo, hi))
    return getitem(x, tuple(index))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape
    dtype = x.dtype
    out = x.data[index]
    advanced = _is_advanced(index)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(out, copy=True) if advanced else out, (x,), backward, "slice")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    _check_dtypes("concat", *tensors)
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat: shape {list(t.shape)} incompatible with {list(ref)} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            g[(slice(None),) * axis + (slice(bounds[i], bounds[i + 1]),)] for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    parts = []
    for t in tensors:
        shape = list(t.shape)
        ax = axis % (t.ndim + 1)
        shape.insert(ax, 1)
        parts.append(reshape(t, shape))
    return concat(parts, axis=axis)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Batched inputs must share batch dims, or ``b`` may be 2-D."""
    _check_dtypes("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ ({a.shape[-1]} vs {b.shape[-2]}) for {list(a.shape)} @ {list(b.shape)}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ for {list(a.shape)} @ {list(b.shape)}")
    if b.ndim > a.ndim:
        raise ShapeError(f"matmul: batch dims differ for {list(a.shape)} @ {list(b.shape)}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# normalization-style fused ops


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axes(axis, x.ndim)[0]
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axes(axis, x.ndim)[0]
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axes(axis, x.ndim)[0]
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    probs = e / s

    def backward(g):
        return (np.expand_dims(g, axis) * probs,)

    return _make(out, (x,), backward, "logsumexp")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``."""
    axis = _norm_axes(axis, x.ndim)[0]
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    clipped = norm <= eps
    denom = np.where(clipped, eps, norm)
    out = xd / denom

    def backward(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(clipped, g / denom, (g - out * proj) / denom),)

    return _make(out, (x,), backward, "l2_normalize")


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            if id(node) in seen:
                continue
            seen.add(id(node))
        if i < len(node._parents):
            stack.append((node, i + 1))
            parent = node._parents[i]
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, 0))
        else:
            order.append(node)
    return order


def leaf_key(t: Tensor) -> str:
    if t.name is None:
        t.name = f"_leaf{next(_leaf_counter)}"
    return t.name


def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor] | None = None) -> dict[str, Tensor]:
    """Gradients of a scalar ``loss`` with respect to trainable leaves.

    Returns a mapping from leaf name to gradient tensor. When ``params`` is
    given, every listed leaf gets an entry (zeros if the loss does not reach it).
    """
    if loss.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {list(loss.shape)}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                leaves[id(node)] = node
                grads[id(node)] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    result: dict[str, Tensor] = {}
    if params is None:
        targets = list(leaves.values())
    elif isinstance(params, Mapping):
        targets = list(params.values())
        for name, t in params.items():
            if t.name is None:
                t.name = name
    else:
        targets = list(params)
    for t in targets:
        g = grads.get(id(t))
        data = np.zeros(t.shape, dtype=t.dtype) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape)
        result[leaf_key(t)] = Tensor(np.array(data, copy=True))
    return result


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray | Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` receives fresh float64 tensors and must return a scalar. With
    ``max_coords`` set, that many coordinates per input are checked, chosen
    at random; otherwise every coordinate is. ``floor`` bounds the
    denominator of the relative error from below, so that gradients smaller
    than the finite-difference roundoff level are compared absolutely.
    """
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True, name=f"input{i}") for i, a in enumerate(arrays)]
    out = fn(*leaves)
    if out.size != 1:
        raise ShapeError(f"gradcheck: function output must be scalar, got shape {list(out.shape)}")
    analytic = backward(out, leaves)
    rng = np.random.default_rng(seed)

    def evaluate(arrs) -> float:
        return float(fn(*[Tensor(a) for a in arrs]).data)

    worst = 0.0
    for i, base in enumerate(arrays):
        ga = analytic[f"input{i}"].data.reshape(-1)
        coords = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            coords = rng.choice(base.size, size=max_coords, replace=False)
        for c in coords:
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i].reshape(-1)[c] += eps
            minus[i].reshape(-1)[c] -= eps
            fd = (evaluate(plus) - evaluate(minus)) / (2 * eps)
            a = float(ga[c])
            err = abs(a - fd) / max(abs(a), abs(fd), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# generic dispatch

_KINDS: dict[str, Callable[..., Tensor]] = {
    "add": lambda a, b: add(a, b),
    "sub": lambda a, b: sub(a, b),
    "mul": lambda a, b: mul(a, b),
    "matmul": lambda a, b: matmul(a, b),
    "exp": lambda x: exp(x),
    "log": lambda x: log(x),
    "sum": lambda x, axis=None, keepdims=False: tsum(x, axis, keepdims),
    "mean": lambda x, axis=None, keepdims=False: mean(x, axis, keepdims),
    "reshape": lambda x, shape: reshape(x, shape),
    "transpose": lambda x, axes=None: transpose(x, axes),
    "slice": lambda x, starts, stops: slice_(x, starts, stops),
    "concat": lambda *xs, axis=0: concat(xs, axis),
    "relu": lambda x: relu(x),
}


def op_apply(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Apply a named primitive, e.g. ``op_apply("sum", [x], axis=1)``."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {sorted(_KINDS)}") from None
    return fn(*inputs, **attrs)
