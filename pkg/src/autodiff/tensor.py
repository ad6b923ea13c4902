"""Dense reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable quantity in the toolkit is a ``Value``: a float64 array plus
the tape entry that produced it. Graphs are rebuilt on every forward pass and
walked once by ``backward``.
"""
import logging
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Operands have incompatible shapes"""
    pass


class GradientError(RuntimeError):
    """Backward pass was requested on an unsuitable graph"""
    pass


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Value:
    """A float64 tensor that can take part in reverse-mode differentiation.

    ``grad`` is lazily zero-initialised: reading it before any gradient has been
    accumulated returns zeros of the same shape.
    """

    # ndarray <op> Value defers to the reflected Value operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, parents: Tuple["Value", ...] = (),
                 op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self.op = op
        self._grad: Optional[np.ndarray] = None
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self._grad = None

    def detach(self) -> "Value":
        """Same data, cut from the graph"""
        return Value(self.data, requires_grad=False, op="detach")

    def accumulate(self, grad: np.ndarray) -> None:
        """Add ``grad`` into this node's gradient (summing over broadcast axes)."""
        if not self.requires_grad:
            return
        grad = _unbroadcast(np.asarray(grad, dtype=np.float64), self.data.shape)
        if self._grad is None:
            self._grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self._grad = self._grad + grad

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
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "Value":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Value":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Value":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims: bool = False) -> "Value":
        return reduce_max(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Value":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Value":
        return transpose(self, axes)

    def relu(self) -> "Value":
        return relu(self)

    def sigmoid(self) -> "Value":
        return sigmoid(self)

    def exp(self) -> "Value":
        return exp(self)

    def log(self) -> "Value":
        return log(self)

    def sqrt(self) -> "Value":
        return sqrt(self)

    def clamp(self, lo: Optional[float] = None, hi: Optional[float] = None) -> "Value":
        return clamp(self, lo, hi)


ValueLike = Union[Value, np.ndarray, float, int]


def as_value(x: ValueLike) -> Value:
    """Wrap constants; Values pass through untouched"""
    if isinstance(x, Value):
        return x
    return Value(x)


def _result(data: np.ndarray, parents: Tuple[Value, ...], op: str,
            backward_fn: Callable[[np.ndarray], None]) -> Value:
    requires_grad = any(p.requires_grad for p in parents)
    out = Value(data, requires_grad=requires_grad, parents=parents if requires_grad else (), op=op)
    if requires_grad:
        out._backward = backward_fn
    return out


def _check_broadcast(op: str, a: Value, b: Value) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# elementwise arithmetic

def add(a: ValueLike, b: ValueLike) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast("add", a, b)

    def backward(g):
        a.accumulate(g)
        b.accumulate(g)
    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a: ValueLike, b: ValueLike) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        a.accumulate(g)
        b.accumulate(-g)
    return _result(a.data - b.data, (a, b), "sub", backward)


def mul(a: ValueLike, b: ValueLike) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)
    return _result(a.data * b.data, (a, b), "mul", backward)


def div(a: ValueLike, b: ValueLike) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(g / b.data)
        if b.requires_grad:
            b.accumulate(-g * out / b.data)
    return _result(out, (a, b), "div", backward)


def neg(a: ValueLike) -> Value:
    a = as_value(a)

    def backward(g):
        a.accumulate(-g)
    return _result(-a.data, (a,), "neg", backward)


def power(a: ValueLike, exponent: float) -> Value:
    a = as_value(a)
    exponent = float(exponent)

    def backward(g):
        a.accumulate(g * exponent * a.data ** (exponent - 1.0))
    return _result(a.data ** exponent, (a,), "pow", backward)


def exp(a: ValueLike) -> Value:
    a = as_value(a)
    out = np.exp(a.data)

    def backward(g):
        a.accumulate(g * out)
    return _result(out, (a,), "exp", backward)


def log(a: ValueLike) -> Value:
    """Natural log; non-positive inputs yield -inf/nan and are the caller's concern."""
    a = as_value(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def backward(g):
        a.accumulate(g / a.data)
    return _result(out, (a,), "log", backward)


def sqrt(a: ValueLike) -> Value:
    a = as_value(a)
    out = np.sqrt(a.data)

    def backward(g):
        a.accumulate(g * 0.5 / out)
    return _result(out, (a,), "sqrt", backward)


def relu(a: ValueLike) -> Value:
    a = as_value(a)

    def backward(g):
        # subgradient 0 at the kink
        a.accumulate(g * (a.data > 0.0))
    return _result(np.maximum(a.data, 0.0), (a,), "relu", backward)


def sigmoid(a: ValueLike) -> Value:
    a = as_value(a)
    out = expit(a.data)

    def backward(g):
        a.accumulate(g * out * (1.0 - out))
    return _result(out, (a,), "sigmoid", backward)


def softplus(a: ValueLike) -> Value:
    """log(1 + exp(a)) without overflow."""
    a = as_value(a)
    out = np.logaddexp(0.0, a.data)

    def backward(g):
        a.accumulate(g * expit(a.data))
    return _result(out, (a,), "softplus", backward)


def softmax(a: ValueLike, axis: int = -1) -> Value:
    a = as_value(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a.accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))
    return _result(out, (a,), "softmax", backward)


def clamp(a: ValueLike, lo: Optional[float] = None, hi: Optional[float] = None) -> Value:
    """Clip into [lo, hi]; gradient 1 inside the closed interval, 0 outside."""
    a = as_value(a)
    lo_v = -np.inf if lo is None else lo
    hi_v = np.inf if hi is None else hi
    inside = (a.data >= lo_v) & (a.data <= hi_v)

    def backward(g):
        a.accumulate(g * inside)
    return _result(np.clip(a.data, lo_v, hi_v), (a,), "clamp", backward)


def maximum(a: ValueLike, b: ValueLike) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast("maximum", a, b)

    def backward(g):
        a.accumulate(g * (a.data > b.data))
        b.accumulate(g * (b.data > a.data))
    return _result(np.maximum(a.data, b.data), (a, b), "maximum", backward)


def minimum(a: ValueLike, b: ValueLike) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast("minimum", a, b)

    def backward(g):
        a.accumulate(g * (a.data < b.data))
        b.accumulate(g * (b.data < a.data))
    return _result(np.minimum(a.data, b.data), (a, b), "minimum", backward)


def where(mask: np.ndarray, a: ValueLike, b: ValueLike) -> Value:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = as_value(a), as_value(b)
    mask = np.asarray(mask, dtype=bool)

    def backward(g):
        a.accumulate(np.where(mask, g, 0.0))
        b.accumulate(np.where(mask, 0.0, g))
    return _result(np.where(mask, a.data, b.data), (a, b), "where", backward)


# reductions

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def reduce_sum(a: ValueLike, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        a.accumulate(np.broadcast_to(g, a.shape))
    return _result(out, (a,), "sum", backward)


def reduce_mean(a: ValueLike, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return reduce_sum(a, axis=axes, keepdims=keepdims) / float(max(count, 1))


def reduce_max(a: ValueLike, axis=None, keepdims: bool = False) -> Value:
    """Maximum; gradient flows only to a unique maximiser (ties are kinks, subgradient 0)."""
    a = as_value(a)
    axes = _normalize_axes(axis, a.ndim)
    top = a.data.max(axis=axes, keepdims=True)
    hit = a.data == top
    unique = hit.sum(axis=axes, keepdims=True) == 1
    out = top if keepdims else np.squeeze(top, axis=axes)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        a.accumulate(g * (hit & unique))
    return _result(out, (a,), "max", backward)


# linear algebra and convolution

def matmul(a: ValueLike, b: ValueLike) -> Value:
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b.accumulate(np.swapaxes(a.data, -1, -2) @ g)
    return _result(a.data @ b.data, (a, b), "matmul", backward)


def conv2d(x: ValueLike, weight: ValueLike, bias: Optional[ValueLike] = None,
           stride: int = 1, padding: int = 0) -> Value:
    """2-D cross-correlation of a (C, H, W) input with (O, C, kh, kw) weights."""
    x, weight = as_value(x), as_value(weight)
    bias = as_value(bias) if bias is not None else None
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    _, height, width = x.shape
    kh, kw = weight.shape[2:]
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ShapeError(f"conv2d: kernel {weight.shape[2:]} larger than padded input {xp.shape[1:]}")
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    out = np.tensordot(weight.data, cols, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out = out + bias.data[:, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if weight.requires_grad:
            weight.accumulate(np.tensordot(g, cols, axes=([1, 2], [1, 2])))
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=(1, 2)))
        if x.requires_grad:
            gcols = np.tensordot(weight.data, g, axes=([0], [0]))
            gxp = np.zeros_like(xp)
            ho, wo = g.shape[1:]
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            x.accumulate(gxp[:, padding:padding + height, padding:padding + width])
    return _result(out, parents, "conv2d", backward)


# indexing and data movement

def _check_indices(op: str, indices: np.ndarray, size: int) -> np.ndarray:
    indices = np.asarray(indices)
    if indices.ndim != 1 or not np.issubdtype(indices.dtype, np.integer):
        raise ShapeError(f"{op}: indices must be a 1-D integer array, got {indices.dtype} {indices.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= size):
        raise ShapeError(f"{op}: indices out of range for axis of size {size}")
    return indices


def gather(a: ValueLike, indices: np.ndarray, axis: int = 0) -> Value:
    """Rows (or slices along ``axis``) selected by a 1-D integer index array."""
    a = as_value(a)
    axis = axis % a.ndim
    indices = _check_indices("gather", indices, a.shape[axis])

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(np.moveaxis(ga, axis, 0), indices, np.moveaxis(g, axis, 0))
        a.accumulate(ga)
    return _result(np.take(a.data, indices, axis=axis), (a,), "gather", backward)


def scatter_add(src: ValueLike, indices: np.ndarray, size: int, axis: int = 0) -> Value:
    """Sum slices of ``src`` into ``size`` buckets along ``axis``."""
    src = as_value(src)
    axis = axis % src.ndim
    indices = _check_indices("scatter_add", indices, size)
    if indices.shape[0] != src.shape[axis]:
        raise ShapeError(f"scatter_add: {indices.shape[0]} indices for source axis of {src.shape[axis]}")
    out_shape = list(src.shape)
    out_shape[axis] = size
    out = np.zeros(out_shape)
    np.add.at(np.moveaxis(out, axis, 0), indices, np.moveaxis(src.data, axis, 0))

    def backward(g):
        src.accumulate(np.take(g, indices, axis=axis))
    return _result(out, (src,), "scatter_add", backward)


def index(a: ValueLike, key) -> Value:
    """General numpy indexing; duplicate fancy indices accumulate on the way back."""
    a = as_value(a)
    if isinstance(key, np.ndarray) and key.dtype == bool:
        key = np.nonzero(key)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        a.accumulate(ga)
    return _result(a.data[key], (a,), "index", backward)


def reshape(a: ValueLike, shape) -> Value:
    a = as_value(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None

    def backward(g):
        a.accumulate(g.reshape(a.shape))
    return _result(out, (a,), "reshape", backward)


def transpose(a: ValueLike, axes=None) -> Value:
    a = as_value(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a.accumulate(np.transpose(g, inverse))
    return _result(np.transpose(a.data, axes), (a,), "transpose", backward)


def concat(values: Sequence[ValueLike], axis: int = 0) -> Value:
    values = tuple(as_value(v) for v in values)
    if not values:
        raise ShapeError("concat: nothing to concatenate")
    try:
        out = np.concatenate([v.data for v in values], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[v.shape for v in values]}") from None
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]

    def backward(g):
        for v, piece in zip(values, np.split(g, splits, axis=axis)):
            v.accumulate(piece)
    return _result(out, values, "concat", backward)


def stack(values: Sequence[ValueLike], axis: int = 0) -> Value:
    values = tuple(as_value(v) for v in values)
    if not values:
        raise ShapeError("stack: nothing to stack")
    try:
        out = np.stack([v.data for v in values], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[v.shape for v in values]}") from None

    def backward(g):
        for i, v in enumerate(values):
            v.accumulate(np.take(g, i, axis=axis))
    return _result(out, values, "stack", backward)


def bilinear_sample(feature: ValueLike, coords: ValueLike) -> Value:
    """Sample a (C, H, W) map at K continuous (x, y) index coordinates -> (K, C).

    Coordinates address cell centres (x = column, y = row); samples outside the
    map read zeros. Differentiable w.r.t. both the map and the coordinates.
    """
    feature, coords = as_value(feature), as_value(coords)
    if feature.ndim != 3 or coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"bilinear_sample: feature {feature.shape} / coords {coords.shape} invalid")
    channels, height, width = feature.shape
    x, y = coords.data[:, 0], coords.data[:, 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    dx, dy = x - x0, y - y0
    corners = []
    for ox, oy, w, dwdx, dwdy in (
        (0, 0, (1 - dx) * (1 - dy), -(1 - dy), -(1 - dx)),
        (1, 0, dx * (1 - dy), (1 - dy), -dx),
        (0, 1, (1 - dx) * dy, -dy, (1 - dx)),
        (1, 1, dx * dy, dy, dx),
    ):
        cx, cy = x0 + ox, y0 + oy
        valid = (cx >= 0) & (cx < width) & (cy >= 0) & (cy < height)
        cxs, cys = np.where(valid, cx, 0), np.where(valid, cy, 0)
        vals = feature.data[:, cys, cxs].T * valid[:, None]
        corners.append((cxs, cys, valid, w, dwdx, dwdy, vals))
    out = sum(c[3][:, None] * c[6] for c in corners)

    def backward(g):
        if feature.requires_grad:
            gf = np.zeros_like(feature.data)
            for cxs, cys, valid, w, _, _, _ in corners:
                contrib = (g * (w * valid)[:, None]).T
                np.add.at(gf, (slice(None), cys, cxs), contrib)
            feature.accumulate(gf)
        if coords.requires_grad:
            gc = np.zeros_like(coords.data)
            for _, _, _, _, dwdx, dwdy, vals in corners:
                dot = (vals * g).sum(axis=1)
                gc[:, 0] += dwdx * dot
                gc[:, 1] += dwdy * dot
            coords.accumulate(gc)
    return _result(np.asarray(out, dtype=np.float64).reshape(len(x), channels), (feature, coords),
                   "bilinear_sample", backward)


def cross(a: ValueLike, b: ValueLike) -> Value:
    """Cross product along the last axis of two (..., 3) Values."""
    a, b = as_value(a), as_value(b)
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


def norm(a: ValueLike, axis: int = -1, eps: float = 0.0) -> Value:
    a = as_value(a)
    return sqrt(reduce_sum(a * a, axis=axis) + eps)


PRIMITIVES: Dict[str, Callable[..., Value]] = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "softmax": softmax,
    "log": log,
    "sum": reduce_sum,
    "max": reduce_max,
    "clamp": clamp,
    "gather": gather,
    "scatter_add": scatter_add,
    "bilinear_sample": bilinear_sample,
}


def forward_primitive(op_kind: str, inputs: Sequence[ValueLike], **attrs) -> Value:
    """Dispatch one primitive by name and link its result into the graph."""
    if op_kind not in PRIMITIVES:
        raise ValueError(f"Unknown primitive {op_kind!r}; expected one of {sorted(PRIMITIVES)}")
    return PRIMITIVES[op_kind](*inputs, **attrs)


def _topological_order(root: Value):
    order, visited = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in visited:
                stack_.append((parent, False))
    return order


def backward(root: Value) -> None:
    """Accumulate d(root)/d(node) into every reachable node that requires grad."""
    if root.size != 1:
        raise GradientError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        logger.debug("backward() on a constant root; nothing to do")
        return
    order = _topological_order(root)
    for node in order:
        if node._backward is not None:
            node._grad = None
    root.accumulate(np.ones_like(root.data))
    for node in reversed(order):
        if node._backward is not None and node._grad is not None:
            node._backward(node._grad)


def zero_grad(values: Sequence[Value]) -> None:
    for v in values:
        v.zero_grad()
