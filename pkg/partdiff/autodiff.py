"""Minimal reverse mode automatic differentiation over numpy arrays.

Every differentiable value is a :class:`Tensor`. Operations record their
parents together with a closure mapping the upstream gradient to one
gradient per parent (a vector-Jacobian product). :func:`backward` walks the
recorded graph once in reverse topological order and accumulates gradients
into the leaves that require them.
"""
import logging
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp as _np_logsumexp

from ._typings import Number, Shape, SlotsT
from .errors import NonFiniteError, ShapeError
from .helper import Helper

__all__ = [
    "Tensor",
    "as_tensor",
    "backward",
    "broadcast_to",
    "clamp_min",
    "concat",
    "embedding",
    "exp",
    "gather",
    "gelu",
    "grad_check",
    "layer_norm",
    "log",
    "log_softmax",
    "logsumexp",
    "matmul",
    "mean_pool3d",
    "sigmoid",
    "silu",
    "softmax",
    "stop_gradient",
    "straight_through",
    "upsample3d",
    "zeros_param",
]

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, Number, Sequence[Any]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

# x * sigmoid(1.702 x), the sigmoid form of the GELU approximation
GELU_SIGMOID_SCALE: float = 1.702


class Tensor:
    __slots__: SlotsT = [
        "__weakref__",
        "data",
        "requires_grad",
        "grad",
        "name",
        "_parents",
        "_backward",
        "_op",
    ]

    # numpy operands on the left defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Optional[np.dtype] = None,
    ) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(
            data, dtype=dtype if dtype is not None else Helper.default_dtype()
        )
        self.requires_grad: bool = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name: Optional[str] = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op: str = "leaf"

    @property
    def shape(self) -> Shape:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: Number) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __rmatmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(other, self)

    def __getitem__(self, index: Any) -> "Tensor":
        return getitem(self, index)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes if axes else None)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def __str__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad}, name={self.name})"

    def __repr__(self) -> str:
        return self.__str__()


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def zeros_param(shape: Shape, name: Optional[str] = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def _result(
    data: np.ndarray, parents: Iterable[Tensor], fn: BackwardFn, op: str
) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: Shape) -> np.ndarray:
    """Sum grad down to shape, undoing numpy broadcasting"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Shape:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _broadcast_shape(ta, tb, "add")
    return _result(
        ta.data + tb.data,
        (ta, tb),
        lambda g: (_unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)),
        "add",
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _broadcast_shape(ta, tb, "sub")
    return _result(
        ta.data - tb.data,
        (ta, tb),
        lambda g: (_unbroadcast(g, ta.shape), _unbroadcast(-g, tb.shape)),
        "sub",
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _broadcast_shape(ta, tb, "mul")
    return _result(
        ta.data * tb.data,
        (ta, tb),
        lambda g: (
            _unbroadcast(g * tb.data, ta.shape),
            _unbroadcast(g * ta.data, tb.shape),
        ),
        "mul",
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _broadcast_shape(ta, tb, "div")
    return _result(
        ta.data / tb.data,
        (ta, tb),
        lambda g: (
            _unbroadcast(g / tb.data, ta.shape),
            _unbroadcast(-g * ta.data / (tb.data * tb.data), tb.shape),
        ),
        "div",
    )


def neg(a: ArrayLike) -> Tensor:
    ta = as_tensor(a)
    return _result(-ta.data, (ta,), lambda g: (-g,), "neg")


def power(a: ArrayLike, exponent: Number) -> Tensor:
    ta = as_tensor(a)
    return _result(
        ta.data ** exponent,
        (ta,),
        lambda g: (g * exponent * ta.data ** (exponent - 1),),
        "pow",
    )


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product over the last two axes with numpy broadcasting"""
    ta, tb = as_tensor(a), as_tensor(b)
    if ta.ndim < 2 or tb.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {ta.shape} and {tb.shape}")
    if ta.shape[-1] != tb.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ {ta.shape} @ {tb.shape}")
    try:
        data = np.matmul(ta.data, tb.data)
    except ValueError:
        raise ShapeError(f"matmul: cannot broadcast {ta.shape} @ {tb.shape}")

    def _backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        ga = np.matmul(g, np.swapaxes(tb.data, -1, -2))
        gb = np.matmul(np.swapaxes(ta.data, -1, -2), g)
        return _unbroadcast(ga, ta.shape), _unbroadcast(gb, tb.shape)

    return _result(data, (ta, tb), _backward, "matmul")


def reshape(a: ArrayLike, shape: Shape) -> Tensor:
    ta = as_tensor(a)
    try:
        data = ta.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {ta.shape} into {shape}")
    return _result(data, (ta,), lambda g: (g.reshape(ta.shape),), "reshape")


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    ta = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(ta.ndim)))
    if sorted(int(x) % max(ta.ndim, 1) for x in axes) != list(range(ta.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for rank {ta.ndim}")
    inverse = np.argsort([int(x) % ta.ndim for x in axes])
    return _result(
        np.transpose(ta.data, axes),
        (ta,),
        lambda g: (np.transpose(g, inverse),),
        "transpose",
    )


def broadcast_to(a: ArrayLike, shape: Shape) -> Tensor:
    ta = as_tensor(a)
    try:
        data = np.broadcast_to(ta.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {ta.shape} to {shape}")
    return _result(data, (ta,), lambda g: (_unbroadcast(g, ta.shape),), "broadcast")


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat needs at least one operand")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _result(
        data, parts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat"
    )


def getitem(a: ArrayLike, index: Any) -> Tensor:
    ta = as_tensor(a)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        out = np.zeros_like(ta.data)
        np.add.at(out, index, g)
        return (out,)

    return _result(np.array(ta.data[index]), (ta,), _backward, "slice")


def tsum(a: ArrayLike, axis: Any = None, keepdims: bool = False) -> Tensor:
    ta = as_tensor(a)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ta.shape).copy(),)

    return _result(
        np.sum(ta.data, axis=axis, keepdims=keepdims), (ta,), _backward, "sum"
    )


def mean(a: ArrayLike, axis: Any = None, keepdims: bool = False) -> Tensor:
    ta = as_tensor(a)
    if axis is None:
        count = ta.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([ta.shape[x] for x in axes]))
    return tsum(ta, axis, keepdims) * (1.0 / count)


def exp(a: ArrayLike) -> Tensor:
    ta = as_tensor(a)
    data = np.exp(ta.data)
    return _result(data, (ta,), lambda g: (g * data,), "exp")


def log(a: ArrayLike) -> Tensor:
    ta = as_tensor(a)
    return _result(np.log(ta.data), (ta,), lambda g: (g / ta.data,), "log")


def sigmoid(a: ArrayLike) -> Tensor:
    ta = as_tensor(a)
    data = 0.5 * (1.0 + np.tanh(0.5 * ta.data))
    return _result(data, (ta,), lambda g: (g * data * (1.0 - data),), "sigmoid")


def gelu(a: ArrayLike) -> Tensor:
    ta = as_tensor(a)
    return ta * sigmoid(ta * GELU_SIGMOID_SCALE)


def silu(a: ArrayLike) -> Tensor:
    ta = as_tensor(a)
    return ta * sigmoid(ta)


def clamp_min(a: ArrayLike, floor: float) -> Tensor:
    ta = as_tensor(a)
    keep = ta.data > floor
    return _result(
        np.where(keep, ta.data, floor), (ta,), lambda g: (g * keep,), "clamp_min"
    )


def logsumexp(a: ArrayLike, axis: int = -1, keepdims: bool = False) -> Tensor:
    ta = as_tensor(a)
    lse = _np_logsumexp(ta.data, axis=axis, keepdims=True)
    weights = np.exp(ta.data - lse)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    data = lse if keepdims else np.squeeze(lse, axis=axis)
    return _result(data, (ta,), _backward, "logsumexp")


def log_softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    ta = as_tensor(a)
    return ta - logsumexp(ta, axis=axis, keepdims=True)


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    ta = as_tensor(a)
    shifted = ta.data - ta.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _result(data, (ta,), _backward, "softmax")


def layer_norm(
    a: ArrayLike,
    gain: Optional[ArrayLike] = None,
    bias: Optional[ArrayLike] = None,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize over the last axis, then apply the optional affine gain and bias"""
    ta = as_tensor(a)
    centered = ta - ta.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    out = centered * (var + eps) ** -0.5
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Rows of table selected by an integer index array of any shape"""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: index out of range [0, {table.shape[0]}) in {idx.min()}..{idx.max()}"
        )

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return _result(table.data[idx], (table,), _backward, "embedding")


def gather(a: ArrayLike, indices: np.ndarray) -> Tensor:
    """take_along_axis on the last axis"""
    ta = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape[:-1] != ta.shape[:-1]:
        raise ShapeError(f"gather: index shape {idx.shape} does not match {ta.shape}")

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        lead = int(np.prod(ta.shape[:-1], dtype=np.int64))
        out = np.zeros((lead, ta.shape[-1]), dtype=ta.data.dtype)
        rows = np.arange(lead)[:, None]
        np.add.at(out, (rows, idx.reshape(lead, -1)), g.reshape(lead, -1))
        return (out.reshape(ta.shape),)

    return _result(np.take_along_axis(ta.data, idx, axis=-1), (ta,), _backward, "gather")


def stop_gradient(a: ArrayLike) -> Tensor:
    ta = as_tensor(a)
    return Tensor(ta.data.copy(), dtype=ta.data.dtype)


def straight_through(z: Tensor, quantized: ArrayLike) -> Tensor:
    """Forward the quantized values, route the gradient unchanged to z"""
    zq = as_tensor(quantized)
    if zq.shape != z.shape:
        raise ShapeError(f"straight_through: {z.shape} vs {zq.shape}")
    return _result(zq.data.copy(), (z,), lambda g: (g,), "straight_through")


def mean_pool3d(a: ArrayLike, grid: Sequence[int], pool: int) -> Tensor:
    """Average (B, N, C) features over pool³ neighbourhoods of a row-major (Px, Py, Pz) grid"""
    ta = as_tensor(a)
    px, py, pz = (int(v) for v in grid)
    if ta.ndim != 3 or ta.shape[1] != px * py * pz:
        raise ShapeError(f"mean_pool3d: {ta.shape} does not hold a {grid} grid")
    if px % pool or py % pool or pz % pool:
        raise ShapeError(f"mean_pool3d: pool {pool} does not divide {grid}")
    b, _, c = ta.shape
    x = ta.reshape(b, px // pool, pool, py // pool, pool, pz // pool, pool, c)
    x = x.mean(axis=(2, 4, 6))
    return x.reshape(b, (px // pool) * (py // pool) * (pz // pool), c)


def upsample3d(a: ArrayLike, grid: Sequence[int], pool: int) -> Tensor:
    """Nearest neighbour inverse of mean_pool3d: (B, N / pool³, C) -> (B, N, C)"""
    ta = as_tensor(a)
    px, py, pz = (int(v) for v in grid)
    qx, qy, qz = px // pool, py // pool, pz // pool
    if ta.ndim != 3 or ta.shape[1] != qx * qy * qz:
        raise ShapeError(f"upsample3d: {ta.shape} does not hold a pooled {grid} grid")
    b, _, c = ta.shape
    x = ta.reshape(b, qx, 1, qy, 1, qz, 1, c)
    x = broadcast_to(x, (b, qx, pool, qy, pool, qz, pool, c))
    return x.reshape(b, px * py * pz, c)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every leaf that requires grad

    :param loss: A scalar tensor
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad_check(
    f: Callable[..., Tensor],
    points: Sequence[Tensor],
    step: float = 1e-4,
    floor: float = 1e-8,
) -> float:
    """Compare analytic gradients with central differences

    :param f: Function of the given tensors returning a scalar tensor
    :param points: Leaf tensors at which to check, all with requires_grad set
    :param step: Finite difference step
    :param floor: Lower bound of the relative error denominator
    :return: Worst componentwise relative error |a - n| / max(|a|, |n|, floor)
    """
    for p in points:
        p.zero_grad()
    out = f(*points)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("grad_check: f is not finite at the given point")
    backward(out)
    worst = 0.0
    for p in points:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = float(f(*points).data.reshape(-1)[0])
            flat[i] = orig - step
            minus = float(f(*points).data.reshape(-1)[0])
            flat[i] = orig
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NonFiniteError(f"grad_check: f is not finite near {p.name}[{i}]")
            numeric = (plus - minus) / (2.0 * step)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    logger.debug("grad_check worst relative error %.3e", worst)
    return worst
