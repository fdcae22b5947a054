"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record the parents and a closure mapping the output gradient to
one gradient per parent; :func:`backward` walks that graph in reverse
topological order and *adds* into the ``grad`` buffers of the leaves.

Examples:
    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> backward(x.sum())
    >>> x.grad.tolist()
    [1.0, 1.0, 1.0]
    >>> backward(x.sum())
    >>> x.grad.tolist()
    [2.0, 2.0, 2.0]
"""

import contextlib
import logging
import math
import threading
from typing import Callable, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

_logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


class GradientError(ValueError):
    pass


# =============================================================================
# Gradient mode
# =============================================================================

_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (per thread).

    Examples:
        >>> w = Tensor([2.0], requires_grad=True)
        >>> with no_grad():
        ...     y = w * 3.0
        >>> y.requires_grad
        False
    """
    previous = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = previous


@contextlib.contextmanager
def frozen(params: Union[Mapping[str, "Tensor"], Iterable["Tensor"]]):
    """Treat ``params`` as constants inside the block; gradients stop at them.

    Examples:
        >>> w, b = Tensor([2.0], requires_grad=True), Tensor([1.0], requires_grad=True)
        >>> with frozen([w]):
        ...     backward((w * b).sum())
        >>> w.grad is None, b.grad.tolist(), w.requires_grad
        (True, [2.0], True)
    """
    values = list(params.values() if isinstance(params, Mapping) else params)
    flags = [p.requires_grad for p in values]
    for p in values:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(values, flags):
            p.requires_grad = flag


# =============================================================================
# Tensor
# =============================================================================


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        array = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.name = name

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    @property
    def shape(self) -> Tuple[int, ...]:
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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    # operator sugar ---------------------------------------------------------

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _make(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# =============================================================================
# Elementwise arithmetic
# =============================================================================


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "div")
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation.

    Examples:
        >>> gelu(Tensor([0.0])).data.tolist()
        [0.0]
    """
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        du = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(y, (a,), backward_fn)


def stop_gradient(a: Tensor) -> Tensor:
    """Same values, no path back to ``a``.

    Examples:
        >>> x = Tensor([3.0], requires_grad=True)
        >>> backward((stop_gradient(x) * x).sum())
        >>> x.grad.tolist()
        [3.0]
    """
    return Tensor(a.data)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return _make(
        np.where(mask, a.data.dtype.type(value), a.data),
        (a,),
        lambda g: (np.where(mask, 0.0, g).astype(g.dtype),),
    )


# =============================================================================
# Shape and reductions
# =============================================================================


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tensor_sum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def take(a: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows (first axis).

    Examples:
        >>> t = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        >>> backward(take(t, [1, 1]).sum())
        >>> t.grad.tolist()
        [[0.0, 0.0], [2.0, 2.0]]
    """
    indices = np.asarray(indices, dtype=np.int64)

    def backward_fn(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, indices, g)
        return (grad,)

    return _make(a.data[indices], (a,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: np.split(g, splits, axis=axis),
    )


# =============================================================================
# Linear algebra and normalisation
# =============================================================================


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast).

    Examples:
        >>> matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        Traceback (most recent call last):
        ...
        gaze_world.numcore.ShapeError: matmul: (2, 3) @ (4, 2) has mismatched inner dimensions
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with >= 2 axes, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape} has mismatched inner dimensions")

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), backward_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """
    Examples:
        >>> softmax(Tensor([0.0, 0.0])).data.tolist()
        [0.5, 0.5]
    """
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    return _make(
        y, (a,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)
    )


def layer_norm(
    x: Tensor,
    eps: float = 1e-5,
    gain: Optional[Tensor] = None,
    bias: Optional[Tensor] = None,
) -> Tensor:
    """Normalise over the last axis, with optional affine gain and bias.

    Examples:
        >>> layer_norm(Tensor([2.0, 2.0, 2.0])).data.tolist()
        [0.0, 0.0, 0.0]
    """
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    y = xhat
    if gain is not None:
        y = y * gain.data
    if bias is not None:
        y = y + bias.data

    parents = [x] + [p for p in (gain, bias) if p is not None]

    def backward_fn(g):
        gx = g * gain.data if gain is not None else g
        dx = inv_std * (
            gx
            - gx.mean(axis=-1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [dx]
        if gain is not None:
            grads.append(_unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return grads

    return _make(y, parents, backward_fn)


# =============================================================================
# Losses
# =============================================================================


def _check_same_shape(pred: Tensor, target: Tensor, op: str) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"{op}: prediction {pred.shape} and target {target.shape} differ")


def smooth_l1(pred: Tensor, target: Tensor, beta: float = 1.0) -> Tensor:
    """Huber-style loss averaged over every element.

    Examples:
        >>> smooth_l1(Tensor([0.5]), Tensor([0.0])).item()
        0.125
        >>> smooth_l1(Tensor([3.0]), Tensor([0.0])).item()
        2.5
    """
    _check_same_shape(pred, target, "smooth_l1")
    if beta <= 0.0:
        raise ValueError(f"smooth_l1 needs beta > 0, got {beta}")
    d = pred.data - target.data
    ad = np.abs(d)
    quadratic = ad < beta
    value = np.where(quadratic, 0.5 * d * d / beta, ad - 0.5 * beta).mean()

    def backward_fn(g):
        local = np.where(quadratic, d / beta, np.sign(d)) * (g / d.size)
        return (local, -local)

    return _make(np.asarray(value, dtype=pred.dtype), (pred, target), backward_fn)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    _check_same_shape(pred, target, "l1_loss")
    d = pred.data - target.data

    def backward_fn(g):
        local = np.sign(d) * (g / d.size)
        return (local, -local)

    return _make(np.asarray(np.abs(d).mean(), dtype=pred.dtype), (pred, target), backward_fn)


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean categorical cross entropy of (T, C) logits against class ids.

    Examples:
        >>> round(cross_entropy(Tensor(np.zeros((1, 16))), [3]).item(), 12) == round(math.log(16), 12)
        True
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs {targets.shape[0]} targets")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(targets.shape[0])
    value = -log_p[rows, targets].mean()

    def backward_fn(g):
        grad = np.exp(log_p)
        grad[rows, targets] -= 1.0
        return (grad * (g / targets.shape[0]),)

    return _make(np.asarray(value, dtype=logits.dtype), (logits,), backward_fn)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    targets = np.asarray(targets, dtype=logits.dtype).reshape(logits.shape)
    x = logits.data
    value = (np.maximum(x, 0.0) - x * targets + np.log1p(np.exp(-np.abs(x)))).mean()

    def backward_fn(g):
        sigmoid = 0.5 * (1.0 + np.tanh(0.5 * x))
        return ((sigmoid - targets) * (g / x.size),)

    return _make(np.asarray(value, dtype=logits.dtype), (logits,), backward_fn)


# =============================================================================
# Backpropagation
# =============================================================================


def _topological_order(root: Tensor) -> List[Tensor]:
    order, seen = [], set()
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Examples:
        >>> backward(Tensor([1.0, 2.0], requires_grad=True) * 2.0)
        Traceback (most recent call last):
        ...
        gaze_world.numcore.GradientError: backward needs a scalar loss, got shape (2,)
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("the loss does not depend on any tensor that requires grad")
    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g.astype(node.data.dtype, copy=False)
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad


def zero_grad(params: Union[Mapping[str, Tensor], Iterable[Tensor]]) -> None:
    """Reset gradient buffers to zeros (not ``None``)."""
    values = params.values() if isinstance(params, Mapping) else params
    for p in values:
        p.grad = np.zeros_like(p.data)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    The relative error of one coordinate is ``|a - n| / max(|a| + |n|, floor)``.

    Examples:
        >>> x = Tensor([3.0], requires_grad=True)
        >>> grad_check(lambda: (x * x).sum(), [x]) < 1e-8
        True
        >>> x.grad.tolist()
        [6.0]
    """
    for p in params:
        p.grad = None
    backward(f())
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            assert np.shares_memory(flat, p.data), "grad_check needs contiguous parameters"
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + h
                plus = float(f().data)
                flat[i] = original - h
                minus = float(f().data)
                flat[i] = original
                numeric = (plus - minus) / (2.0 * h)
                exact = float(a.reshape(-1)[i])
                error = abs(exact - numeric) / max(abs(exact) + abs(numeric), floor)
                worst = max(worst, error)
    _logger.debug("grad_check over %d tensors: max relative error %.3e", len(params), worst)
    return worst
