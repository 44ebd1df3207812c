"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.

Differentiable primitives over Tensor.

Elementwise operations accept equal shapes, a scalar operand, or a one-sided
expansion where the smaller operand's size-1 or missing leading dimensions are
expanded to the larger one (the FiLM scale/shift case). Any other mismatch is a
ShapeError naming both shapes.
"""

from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ShapeError
from .tensor import ArrayLike, Tensor, as_tensor

Axis = Optional[Union[int, Tuple[int, ...]]]


def _broadcastShape(op: str, left: Tuple[int, ...], right: Tuple[int, ...]) -> Tuple[int, ...]:
    if left == right:
        return left
    if left == () or right == ():
        return right if left == () else left
    try:
        out = np.broadcast_shapes(left, right)
    except ValueError:
        raise ShapeError(op, left, right) from None
    if out != left and out != right:
        raise ShapeError(op, left, right, detail="only one operand may be expanded")
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    return as_tensor(a), as_tensor(b)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcastShape("add", a.shape, b.shape)

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcastShape("sub", a.shape, b.shape)

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcastShape("mul", a.shape, b.shape)

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcastShape("div", a.shape, b.shape)

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._result(a.data / b.data, (a, b), backward, "div")


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Matrix product over the last two axes. The right operand is either a shared 2-D
    weight, or has exactly the batch dimensions of the left operand.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim == 2:
        def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            grad_a = g @ b.data.T
            grad_b = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return grad_a, grad_b
    elif a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2]:
        def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g
    else:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dimensions must match")
    return Tensor._result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight + bias; a 1-D x is treated as a single row."""
    x = as_tensor(x)
    if x.ndim == 1:
        return reshape(linear(reshape(x, (1, x.shape[0])), weight, bias), (weight.shape[-1],))
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.transpose(g, inverse),)

    return Tensor._result(np.transpose(x.data, axes), (x,), backward, "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g.reshape(x.shape),)

    return Tensor._result(out, (x,), backward, "reshape")


def index(x: Tensor, key: object) -> Tensor:
    out = x.data[key]

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(full, key, g)
        return (full,)

    return Tensor._result(np.array(out), (x,), backward, "index")


def take(x: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    axis = axis % x.ndim
    key = (slice(None),) * axis + (np.asarray(indices),)
    return index(x, key)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", tensors[0].shape, tensors[-1].shape) from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g: np.ndarray) -> List[np.ndarray]:
        return np.split(g, splits, axis=axis)

    return Tensor._result(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        ordered = sorted(shapes)
        raise ShapeError("stack", ordered[0], ordered[-1])
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g: np.ndarray) -> List[np.ndarray]:
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return Tensor._result(out, tensors, backward, "stack")


def sum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def var(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    centred = sub(x, mean(x, axis=axis, keepdims=True))
    return mean(mul(centred, centred), axis=axis, keepdims=keepdims)


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        # zero subgradient where the root is exactly 0, e.g. the std of a constant region
        safe = np.where(out > 0.0, out, 1.0)
        return (np.where(out > 0.0, g * 0.5 / safe, 0.0),)

    return Tensor._result(out, (x,), backward, "sqrt")


def std(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    """Population standard deviation."""
    return sqrt(var(x, axis=axis, keepdims=keepdims))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * out,)

    return Tensor._result(out, (x,), backward, "exp")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    weights = np.exp(shifted)
    out = weights / np.sum(weights, axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), backward, "softmax")


def _normalizeLastAxis(data: np.ndarray, eps: float) -> Tuple[np.ndarray, np.ndarray]:
    centred = data - data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    return centred * inv, inv


def _normalizeBackward(g: np.ndarray, xhat: np.ndarray, inv: np.ndarray) -> np.ndarray:
    return inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))


def layer_norm(x: Tensor, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None,
               eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    xhat, inv = _normalizeLastAxis(x.data, eps)
    out = xhat
    if gain is not None:
        if gain.shape != (x.shape[-1],):
            raise ShapeError("layer_norm gain", gain.shape, (x.shape[-1],))
        out = out * gain.data
    if bias is not None:
        if bias.shape != (x.shape[-1],):
            raise ShapeError("layer_norm bias", bias.shape, (x.shape[-1],))
        out = out + bias.data
    parents = tuple(t for t in (x, gain, bias) if t is not None)

    def backward(g: np.ndarray) -> List[np.ndarray]:
        lead = tuple(range(g.ndim - 1))
        grad_xhat = g * gain.data if gain is not None else g
        grads = [_normalizeBackward(grad_xhat, xhat, inv)]
        if gain is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return grads

    return Tensor._result(out, parents, backward, "layer_norm")


def group_norm(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """
    Normalizes (C, ...) over each of `groups` contiguous channel groups, statistics
    taken over the group's channels and all spatial positions. No affine part.
    """
    x = as_tensor(x)
    channels = x.shape[0]
    if groups < 1 or channels % groups != 0:
        raise ShapeError("group_norm", x.shape, detail=f"{channels} channels not divisible into {groups} groups")
    grouped = x.data.reshape(groups, -1)
    xhat, inv = _normalizeLastAxis(grouped, eps)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (_normalizeBackward(g.reshape(groups, -1), xhat, inv).reshape(x.shape),)

    return Tensor._result(xhat.reshape(x.shape), (x,), backward, "group_norm")


def _sigmoid(data: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * data))


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * out * (1.0 - out),)

    return Tensor._result(out, (x,), backward, "sigmoid")


def silu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return Tensor._result(x.data * s, (x,), backward, "silu")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * (x.data > 0),)

    return Tensor._result(np.maximum(x.data, 0.0), (x,), backward, "relu")


def clamp(x: Tensor, low: Union[float, np.ndarray], high: Union[float, np.ndarray]) -> Tensor:
    """Clamp with the subgradient: identity inside [low, high], zero outside."""
    x = as_tensor(x)
    inside = (x.data >= low) & (x.data <= high)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * inside,)

    return Tensor._result(np.clip(x.data, low, high), (x,), backward, "clamp")


def masked_sum(x: Tensor, mask: np.ndarray) -> Tensor:
    """Sum of (C, ...) over the trailing axes weighted by a constant mask of shape (...)."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=x.data.dtype)
    if mask.shape != x.shape[1:]:
        raise ShapeError("masked_sum", x.shape, mask.shape)
    trailing = tuple(range(1, x.ndim))
    out = np.tensordot(x.data, mask, axes=(trailing, tuple(range(mask.ndim))))

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g.reshape((-1,) + (1,) * mask.ndim) * mask,)

    return Tensor._result(np.asarray(out), (x,), backward, "masked_sum")


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    total = float(np.sum(mask))
    if total <= 0:
        raise ShapeError("masked_mean", x.shape, np.shape(mask), detail="empty mask")
    return mul(masked_sum(x, mask), 1.0 / total)


def l2_norm(x: Tensor) -> Tensor:
    x = as_tensor(x)
    norm = float(np.sqrt(np.sum(x.data * x.data)))

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        if norm == 0.0:
            return (np.zeros_like(x.data),)
        return (g * x.data / norm,)

    return Tensor._result(np.asarray(norm, dtype=x.data.dtype), (x,), backward, "l2_norm")


def sum_squares(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (2.0 * g * x.data,)

    return Tensor._result(np.asarray(np.sum(x.data * x.data)), (x,), backward, "sum_squares")


def mse(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    diff = a.data - b.data
    scale = 2.0 / diff.size

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return g * scale * diff, -g * scale * diff

    return Tensor._result(np.asarray(np.mean(diff * diff)), (a, b), backward, "mse")


def smooth_l1(a: ArrayLike, b: ArrayLike, beta: float = 1.0) -> Tensor:
    """Huber-style SmoothL1 averaged over elements, quadratic below `beta`."""
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError("smooth_l1", a.shape, b.shape)
    diff = a.data - b.data
    small = np.abs(diff) < beta
    loss = np.where(small, 0.5 * diff * diff / beta, np.abs(diff) - 0.5 * beta)
    count = diff.size

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        local = np.where(small, diff / beta, np.sign(diff)) / count
        return g * local, -g * local

    return Tensor._result(np.asarray(np.mean(loss)), (a, b), backward, "smooth_l1")


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("Dropout in training mode needs a random generator.")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return mul(x, keep)

