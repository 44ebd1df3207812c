"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.

Dense tensors with reverse-mode differentiation.

A Tensor wraps a read-only numpy array. Operations that involve a tensor with
requires_grad record their parents and a closure mapping the upstream gradient
to one gradient per parent. Gradients never live on the tensors themselves:
a GradTape orders the recorded graph and accumulates them per node.
"""

import contextlib
import threading
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NonFiniteError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_PRECISIONS = {"float64": np.float64, "float32": np.float32}


class _GradMode(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True


class _Settings:
    """Process-wide, shared by worker threads."""

    dtype = np.float64
    checked = True


_mode = _GradMode()
_settings = _Settings()


def set_precision(name: str):
    """
    Selects the dtype of newly created tensors. 64-bit is the default and the only
    precision used by the correctness suites.
    """
    if name not in _PRECISIONS:
        raise ValueError(f"Unknown precision {name}, expected one of {sorted(_PRECISIONS)}.")
    _settings.dtype = _PRECISIONS[name]


def get_dtype() -> type:
    return _settings.dtype


def set_checked(enabled: bool):
    _settings.checked = bool(enabled)


def is_checked() -> bool:
    return _settings.checked


def is_grad_enabled() -> bool:
    return _mode.grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = _mode.grad_enabled
    _mode.grad_enabled = False
    try:
        yield
    finally:
        _mode.grad_enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype: Optional[type] = None) -> None:
        if isinstance(data, Tensor):
            data = data.data
        array = np.array(data, dtype=dtype or _settings.dtype, copy=True)
        self._finish(array, requires_grad, (), None, "leaf")

    @classmethod
    def _result(cls, array: np.ndarray, parents: Tuple["Tensor", ...], backward_fn: BackwardFn,
                op: str) -> "Tensor":
        """
        Builds an operation result without copying. The graph edge is only kept when
        gradient recording is enabled and a parent needs it.
        """
        tensor = cls.__new__(cls)
        needs_grad = _mode.grad_enabled and any(p.requires_grad for p in parents)
        if needs_grad:
            tensor._finish(array, True, parents, backward_fn, op)
        else:
            tensor._finish(array, False, (), None, op)
        return tensor

    def _finish(self, array: np.ndarray, requires_grad: bool, parents: Tuple["Tensor", ...],
                backward_fn: Optional[BackwardFn], op: str):
        # numpy reductions and 0-d arithmetic hand back scalars, not arrays
        array = np.asarray(array)
        if array.dtype.kind != "f":
            array = array.astype(_settings.dtype)
        if _settings.checked and not np.all(np.isfinite(array)):
            raise NonFiniteError(f"Non-finite values produced by '{op}' with shape {array.shape}.")
        array.flags.writeable = False
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="only single-element tensors convert to a scalar")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return np.array(self.data, copy=True)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar, the primitives live in ops
    def __add__(self, other: ArrayLike) -> "Tensor":
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        from . import ops
        return ops.div(self, other)

    def __neg__(self) -> "Tensor":
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index: object) -> "Tensor":
        from . import ops
        return ops.index(self, index)

    def reshape(self, *shape: int) -> "Tensor":
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class GradTape:
    """
    Reverse pass over the graph recorded under a scalar loss.
    Nodes are visited in reverse topological order, each exactly once.
    """

    def __init__(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
        self.loss = loss
        self.order = self._topologicalOrder(loss)
        self.gradients: Dict[int, np.ndarray] = {}

    @staticmethod
    def _topologicalOrder(root: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        # iterative post-order, deep attention graphs overflow the recursion limit
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
            for parent in node.parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self) -> "GradTape":
        self.gradients = {id(self.loss): np.ones(self.loss.shape, dtype=self.loss.data.dtype)}
        for node in reversed(self.order):
            upstream = self.gradients.get(id(node))
            if upstream is None or node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(upstream)
            for parent, grad in zip(node.parents, parent_grads):
                if grad is None or not parent.requires_grad:
                    continue
                grad = np.asarray(grad)
                if grad.shape != parent.shape:
                    raise ShapeError(f"backward of {node.op}", grad.shape, parent.shape)
                key = id(parent)
                if key in self.gradients:
                    self.gradients[key] = self.gradients[key] + grad
                else:
                    self.gradients[key] = grad
        return self

    def gradient(self, tensor: Tensor) -> np.ndarray:
        grad = self.gradients.get(id(tensor))
        if grad is None:
            return np.zeros(tensor.shape, dtype=tensor.data.dtype)
        return grad


def forward_backward(expression: Callable[[Dict[str, Tensor]], Tensor],
                     params: Dict[str, Tensor]) -> Tuple[Tensor, Dict[str, np.ndarray]]:
    """
    Evaluates a scalar expression of named parameters and returns its value together
    with the gradient of every parameter that requires one.
    """
    value = expression(params)
    if not isinstance(value, Tensor):
        raise TypeError(f"Expression returned {type(value).__name__}, expected a Tensor.")
    if value.size != 1:
        raise ShapeError("forward_backward", value.shape, detail="loss must be a scalar")
    tape = GradTape(value).backward()
    grads = {name: tape.gradient(tensor) for name, tensor in params.items() if tensor.requires_grad}
    return value, grads
