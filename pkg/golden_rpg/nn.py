"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.

Parameter containers and the small layer set the surrogate and the adapters are built from.
"""

from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .errors import CheckpointError, ShapeError
from .tensor import Tensor, get_dtype


class Module:
    """
    Named parameter tree. Tensors are immutable, so an update swaps the stored
    tensor instead of writing into it; attribute access always sees the current one.
    """

    def __init__(self) -> None:
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name: str, value: object):
        if isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __getattr__(self, name: str) -> Tensor:
        parameters = self.__dict__.get("_parameters")
        if parameters is not None and name in parameters:
            return parameters[name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name}")

    def add_parameter(self, name: str, value: np.ndarray, requires_grad: bool = True) -> Tensor:
        tensor = Tensor(value, requires_grad=requires_grad)
        self._parameters[name] = tensor
        return tensor

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        yield from self._modules.items()

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        named = {prefix + name: tensor for name, tensor in self._parameters.items()}
        for child_name, child in self._modules.items():
            named.update(child.named_parameters(prefix + child_name + "."))
        return named

    def _owner(self, name: str) -> Tuple["Module", str]:
        module = self
        *path, leaf = name.split(".")
        for part in path:
            if part not in module._modules:
                raise KeyError(name)
            module = module._modules[part]
        if leaf not in module._parameters:
            raise KeyError(name)
        return module, leaf

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.numpy() for name, tensor in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True):
        current = self.named_parameters()
        if strict:
            missing = sorted(set(current) - set(state))
            unexpected = sorted(set(state) - set(current))
            if missing or unexpected:
                raise CheckpointError(f"State mismatch, missing {missing}, unexpected {unexpected}.")
        for name, array in state.items():
            if name not in current:
                continue
            if tuple(np.shape(array)) != current[name].shape:
                raise ShapeError(f"load {name}", np.shape(array), current[name].shape)
            module, leaf = self._owner(name)
            module._parameters[leaf] = Tensor(array, requires_grad=current[name].requires_grad, dtype=get_dtype())

    def bind(self, tensors: Dict[str, Tensor]) -> "Module":
        """Installs the given tensor objects as parameters, without copying."""
        for name, tensor in tensors.items():
            module, leaf = self._owner(name)
            if tensor.shape != module._parameters[leaf].shape:
                raise ShapeError(f"bind {name}", tensor.shape, module._parameters[leaf].shape)
            module._parameters[leaf] = tensor
        return self

    def set_requires_grad(self, flag: bool) -> "Module":
        for tensor in self.named_parameters().values():
            tensor.requires_grad = bool(flag)
        return self

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def parameter_count(self) -> int:
        return int(sum(tensor.size for tensor in self.named_parameters().values()))


def uniform_init(rng: np.random.Generator, fan_in: int, shape: Sequence[int]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))


class Linear(Module):
    """Row-vector convention, y = x @ weight + bias with weight of shape (in, out)."""

    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None,
                 bias: bool = True, zero: bool = False) -> None:
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        if zero or rng is None:
            weight = np.zeros((in_features, out_features))
        else:
            weight = uniform_init(rng, in_features, (in_features, out_features))
        self.add_parameter("weight", weight)
        if bias:
            initial = np.zeros(out_features) if zero or rng is None else uniform_init(rng, in_features, (out_features,))
            self.add_parameter("bias", initial)

    def __call__(self, x: Tensor) -> Tensor:
        bias = self._parameters.get("bias")
        return ops.linear(x, self.weight, bias)


class LayerNorm(Module):
    def __init__(self, features: int, eps: float = 1e-5, affine: bool = True) -> None:
        super().__init__()
        self.eps = eps
        if affine:
            self.add_parameter("gain", np.ones(features))
            self.add_parameter("bias", np.zeros(features))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self._parameters.get("gain"), self._parameters.get("bias"), self.eps)


class MLP(Module):
    """
    Stack of Linear layers with SiLU between them and optional dropout after each
    activation. With zero_last the output layer starts at zero weights and the given bias.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, dropout: float = 0.0,
                 zero_last: bool = False, last_bias: float = 0.0) -> None:
        super().__init__()
        if len(sizes) < 2:
            raise ValueError("An MLP needs at least an input and an output size.")
        self.dropout = dropout
        self.depth = len(sizes) - 1
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == self.depth - 1
            layer = Linear(n_in, n_out, rng, zero=last and zero_last)
            if last and zero_last and last_bias:
                layer.load_state_dict({"weight": layer.weight.numpy(), "bias": np.full(n_out, last_bias)})
            setattr(self, f"layer{i}", layer)

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        for i in range(self.depth):
            x = getattr(self, f"layer{i}")(x)
            if i < self.depth - 1:
                x = ops.silu(x)
                x = ops.dropout(x, self.dropout, rng, self.training)
        return x
