"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.

Central finite differences, the oracle every analytic gradient is checked against.
"""

from typing import Callable, Dict, Optional, Union

import numpy as np

from .errors import NonFiniteError
from .tensor import Tensor, forward_backward, no_grad

ScalarFn = Callable[[Tensor], Union[Tensor, float]]


def _evaluate(f: ScalarFn, x: np.ndarray) -> float:
    value = f(Tensor(x))
    value = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(value):
        raise NonFiniteError(f"Function value {value} is not finite.")
    return value


def finite_difference_grad(f: ScalarFn, x: Tensor, eps: float = 1e-5,
                           indices: Optional[np.ndarray] = None) -> Tensor:
    """
    (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) for every flat coordinate i, or only
    for `indices` with zeros elsewhere.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}.")
    base = x.numpy().reshape(-1)
    grad = np.zeros_like(base)
    coordinates = range(base.size) if indices is None else np.asarray(indices).reshape(-1)
    with no_grad():
        for i in coordinates:
            shifted = base.copy()
            shifted[i] = base[i] + eps
            upper = _evaluate(f, shifted.reshape(x.shape))
            shifted[i] = base[i] - eps
            lower = _evaluate(f, shifted.reshape(x.shape))
            grad[i] = (upper - lower) / (2.0 * eps)
    return Tensor(grad.reshape(x.shape))


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return float(np.linalg.norm(analytic - numeric)) / scale


def gradient_check(expression: Callable[[Dict[str, Tensor]], Tensor], params: Dict[str, Tensor],
                   eps: float = 1e-5, rng: Optional[np.random.Generator] = None,
                   max_coordinates: Optional[int] = None) -> Dict[str, float]:
    """
    Relative error between autodiff and finite differences per parameter. Large
    parameters are compared on a random subset of at most max_coordinates entries.
    """
    _, grads = forward_backward(expression, params)
    errors = {}
    for name, grad in grads.items():
        tensor = params[name]
        indices = None
        if max_coordinates is not None and tensor.size > max_coordinates:
            rng = rng if rng is not None else np.random.default_rng(0)
            indices = np.sort(rng.choice(tensor.size, size=max_coordinates, replace=False))

        def partial(value: Tensor, name: str = name) -> Tensor:
            return expression({**params, name: value})

        numeric = finite_difference_grad(partial, tensor, eps, indices).numpy().reshape(-1)
        analytic = grad.reshape(-1)
        if indices is not None:
            numeric, analytic = numeric[indices], analytic[indices]
        errors[name] = relative_error(analytic, numeric)
    return errors
