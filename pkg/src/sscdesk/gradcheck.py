"""Central-difference gradient oracle and comparison helpers."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + eps e_i) - f(x - eps e_i)) / 2 eps``.

    ``f`` receives a perturbed copy of ``x`` as a float64 array and must
    return a scalar.
    """
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x.copy()))
        flat[i] = orig - eps
        fm = float(f(x.copy()))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``; zero when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-6) -> float:
    """Max relative error between backward() and finite differences.

    ``fn`` maps Tensors to a scalar Tensor; every input is differentiated.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    loss = fn(*leaves)
    backward(loss)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def f(xi, i=i):
            args = [Tensor(v) for v in inputs]
            args[i] = Tensor(xi)
            return fn(*args).item()

        numeric = finite_difference_gradient(f, inputs[i], eps)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(inputs[i])
        worst = max(worst, relative_error(analytic, numeric))
    return worst
