"""Central finite-difference gradient checking.

Used both by the test suite and by the ``verify`` CLI command.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of ``f`` w.r.t. array ``x``, perturbed in place and restored."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Normwise relative error ``max|a - n| / max(max|a|, max|n|)``; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if denom == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / denom)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-3,
                    seed: int = 0) -> float:
    """Compare analytic and numeric gradients of a random projection of ``fn(*inputs)``.

    The output is contracted with fixed random weights so that every output
    element contributes to a scalar loss. Returns the worst relative error
    over all inputs.
    """
    rng = np.random.default_rng(seed)
    probe = fn(*inputs)
    weights = rng.standard_normal(probe.shape).astype(np.float32)
    weights /= np.sqrt(max(weights.size, 1))

    def loss_tensor() -> Tensor:
        out = fn(*inputs)
        return (out * Tensor(weights)).sum()

    def loss_value() -> float:
        # contract in float64 so the difference quotient sees only the op's own rounding
        return float(np.sum(fn(*inputs).data.astype(np.float64) * weights))

    analytic = grad(loss_tensor(), inputs)
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        gn = numerical_gradient(loss_value, t.data, h)
        worst = max(worst, relative_error(ga, gn))
    return worst
