"""Shared test helpers: finite-difference oracles and random stacks."""

from __future__ import annotations

import numpy as np

from trireid.autodiff import GradientTape, Tensor, backward


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at x, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        hi = f(x)
        xf[i] = orig - h
        lo = f(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2.0 * h)
    return grad


def taped_gradient(build_loss, arrays: list[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    """Run build_loss(params...) under a tape; return loss value and grads."""
    params = [Tensor(a, requires_grad=True) for a in arrays]
    with GradientTape() as tape:
        loss = build_loss(*params)
    grads = backward(loss, tape)
    return loss.item(), [grads[p] for p in params]


def check_grads_match(build_loss, arrays: list[np.ndarray], rtol: float = 1e-4,
                      atol: float = 1e-7, h: float = 1e-5) -> None:
    """Assert taped gradients match central finite differences for each input."""
    _, analytic = taped_gradient(build_loss, arrays)
    for k in range(len(arrays)):
        def scalar_f(x, _k=k):
            probe = [a.copy() for a in arrays]
            probe[_k] = x
            params = [Tensor(a) for a in probe]
            return build_loss(*params).item()

        numeric = finite_difference(scalar_f, arrays[k].copy(), h=h)
        np.testing.assert_allclose(analytic[k], numeric, rtol=rtol, atol=atol)


def random_stochastic(rng: np.random.Generator, n: int) -> np.ndarray:
    """A random row-stochastic matrix with strictly positive entries."""
    m = rng.uniform(0.05, 1.0, size=(n, n))
    return m / m.sum(axis=1, keepdims=True)
