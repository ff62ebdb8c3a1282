"""Shared test utilities: the central finite-difference gradient oracle."""

import numpy as np

from vssenhance.tensor import Tensor


def finite_difference(fn, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar-valued ``fn`` at ``x``."""
    x = np.array(x, dtype=np.float64)  # never perturb the caller's array
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def check_gradients(build_loss, arrays, rtol=1e-4, step=1e-6, atol=1e-7):
    """Compare reverse-mode gradients of ``build_loss`` against central differences.

    ``build_loss`` maps a list of numpy arrays to a scalar Tensor; it must be
    a pure function of those arrays.  Returns the worst relative error seen.
    """
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build_loss(leaves)
    loss.backward()
    worst = 0.0
    for j, leaf in enumerate(leaves):
        assert leaf.grad is not None, f"input {j} received no gradient"

        def scalar_fn(x, j=j):
            probe = [a.copy() for a in arrays]
            probe[j] = x
            return build_loss([Tensor(p) for p in probe]).item()

        fd = finite_difference(scalar_fn, arrays[j], step=step)
        scale = max(np.abs(leaf.grad).max(), np.abs(fd).max(), 1e-8)
        diff = np.abs(leaf.grad - fd).max()
        err = diff / scale
        worst = max(worst, err)
        assert diff <= rtol * scale + atol, (
            f"input {j}: analytic vs finite-difference relative error {err:.3e} "
            f"exceeds {rtol:.1e}"
        )
    return worst
