"""Shared finite-difference gradient checking used across test modules."""

import numpy as np

from melcodec import tensor as T
from melcodec.tensor import Tensor


def finite_diff(fn, arrays, index, step=1e-5):
    """Central finite differences of scalar fn wrt arrays[index]."""
    base = [a.copy() for a in arrays]
    grad = np.zeros_like(base[index])
    flat = grad.reshape(-1)
    for i in range(flat.size):
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[index].reshape(-1)[i] += step
        minus[index].reshape(-1)[i] -= step
        flat[i] = (fn(*plus) - fn(*minus)) / (2 * step)
    return grad


def gradcheck(build, arrays, rtol=1e-4, atol=1e-7):
    """build(*tensors) -> scalar Tensor; verifies every input's gradient."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*tensors)
    T.backward(loss)

    def scalar_fn(*arrs):
        with T.no_grad():
            return build(*[Tensor(a) for a in arrs]).item()

    for i, t in enumerate(tensors):
        numeric = finite_diff(scalar_fn, arrays, i)
        np.testing.assert_allclose(t.grad, numeric, rtol=rtol, atol=atol)


def module_gradcheck(module, build_loss, rtol=1e-4, atol=1e-7, step=1e-5,
                     max_coords=6, seed=0):
    """Check module parameter gradients against central differences.

    build_loss() -> scalar Tensor evaluated with the module's current
    parameters. For each parameter a deterministic random subset of
    coordinates (up to max_coords) is perturbed.
    """
    params = module.named_parameters()
    for p in params.values():
        p.zero_grad()
    loss = build_loss()
    T.backward(loss)
    rng = np.random.default_rng(seed)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(max_coords, n), replace=False)
        for c in coords:
            original = flat[c]
            flat[c] = original + step
            with T.no_grad():
                up = build_loss().item()
            flat[c] = original - step
            with T.no_grad():
                down = build_loss().item()
            flat[c] = original
            numeric = (up - down) / (2 * step)
            analytic = p.grad.reshape(-1)[c]
            np.testing.assert_allclose(
                analytic, numeric, rtol=rtol, atol=atol,
                err_msg=f"gradient mismatch for {name}[{c}]")
