"""Central finite-difference gradient checking."""

import numpy as np

from kpdeblur.numerics.tensor import backward, no_grad


class GradCheckFailure(AssertionError):
    pass


def grad_check(f, inputs, eps=1e-5, max_coords=None, seed=0):
    """Return max relative error between analytic and central-difference gradients.

    ``f`` maps the list ``inputs`` (Tensors with ``requires_grad`` set) to a
    scalar Tensor. With ``max_coords`` only that many randomly chosen
    coordinates per input are perturbed.
    """
    for t in inputs:
        t.grad = None
    loss = f(inputs)
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t in inputs:
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(inputs).data)
                flat[i] = orig - eps
                fm = float(f(inputs).data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise GradCheckFailure(f"non-finite objective at coordinate {i} of {t!r}")
                cd = (fp - fm) / (2 * eps)
                an = float(analytic.reshape(-1)[i])
                err = abs(an - cd) / max(abs(an), abs(cd), 1e-8)
                worst = max(worst, err)
    return worst
