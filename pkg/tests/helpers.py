"""Shared test oracles: central finite differences against the tape."""

import numpy as np

from slidegraph.autodiff import Tape, Tensor

FD_STEP = 1e-6
FD_CLAMP = 1e-8
FD_TOLERANCE = 1e-5


def tape_gradients(build, arrays):
    """Run ``build`` (tensors -> scalar Tensor) under a tape; returns the
    per-array gradients and the loss value."""
    tensors = [Tensor(a, requires_grad=True, name=f"p{i}") for i, a in enumerate(arrays)]
    with Tape() as tape:
        loss = build(tensors)
    grads = tape.backward(loss)
    out = [grads[t].data if t in grads else np.zeros_like(a)
           for t, a in zip(tensors, arrays)]
    return out, float(loss.data)


def numeric_gradient(build, arrays, index, step=FD_STEP):
    """Central finite differences of the same scalar w.r.t. arrays[index]."""

    def value(arrs):
        return float(build([Tensor(a) for a in arrs]).data)

    work = [a.copy() for a in arrays]
    flat = work[index].ravel()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = value(work)
        flat[i] = orig - step
        down = value(work)
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * step)
    return grad.reshape(arrays[index].shape)


def relative_error(a, b, clamp=FD_CLAMP):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), clamp)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def max_fd_error(build, arrays):
    """Worst relative error between tape and finite-difference gradients
    across all inputs of one scenario."""
    analytic, _ = tape_gradients(build, arrays)
    worst = 0.0
    for idx in range(len(arrays)):
        numeric = numeric_gradient(build, arrays, idx)
        worst = max(worst, relative_error(analytic[idx], numeric))
    return worst


def away_from_zero(rng, shape, low=0.2, high=1.5):
    """Random values bounded away from 0, so ReLU kinks and normalization
    singularities stay clear of the finite-difference step."""
    magnitude = rng.uniform(low, high, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return magnitude * sign
