"""Central finite-difference gradient checks."""

import numpy as np

from .tensor import Tape, backward


def relative_error(a, b):
    """||a - b|| / max(||a||, ||b||), with 0/0 treated as exact agreement."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, tensor, eps=1e-5, indices=None):
    """Central differences of scalar ``f()`` w.r.t. ``tensor.data`` (optionally at flat ``indices``)."""
    flat = tensor.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size) if indices is None else np.zeros(len(indices))
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f().data)
        flat[i] = orig - eps
        lo = float(f().data)
        flat[i] = orig
        out[i if indices is None else k] = (hi - lo) / (2 * eps)
    return out.reshape(tensor.shape) if indices is None else out


def analytic_grads(f, tensors):
    for t in tensors:
        t.grad = None
    with Tape():
        loss = f()
    backward(loss)
    return [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]


def check_gradients(f, tensors, eps=1e-5):
    """Return the worst relative error between analytic and numeric gradients."""
    worst = 0.0
    for t, g in zip(tensors, analytic_grads(f, tensors)):
        worst = max(worst, relative_error(g, numeric_grad(f, t, eps)))
    return worst
