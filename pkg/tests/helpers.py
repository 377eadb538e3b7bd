"""Shared test oracles."""

import numpy as np

from turbmit import tensor as T


def numeric_grad(fn, arrays, index, h=1e-6):
    """Central finite differences of scalar fn(arrays) w.r.t. arrays[index]."""
    base = [a.copy() for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = target[idx]
        target[idx] = orig + h
        up = fn(base)
        target[idx] = orig - h
        down = fn(base)
        target[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def rel_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(build, arrays, wrt=None):
    """Compare tape gradients of ``build(*tensors)`` with finite differences.

    ``build`` maps float64 tensors to a scalar tensor. Returns the worst
    relative error over the checked inputs.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt

    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*tensors)
    T.backward(loss)

    def scalar(arrs):
        return float(build(*[T.Tensor(a) for a in arrs]).item())

    worst = 0.0
    for i in wrt:
        num = numeric_grad(scalar, arrays, i)
        worst = max(worst, rel_error(tensors[i].grad, num))
    return worst


def projected(out, seed):
    """Random linear functional of ``out`` so every output element matters."""
    rng = np.random.default_rng(10_000 + seed)
    r = T.Tensor(rng.standard_normal(out.shape))
    return T.sum_(out * r)
