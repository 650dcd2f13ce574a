"""Central finite-difference oracle for gradient checks (64-bit only)."""

import numpy as np

from onestream import tensor as T


def finite_diff(func, x, h=1e-5):
    """Numeric gradient of scalar func at x by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.ravel()
    flat_g = grad.ravel()
    for i in range(x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        fp = func(x)
        flat_x[i] = orig - h
        fm = func(x)
        flat_x[i] = orig
        flat_g[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(analytic, numeric):
    """Max |a-n| / max(|a|, |n|, 1), a scaled hybrid error."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_op(op, inputs, rng, check=None, h=1e-5):
    """Compare analytic grads of op(*tensors) against finite differences.

    `inputs` are numpy arrays; every input is checked unless `check` lists
    the positions to differentiate. The output is projected to a scalar with
    fixed random weights so all components contribute.

    Returns the worst relative error across checked inputs.
    """
    tensors = [T.Tensor(a, requires_grad=True) for a in inputs]
    out = op(*tensors)
    weights = rng.normal(size=out.data.shape)
    out.backward(weights)
    worst = 0.0
    positions = range(len(inputs)) if check is None else check
    for pos in positions:
        def scalar(x, pos=pos):
            args = [T.Tensor(a) for a in inputs]
            args[pos] = T.Tensor(x)
            return float((op(*args).data * weights).sum())

        numeric = finite_diff(scalar, inputs[pos], h=h)
        worst = max(worst, rel_err(tensors[pos].grad, numeric))
    return worst
