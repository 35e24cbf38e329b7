"""Central finite-difference gradient checking."""
import numpy as np

from nepadd.tensor import Tape, backward, no_grad


def numerical_grad(fn, tensors, step=1e-5):
    """d fn()/d t for each tensor in ``tensors`` by central differences.

    ``fn`` takes no arguments and returns a scalar Tensor built from ``tensors``.
    """
    out = []
    with no_grad():
        for t in tensors:
            g = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = fn().item()
                flat[i] = orig - step
                down = fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2.0 * step)
            out.append(g)
    return out


def analytic_grad(fn, tensors):
    for t in tensors:
        t.zero_grad()
    with Tape():
        backward(fn())
    return [t.grad.copy() for t in tensors]


def max_rel_error(a, b, floor=1e-6):
    """max |a-b| / max(|a|, |b|, floor) elementwise.

    The floor keeps entries that are zero up to finite-difference roundoff
    (about 1e-11 at step 1e-5) from dominating the ratio.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(fn, tensors, step=1e-5):
    """Worst relative error between analytic and numerical grads over ``tensors``."""
    ana = analytic_grad(fn, tensors)
    num = numerical_grad(fn, tensors, step=step)
    return max(max_rel_error(a, n) for a, n in zip(ana, num))
