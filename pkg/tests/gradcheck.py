"""Shared central finite-difference gradient oracle (64-bit, step 1e-3).

The oracle perturbs raw numpy buffers directly and re-runs the forward
closure, so it is independent of every analytic backward it checks.
"""

import numpy as np

from volformer import autograd as ag

STEP = 1e-3
TOL = 1e-4


def numeric_grads(loss_fn, tensors, step=STEP):
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = loss_fn()
            flat[i] = orig - step
            fm = loss_fn()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * step)
        grads.append(g.reshape(t.shape))
    return grads


def max_rel_err(analytic, numeric):
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale))


def assert_grads_match(build_loss, tensors, tol=TOL, step=STEP):
    """build_loss: () -> scalar Tensor; tensors: leaves to check."""
    loss = build_loss()
    for t in tensors:
        t.grad = None
    ag.backward(loss)
    analytic = [np.array(t.grad, dtype=np.float64) for t in tensors]
    numeric = numeric_grads(lambda: build_loss().item(), tensors, step)
    worst = max(max_rel_err(a, n) for a, n in zip(analytic, numeric))
    assert worst < tol, f"gradient mismatch: max rel err {worst:.3e} >= {tol}"
    return worst
