"""Central finite-difference verification of analytic gradients.

Always run in float64 (the caller's graph builder is re-executed under the
engine's float64 mode); float32 rounding would swamp the tolerances.
"""

import numpy as np

from .tensor import Tensor, precision


def grad_check(build_loss, inputs, epsilon=1e-3):
    """Max relative error between analytic and central-difference gradients.

    build_loss: callable taking a list of Tensors and returning a scalar
    Tensor. inputs: list of float64 numpy arrays; every one is perturbed.
    """
    with precision("float64"):
        tensors = [Tensor(a.astype(np.float64), requires_grad=True)
                   for a in inputs]
        loss = build_loss(tensors)
        loss.backward()
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                    for t in tensors]

        worst = 0.0
        for i, t in enumerate(tensors):
            flat = t.data.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + epsilon
                lp = build_loss(tensors).item()
                flat[j] = orig - epsilon
                lm = build_loss(tensors).item()
                flat[j] = orig
                fd = (lp - lm) / (2 * epsilon)
                an = analytic[i].reshape(-1)[j]
                rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
                worst = max(worst, rel)
        return worst
