"""Compare analytic model gradients with central finite differences."""

from __future__ import annotations

import numpy as np

from vizrec.models import ModelParams, Regularization, forward, loss, loss_and_grad
from vizrec.numeric import finite_difference_gradient, max_relative_error


def check_gradients(params: ModelParams, users, items, ratings, feats=None,
                    reg: Regularization = Regularization(), h: float = 1e-5,
                    floor: float = 1e-6) -> dict[str, float]:
    """Max relative error per tensor between backprop and finite differences.

    ``floor`` bounds the denominator so coordinates whose true gradient is
    ~0 are compared in absolute terms.
    """
    _, grads = loss_and_grad(params, users, items, ratings, feats, reg)
    flat = params.flatten()
    numeric = finite_difference_gradient(
        lambda x: loss(params.with_flat(x), users, items, ratings, feats, reg), flat, h)
    out, off = {}, 0
    for name, t in params.tensors.items():
        out[name] = max_relative_error(grads[name].ravel(), numeric[off:off + t.size], floor)
        off += t.size
    return out


def relu_margin(params: ModelParams, users, items, feats=None) -> float:
    """Smallest |pre-activation| in the tower; finite differences need it well above the step."""
    trace = forward(params, users, items, feats)
    if not trace.pre:
        return np.inf
    return float(min(np.abs(s).min() for s in trace.pre if s.size))
