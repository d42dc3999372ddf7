"""Central-finite-difference gradient verification."""

from __future__ import annotations

import numpy as np

from .tensor import NumericError, Tape, Tensor


def grad_check(f, points, h: float = 1e-5, coords=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    f maps the list `points` (Tensors, all treated as differentiable) to a
    scalar Tensor. Error per coordinate is |analytic - fd| / max(1, |analytic|).
    `coords` optionally restricts checking to that many randomly chosen
    coordinates per tensor (deterministic choice) for large parameter sets.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    points = [p if isinstance(p, Tensor) else Tensor(p) for p in points]
    for p in points:
        p.requires_grad = True
        p.grad = None

    with Tape() as tape:
        loss = f(points)
        if not np.isfinite(loss.data).all():
            raise NumericError("non-finite loss in grad_check")
        tape.backward(loss)

    worst = 0.0
    for p in points:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and flat.size > coords:
            idx = np.random.RandomState(0).choice(flat.size, size=coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(points).data)
            flat[i] = orig - h
            fm = float(f(points).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("non-finite intermediate in finite differencing")
            fd = (fp - fm) / (2.0 * h)
            err = abs(aflat[i] - fd) / max(1.0, abs(aflat[i]))
            worst = max(worst, err)
    return worst
