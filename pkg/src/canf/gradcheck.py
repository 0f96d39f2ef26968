"""Central-difference gradient verification for the autodiff graph."""
from __future__ import annotations

import numpy as np

from .tensor import NumericError, gradients


def grad_check(f, params, h: float = 1e-5, scale_floor: float = 1e-3):
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor built from
    ``params`` (a list of (name, Tensor) pairs); it is re-evaluated with each
    parameter entry nudged by +/- h. Returns (max_rel_err, per_param dict).

    Per scalar, rel err = |analytic - fd| / max(|analytic|, |fd|, scale_floor).
    The floor keeps gradients far below the finite-difference noise floor
    (~eps_f64 * |f| / h) from registering as spurious relative error while
    still flagging any absolute disagreement above scale_floor * tolerance.
    Use fp64 parameters and h in [1e-6, 1e-4] for tolerances below 1e-6.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"grad_check: h={h} outside [1e-6, 1e-4]")
    params = list(params)
    tensors = [t for _, t in params]
    analytic = gradients(f(), tensors)

    worst = 0.0
    report = {}
    for (name, t), grad in zip(params, analytic):
        flat = t.data.reshape(-1)
        fd = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f().item()
            flat[i] = orig - h
            lo = f().item()
            flat[i] = orig
            fd[i] = (hi - lo) / (2.0 * h)
        if not np.isfinite(fd).all():
            raise NumericError(f"grad_check: non-finite finite-difference values for parameter '{name}'")
        if not np.isfinite(grad).all():
            raise NumericError(f"grad_check: non-finite analytic gradient for parameter '{name}'")
        a = grad.reshape(-1)
        rel = np.abs(a - fd) / np.maximum(np.maximum(np.abs(a), np.abs(fd)), scale_floor)
        err = float(rel.max()) if rel.size else 0.0
        report[name] = err
        worst = max(worst, err)
    return worst, report
