"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from ..errors import NumericError
from .tape import Var, backward


def grad_check(fn, inputs, eps: float = 1e-5, max_coords: int = 128, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` maps one Var per input array to a scalar Var.  Everything is
    evaluated in float64.  For large inputs a deterministic sample of
    `max_coords` coordinates per input is checked.

    Relative error per coordinate: |a - n| / max(|a|, |n|, 1e-8).
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]

    def value_at(arrs) -> float:
        out = fn(*[Var(a) for a in arrs])
        val = float(np.asarray(out.value).item())
        if not np.isfinite(val):
            raise NumericError("non-finite value during finite differencing")
        return val

    leaves = [Var(a, requires=True) for a in arrays]
    out = fn(*leaves)
    if not np.all(np.isfinite(out.value)):
        raise NumericError("non-finite analytic forward value")
    backward(out)
    analytic = [
        lf.grad if lf.grad is not None else np.zeros_like(a)
        for lf, a in zip(leaves, arrays)
    ]

    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    for idx, a in enumerate(arrays):
        flat = a.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        an_flat = analytic[idx].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = value_at(arrays)
            flat[c] = orig - eps
            f_minus = value_at(arrays)
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a_val = float(an_flat[c])
            err = abs(a_val - numeric) / max(abs(a_val), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
