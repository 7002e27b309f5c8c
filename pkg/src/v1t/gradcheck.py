"""Finite-difference verification of reverse-mode gradients.

Every architectural component ships with a check here: a scalar-valued
function of one or more float64 tensors is differentiated both ways and
the worst relative disagreement is reported.  Checks must run in float64;
central differences are meaningless at float32 precision.
"""

from __future__ import annotations

import numpy as np

from .exceptions import NumericalError
from .tensor import Tensor


def grad_check(f, xs, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central differences.

    f        -- callable taking the tensors in `xs` and returning a scalar
                Tensor; must be deterministic (fix any sampling outside).
    xs       -- tensors to perturb; float64, requires_grad=True.
    h        -- half-width of the central difference.

    The relative error uses max(|analytic|, |numeric|, 1e-8) as the
    denominator so near-zero gradients do not explode the ratio.
    """
    xs = list(xs)
    for x in xs:
        if x.dtype != np.float64:
            raise NumericalError("grad_check requires float64 tensors")
        x.zero_grad()
    out = f(*xs)
    if out.size != 1:
        raise NumericalError("grad_check target must be scalar")
    if not np.isfinite(out.data).all():
        raise NumericalError("grad_check target is non-finite at the base point")
    out.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]

    worst = 0.0
    for x, ana in zip(xs, analytic):
        flat = x.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*xs).data)
            flat[i] = orig - h
            fm = float(f(*xs).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError("non-finite value during finite differencing")
            numeric = (fp - fm) / (2.0 * h)
            a = float(ana.reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
