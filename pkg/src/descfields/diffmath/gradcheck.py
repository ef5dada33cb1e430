"""Finite-difference validation of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor


def grad_check(f, inputs: list[Tensor], h: float = 1e-3, max_coords: int = 24,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    f maps the input tensors to a scalar Tensor.  For each input, up to
    max_coords coordinates are probed.  Relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f(*inputs)
    if out.data.size != 1:
        raise ValueError("grad_check target must be scalar")
    tape.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = float(f(*inputs).data)
            flat[c] = orig - h
            fm = float(f(*inputs).data)
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(ga.reshape(-1)[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst
