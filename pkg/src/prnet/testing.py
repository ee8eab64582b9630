"""Reference oracles shared by the test-suite: naive convolution and finite differences."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .tensor import Tensor


def naive_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int, padding: int) -> np.ndarray:
    """Quadruple-loop cross-correlation in float64."""
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for r in range(ho):
                for s in range(wo):
                    win = xp[i, :, r * stride:r * stride + k, s * stride:s * stride + k]
                    out[i, o, r, s] = np.sum(win * w[o]) + (0.0 if b is None else b[o])
    return out


def analytic_grads(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    with tn.Tape() as tape:
        loss = fn(*inputs)
        grads = tn.backward(tape, loss)
    return [grads[t] if t.requires_grad else None for t in inputs]


def numeric_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], which: int,
                 step: float = 1e-3, indices=None) -> np.ndarray:
    """Central differences of the scalar ``fn(*inputs)`` w.r.t. ``inputs[which]``.

    ``indices`` restricts the perturbed flat positions; other entries stay NaN.
    """
    t = inputs[which]
    flat = t.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(*inputs).item()
        flat[i] = orig - step
        down = fn(*inputs).item()
        flat[i] = orig
        out[i] = (up - down) / (2 * step)
    return out.reshape(t.shape)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(1, |n|) over entries where ``numeric`` was evaluated."""
    sel = ~np.isnan(numeric)
    if not sel.any():
        return 0.0
    a, n = analytic[sel], numeric[sel]
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n))))


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-3,
              samples: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst relative error over all learnable inputs.

    Inputs must be float64 tensors. With ``samples``, only that many random
    entries of each input are perturbed.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck needs float64 inputs")
    analytic = analytic_grads(fn, inputs)
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        idx = None
        if samples is not None and t.size > samples:
            idx = rng.choice(t.size, size=samples, replace=False)
        worst = max(worst, max_rel_error(analytic[i], numeric_grad(fn, inputs, i, step, idx)))
    return worst
