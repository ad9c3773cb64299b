"""Central finite-difference check of the autograd gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autograd import Tensor, no_grad

# finite differences of an O(1) loss at h=1e-5 carry ~1e-10 absolute noise in float64;
# gradients smaller than this are compared in absolute terms
GRAD_FLOOR = 1e-6


def relative_error(analytic: float, numeric: float, floor: float = GRAD_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(params: dict[str, Tensor], loss_fn: Callable[[], Tensor], n_checks: int = 200,
                   h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between autograd and central differences over sampled entries.

    Every parameter tensor contributes at least one entry; the rest are drawn uniformly over
    all scalar entries. Parameters must be float64.
    """
    for k, p in params.items():
        if p.data.dtype != np.float64:
            raise ValueError(f"gradient check needs float64 parameters ({k} is {p.data.dtype})")
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}

    rng = np.random.default_rng(seed)
    names = list(params)
    sizes = np.array([params[k].data.size for k in names])
    picks = [(k, int(rng.integers(0, params[k].data.size))) for k in names]
    extra = max(0, n_checks - len(picks))
    flat = rng.integers(0, sizes.sum(), size=extra)
    bounds = np.cumsum(sizes)
    for f in flat:
        t = int(np.searchsorted(bounds, f, side="right"))
        picks.append((names[t], int(f - (bounds[t] - sizes[t]))))

    worst = 0.0
    for name, idx in picks:
        arr = params[name].data.reshape(-1)
        orig = arr[idx]
        with no_grad():
            arr[idx] = orig + h
            up = loss_fn().item()
            arr[idx] = orig - h
            down = loss_fn().item()
        arr[idx] = orig
        numeric = (up - down) / (2 * h)
        worst = max(worst, relative_error(float(analytic[name].reshape(-1)[idx]), numeric))
    return worst
