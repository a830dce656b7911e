"""Finite-difference verification of reverse-mode gradients.

Central differences with step h compare against the tape's gradients.
The relative error uses a small floor in the denominator so that
near-zero gradients are judged by absolute difference instead.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
_REL_FLOOR = 1e-4


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), _REL_FLOOR)


def check_gradients(
    loss_fn: Callable[[], ad.Tensor],
    params: Sequence[ad.Tensor],
    h: float = DEFAULT_STEP,
    max_entries_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Return the max relative error between tape and central-difference grads.

    ``loss_fn`` must rebuild the forward pass from the current parameter
    values and return a scalar tensor. Every entry of every parameter is
    probed unless ``max_entries_per_param`` limits to a random subset.
    """
    with ad.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = []
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        analytic.append(g.copy())
        p.zero_grad()

    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_entries_per_param, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            worst = max(worst, relative_error(fd, gflat[i]))
    return worst


def probe_gradients(
    loss_fn: Callable[[], ad.Tensor],
    params: Sequence[ad.Tensor],
    n_probes: int,
    rng: np.random.Generator,
    h: float = DEFAULT_STEP,
) -> float:
    """Finite-difference check on ``n_probes`` random scalar entries drawn
    across the whole parameter set."""
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_probes, total), replace=False)
    bounds = np.cumsum(sizes)

    with ad.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p in params:
        p.zero_grad()

    worst = 0.0
    for pick in picks:
        which = int(np.searchsorted(bounds, pick, side="right"))
        offset = int(pick - (bounds[which - 1] if which else 0))
        p = params[which]
        flat = p.data.reshape(-1)
        orig = flat[offset]
        flat[offset] = orig + h
        up = loss_fn().item()
        flat[offset] = orig - h
        down = loss_fn().item()
        flat[offset] = orig
        fd = (up - down) / (2.0 * h)
        worst = max(worst, relative_error(fd, grads[which].reshape(-1)[offset]))
    return worst
