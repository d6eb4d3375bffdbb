"""Central-difference verification of the reverse-mode gradient rules."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, frozen_branches


def grad_check_detail(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6,
                      max_entries: int | None = None, rng: np.random.Generator | None = None,
                      order: int = 2) -> dict[str, float]:
    """Per-parameter worst relative error between analytic and central-difference grads.

    ``max_entries`` caps how many coordinates of each parameter are probed
    (sampled without replacement from ``rng``); ``None`` probes all of them.
    ``order=4`` uses the five-point central stencil, whose O(eps^4) truncation
    lets a larger ``eps`` suppress roundoff on deep compositions.

    Piecewise decisions (ReLU/clamp masks, signs, sort orders) are frozen at
    the unperturbed point, so every probe stays on the smooth piece the
    analytic gradient describes.
    """
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps={eps} outside [1e-6, 1e-4]")
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters (verify mode); "
                            f"{p.name or 'param'} is {p.data.dtype}")
    rng = rng or np.random.default_rng(0)
    with frozen_branches() as branches:
        return _check(f, params, eps, max_entries, rng, order, branches)


def _check(f, params, eps, max_entries, rng, order, branches) -> dict[str, float]:
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: loss is not finite")
    tape.backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    def value() -> float:
        branches.rewind()
        v = float(f().data)
        if not np.isfinite(v):
            raise FloatingPointError("grad_check: perturbed loss is not finite")
        return v

    report: dict[str, float] = {}
    for i, (p, ga) in enumerate(zip(params, analytic)):
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for j in entries:
            orig = flat[j]

            def at(step: float) -> float:
                flat[j] = orig + step
                return value()

            if order == 2:
                cd = (at(eps) - at(-eps)) / (2 * eps)
            else:
                cd = (8 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12 * eps)
            flat[j] = orig
            a = float(gflat[j])
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
            worst = max(worst, err)
        report[p.name or f"param{i}"] = worst
    return report


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6,
               max_entries: int | None = None, rng: np.random.Generator | None = None,
               order: int = 2) -> float:
    """Max relative error ``|analytic - cd| / max(|analytic|, |cd|, 1e-8)`` over ``params``."""
    detail = grad_check_detail(f, params, eps, max_entries, rng, order)
    return max(detail.values()) if detail else 0.0
