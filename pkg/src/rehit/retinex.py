"""Retinex estimator and the dual-branch composition algebra.

The estimator predicts reciprocal maps ``r_bar ~ 1 / R`` and ``l_bar ~ 1 / L``
so the pipeline never divides: ``r' = i_sh * l_bar`` approximates the
reflectance and ``l' = i_sh * r_bar`` the illumination.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, Module, ShapeError, Tensor, ops

RECIPROCAL_FLOOR = 1e-3


@dataclass
class RetinexDecomposition:
    r_bar: Tensor | None
    l_bar: Tensor | None
    guidance: list[Tensor]


@dataclass
class BranchState:
    r_prime: Tensor
    l_prime: Tensor
    r_out: Tensor
    l_out: Tensor
    i_out: Tensor


@dataclass
class GroundTruthDecomposition:
    r_gt: np.ndarray
    l_gt: np.ndarray
    r_hat: np.ndarray
    l_hat: np.ndarray


class RetinexEstimator(Module):
    """Channel-mean prior, 1x1 + depthwise 5x5 trunk, two reciprocal heads.

    Guidance features come from a stride-2 conv chain on the trunk, one
    tensor per UNet level with channels ``base * 2**level``.
    """

    def __init__(self, base_channels: int, levels: int, rng: np.random.Generator,
                 with_heads: bool = True):
        g = base_channels
        self.trunk_in = Conv2d(4, g, 1, rng)
        self.trunk_dw = Conv2d(g, g, 5, rng, groups=g)
        self.guide_down = [Conv2d(g * 2**i, g * 2**(i + 1), 3, rng, stride=2)
                           for i in range(levels - 1)]
        if with_heads:
            unit_bias = math.log(math.expm1(1.0 - RECIPROCAL_FLOOR))
            self.head_r = Conv2d(g, 3, 1, rng, init="zero")
            self.head_l = Conv2d(g, 3, 1, rng, init="zero")
            self.head_r.bias.data[:] = unit_bias
            self.head_l.bias.data[:] = unit_bias
        self._with_heads = with_heads
        self._levels = levels

    def __call__(self, i_sh: Tensor) -> RetinexDecomposition:
        if not np.isfinite(i_sh.data).all():
            raise ValueError("estimator input contains non-finite values")
        prior = ops.mean_axes(i_sh, (1,))
        trunk = ops.relu(self.trunk_dw(self.trunk_in(ops.concat([i_sh, prior]))))
        guidance = [trunk]
        for down in self.guide_down:
            guidance.append(ops.relu(down(guidance[-1])))
        if not self._with_heads:
            return RetinexDecomposition(None, None, guidance)
        r_bar = ops.add_scalar(ops.softplus(self.head_r(trunk)), RECIPROCAL_FLOOR)
        l_bar = ops.add_scalar(ops.softplus(self.head_l(trunk)), RECIPROCAL_FLOOR)
        return RetinexDecomposition(r_bar, l_bar, guidance)

    def flops(self, h: int, w: int) -> int:
        total = self.trunk_in.flops(h, w) + self.trunk_dw.flops(h, w)
        if self._with_heads:
            total += self.head_r.flops(h, w) + self.head_l.flops(h, w)
        for down in self.guide_down:
            total += down.flops(h, w)
            h, w = down.output_size(h, w)
        return total


def estimate(i_sh: Tensor, estimator: RetinexEstimator, levels: int = 3) -> RetinexDecomposition:
    d = estimator(i_sh)
    if len(d.guidance) != levels:
        raise ValueError(f"estimator produces {len(d.guidance)} guidance levels, expected {levels}")
    return d


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes differ {a.shape} vs {b.shape}")


def compose_branches(i_sh: Tensor, d: RetinexDecomposition) -> tuple[Tensor, Tensor]:
    """Return ``(i_sh * l_bar, i_sh * r_bar)``: reflectance and illumination inputs."""
    _check_same(i_sh, d.l_bar, "compose_branches")
    _check_same(i_sh, d.r_bar, "compose_branches")
    return ops.mul(i_sh, d.l_bar), ops.mul(i_sh, d.r_bar)


def recombine(r_out: Tensor, l_out: Tensor, clamp: bool = False) -> Tensor:
    """Elementwise product; ``clamp=True`` only for emitted images, never for losses."""
    _check_same(r_out, l_out, "recombine")
    out = ops.mul(r_out, l_out)
    if clamp:
        return Tensor(np.clip(out.data, 0.0, 1.0))
    return out


def apply_perturbation_model(g: GroundTruthDecomposition) -> np.ndarray:
    """``clamp((r_gt + r_hat) * (l_gt + l_hat), 0, 1)``."""
    r = g.r_gt + g.r_hat
    l = g.l_gt + g.l_hat
    if (r < 0).any() or (l < 0).any():
        raise ValueError("perturbed reflectance/illumination has negative entries; "
                         "invalid synthesis configuration")
    return np.clip(r * l, 0.0, 1.0)
