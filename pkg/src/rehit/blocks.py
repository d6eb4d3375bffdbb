"""CNN halves of the hybrid block (DRDB, SAM) and the block itself."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hist_attention import IGHTB, AttentionConfig
from .nn import Conv2d, Module, ShapeError, Tensor, ops


@dataclass(frozen=True)
class DrdbConfig:
    growth_channels: int | None = None  # None -> channels // 2
    dilations: tuple[int, ...] = (1, 2, 3, 2)

    @property
    def layers(self) -> int:
        return len(self.dilations)


@dataclass(frozen=True)
class SamConfig:
    scales: int = 3
    branch_convs: int = 5

    def __post_init__(self):
        if self.scales < 1:
            raise ValueError("SAM needs at least one scale")


class DRDB(Module):
    """Dilated residual dense block: dense 3x3 dilated layers, 1x1 fusion, residual."""

    def __init__(self, channels: int, cfg: DrdbConfig, rng: np.random.Generator):
        g = cfg.growth_channels or max(1, channels // 2)
        self.layers = [Conv2d(channels + j * g, g, 3, rng, dilation=d)
                       for j, d in enumerate(cfg.dilations)]
        self.fusion = Conv2d(channels + cfg.layers * g, channels, 1, rng, init="zero")

    def __call__(self, x: Tensor) -> Tensor:
        feats = [x]
        for conv in self.layers:
            feats.append(ops.relu(conv(ops.concat(feats))))
        return ops.add(x, self.fusion(ops.concat(feats)))

    def flops(self, h: int, w: int) -> int:
        return sum(c.flops(h, w) for c in self.layers) + self.fusion.flops(h, w)


class SAM(Module):
    """Pyramid context extraction with a shared conv branch, then per-pixel softmax fusion.

    The fused map feeds a zero-initialized 1x1 projection added back onto the
    input, so a fresh module is the identity.
    """

    def __init__(self, channels: int, cfg: SamConfig, rng: np.random.Generator):
        self.branch = [Conv2d(channels, channels, 3, rng) for _ in range(cfg.branch_convs)]
        self.fuse = Conv2d(cfg.scales * channels, cfg.scales, 1, rng)
        self.proj = Conv2d(channels, channels, 1, rng, init="zero")
        self._cfg = cfg

    def _sizes(self, h: int, w: int) -> list[tuple[int, int]]:
        lo = 2 ** (self._cfg.scales - 1)
        if h < lo or w < lo:
            raise ShapeError(f"SAM with {self._cfg.scales} scales needs spatial dims >= {lo}, got {h}x{w}")
        return [(h // 2**s, w // 2**s) for s in range(self._cfg.scales)]

    def extract(self, x: Tensor) -> list[Tensor]:
        h, w = x.shape[2:]
        pyramid = []
        for sh, sw in self._sizes(h, w):
            f = ops.bilinear_resize(x, sh, sw)
            for i, conv in enumerate(self.branch):
                f = conv(f)
                if i < len(self.branch) - 1:
                    f = ops.relu(f)
            pyramid.append(f)
        return pyramid

    def fusion_weights(self, pyramid: list[Tensor]) -> tuple[list[Tensor], Tensor]:
        if not pyramid:
            raise ValueError("cross-scale fusion of an empty pyramid")
        h, w = pyramid[0].shape[2:]
        ups = [ops.bilinear_resize(p, h, w) for p in pyramid]
        return ups, ops.softmax(self.fuse(ops.concat(ups)), axis=1)

    def fuse_scales(self, pyramid: list[Tensor]) -> Tensor:
        ups, weights = self.fusion_weights(pyramid)
        out = None
        for s, feat in enumerate(ups):
            term = ops.mul(feat, ops.slice_channels(weights, s, s + 1))
            out = term if out is None else ops.add(out, term)
        return out

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(x, self.proj(self.fuse_scales(self.extract(x))))

    def flops(self, h: int, w: int) -> int:
        total = 0
        for sh, sw in self._sizes(h, w):
            total += sum(c.flops(sh, sw) for c in self.branch)
        return total + self.fuse.flops(h, w) + self.proj.flops(h, w)


@dataclass(frozen=True)
class BlockConfig:
    channels: int
    heads: int = 1
    bins: int = 4
    ffn_expansion: float = 2.0
    illumination_mod: bool = True
    use_ig_htb: bool = True
    drdb: DrdbConfig = field(default_factory=DrdbConfig)
    sam: SamConfig = field(default_factory=SamConfig)


class IGHCTB(Module):
    """DRDB -> IG-HTB -> SAM, each dims-preserving."""

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        self.drdb = DRDB(cfg.channels, cfg.drdb, rng)
        if cfg.use_ig_htb:
            attn_cfg = AttentionConfig(cfg.channels, cfg.heads, cfg.bins, cfg.ffn_expansion,
                                       cfg.illumination_mod, cfg.channels)
            self.htb = IGHTB(attn_cfg, rng)
        self.sam = SAM(cfg.channels, cfg.sam, rng)
        self._use_htb = cfg.use_ig_htb

    def __call__(self, x: Tensor, illum: Tensor | None) -> Tensor:
        f = self.drdb(x)
        if self._use_htb:
            f = self.htb(f, illum)
        return self.sam(f)

    def flops(self, h: int, w: int) -> int:
        total = self.drdb.flops(h, w) + self.sam.flops(h, w)
        if self._use_htb:
            total += self.htb.flops(h, w)
        return total
