"""Full network: Retinex estimator plus two hybrid CNN-Transformer UNets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .blocks import IGHCTB, BlockConfig, DrdbConfig, SamConfig
from .nn import Conv2d, FlopCounter, Module, ShapeError, Tensor, ops
from .retinex import BranchState, RetinexEstimator, compose_branches, recombine

LEVELS = 3


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 48
    levels: int = LEVELS
    bins: int = 8
    heads: tuple[int, ...] = (1, 2, 4)
    ffn_expansion: float = 2.0
    dual_branch: bool = True
    use_ig_htb: bool = True
    illumination_mod: bool = True
    drdb_growth: int | None = None
    drdb_dilations: tuple[int, ...] = (1, 2, 3, 2)
    sam_scales: int = 3
    sam_convs: int = 5

    def __post_init__(self):
        if self.levels != LEVELS:
            raise ValueError(f"levels is fixed at {LEVELS}, got {self.levels}")
        if len(self.heads) != self.levels:
            raise ValueError(f"need one head count per level, got {self.heads}")
        for i, h in enumerate(self.heads):
            c = self.channels(i)
            if h < 1 or c % h:
                raise ValueError(f"level {i + 1}: {c} channels not divisible by {h} heads")
        if self.bins < 1 or self.base_channels < 1:
            raise ValueError("bins and base_channels must be positive")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def block(self, level: int) -> BlockConfig:
        return BlockConfig(channels=self.channels(level), heads=self.heads[level], bins=self.bins,
                           ffn_expansion=self.ffn_expansion, illumination_mod=self.illumination_mod,
                           use_ig_htb=self.use_ig_htb,
                           drdb=DrdbConfig(self.drdb_growth, tuple(self.drdb_dilations)),
                           sam=SamConfig(self.sam_scales, self.sam_convs))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heads"] = list(self.heads)
        d["drdb_dilations"] = list(self.drdb_dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("heads", "drdb_dilations"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


TINY = ModelConfig(base_channels=8, bins=16, heads=(1, 2, 4))


class DeepSupervisionHead(Module):
    """Conv to ``3 * scale**2`` channels then pixel shuffle to full resolution."""

    def __init__(self, channels: int, level: int, rng: np.random.Generator):
        if level not in (1, 2, 3):
            raise ValueError(f"deep supervision level must be 1..3, got {level}")
        self._scale = 2 ** (level - 1)
        self.conv = Conv2d(channels, 3 * self._scale**2, 3, rng, init="zero")

    def __call__(self, f: Tensor) -> Tensor:
        return ops.pixel_shuffle(self.conv(f), self._scale)

    def flops(self, h: int, w: int) -> int:
        return self.conv.flops(h, w)


class IGHCT(Module):
    """Three-level UNet of hybrid blocks producing a residual and deep predictions.

    Encoder levels 1..3 then decoder levels 3..1; stride-2 conv down,
    1x1 expand + pixel shuffle up, additive skips.  Guidance ``F_i`` is added
    (after a 1x1 projection) to every block input and also passed to the
    block's attention as the illumination feature.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        ch = [cfg.channels(i) for i in range(cfg.levels)]
        self.embed = Conv2d(3, ch[0], 3, rng)
        self.enc_guide = [Conv2d(c, c, 1, rng) for c in ch]
        self.encoders = [IGHCTB(cfg.block(i), rng) for i in range(cfg.levels)]
        self.downs = [Conv2d(ch[i], ch[i + 1], 3, rng, stride=2) for i in range(cfg.levels - 1)]
        self.ups = [Conv2d(ch[i + 1], 4 * ch[i], 1, rng) for i in range(cfg.levels - 1)]
        self.dec_guide = [Conv2d(c, c, 1, rng) for c in ch]
        self.decoders = [IGHCTB(cfg.block(i), rng) for i in range(cfg.levels)]
        self.deep_heads = [DeepSupervisionHead(ch[i], i + 1, rng) for i in range(cfg.levels)]
        self.out = Conv2d(ch[0], 3, 3, rng, init="zero")
        self._levels = cfg.levels

    def __call__(self, x: Tensor, guidance: list[Tensor]) -> tuple[Tensor, list[Tensor]]:
        f = self.embed(x)
        skips = []
        for i in range(self._levels):
            if i:
                f = self.downs[i - 1](f)
            f = ops.add(f, self.enc_guide[i](guidance[i]))
            f = self.encoders[i](f, guidance[i])
            skips.append(f)
        deep: list[Tensor | None] = [None] * self._levels
        for i in reversed(range(self._levels)):
            if i < self._levels - 1:
                f = ops.add(ops.pixel_shuffle(self.ups[i](f), 2), skips[i])
            f = ops.add(f, self.dec_guide[i](guidance[i]))
            f = self.decoders[i](f, guidance[i])
            deep[i] = self.deep_heads[i](f)
        return self.out(f), deep

    def flops(self, h: int, w: int) -> int:
        total = self.embed.flops(h, w) + self.out.flops(h, w)
        for i in range(self._levels):
            lh, lw = h // 2**i, w // 2**i
            total += self.enc_guide[i].flops(lh, lw) + self.dec_guide[i].flops(lh, lw)
            total += self.encoders[i].flops(lh, lw) + self.decoders[i].flops(lh, lw)
            total += self.deep_heads[i].flops(lh, lw)
            if i:
                total += self.downs[i - 1].flops(2 * lh, 2 * lw) + self.ups[i - 1].flops(lh, lw)
        return total


@dataclass
class ForwardOutputs:
    i_out: Tensor
    branch: BranchState | None
    deep_outputs: dict[str, list[Tensor]] = field(default_factory=dict)

    def deep_images(self) -> list[Tensor]:
        """Image-space prediction per decoder level (level 1 first)."""
        if "image" in self.deep_outputs:
            return self.deep_outputs["image"]
        return [ops.mul(r, l) for r, l in zip(self.deep_outputs["r"], self.deep_outputs["l"])]


class ReHiTModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.estimator = RetinexEstimator(cfg.base_channels, cfg.levels, rng,
                                          with_heads=cfg.dual_branch)
        if cfg.dual_branch:
            self.m_r = IGHCT(cfg, rng)
            self.m_l = IGHCT(cfg, rng)
        else:
            self.m = IGHCT(cfg, rng)
        self._cfg = cfg
        self.assign_names()

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    def __call__(self, i_sh: Tensor) -> ForwardOutputs:
        return model_forward(self, i_sh)


def build_model(cfg: ModelConfig, seed: int = 0) -> ReHiTModel:
    return ReHiTModel(cfg, np.random.default_rng(seed))


def model_forward(m: ReHiTModel, i_sh: Tensor) -> ForwardOutputs:
    n, c, h, w = i_sh.shape
    if c != 3:
        raise ShapeError(f"expected a 3-channel image, got {c} channels")
    if h % 4 or w % 4:
        raise ShapeError(f"spatial dims {h}x{w} must be divisible by 4; "
                         f"reflect-pad the image first (the CLI does this)")
    d = m.estimator(i_sh)
    if not m.config.dual_branch:
        res, deep = m.m(i_sh, d.guidance)
        return ForwardOutputs(ops.add(i_sh, res), None,
                              {"image": [ops.add(i_sh, k) for k in deep]})
    r_prime, l_prime = compose_branches(i_sh, d)
    res_r, deep_r = m.m_r(r_prime, d.guidance)
    res_l, deep_l = m.m_l(l_prime, d.guidance)
    r_out, l_out = ops.add(r_prime, res_r), ops.add(l_prime, res_l)
    i_out = recombine(r_out, l_out)
    deep = {"r": [ops.add(r_prime, k) for k in deep_r], "l": [ops.add(l_prime, k) for k in deep_l]}
    return ForwardOutputs(i_out, BranchState(r_prime, l_prime, r_out, l_out, i_out), deep)


def count_params(m: Module) -> int:
    return sum(p.size for p in m.parameters())


def param_breakdown(m: Module, depth: int = 2) -> dict[str, int]:
    """Parameter counts grouped by the first ``depth`` components of each name."""
    out: dict[str, int] = {}
    for name, p in m.named_parameters():
        key = ".".join(name.split(".")[:depth])
        out[key] = out.get(key, 0) + p.size
    return out


def estimate_flops(m: ReHiTModel, h: int, w: int) -> int:
    """Analytic conv + attention FLOPs for one ``h x w`` image."""
    if h % 4 or w % 4:
        raise ShapeError(f"dims {h}x{w} must be divisible by 4")
    total = m.estimator.flops(h, w)
    nets = [m.m_r, m.m_l] if m.config.dual_branch else [m.m]
    return total + sum(net.flops(h, w) for net in nets)


def measured_flops(m: ReHiTModel, h: int, w: int) -> int:
    """Run a forward pass and count the FLOPs the operators actually executed."""
    with FlopCounter() as counter:
        m(Tensor(np.full((1, 3, h, w), 0.5)))
    return counter.total
