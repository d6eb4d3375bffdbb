"""Illumination-guided histogram transformer block.

Spatial positions are sorted by a scalar key and sliced into equal-count
bins; attention runs within each bin and across bins at a fixed rank, in
sorted space, and the result is scattered back to the original layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, LayerNorm2d, Module, Permutation, ShapeError, Tensor, argsort_stable, ops


@dataclass(frozen=True)
class AttentionConfig:
    channels: int
    heads: int = 1
    bins: int = 4
    ffn_expansion: float = 2.0
    illumination_mod: bool = True
    illum_channels: int | None = None

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError(f"channels={self.channels} not divisible by heads={self.heads}")
        if self.bins < 1:
            raise ValueError(f"bins must be >= 1, got {self.bins}")


@dataclass(frozen=True)
class BinPartition:
    """Equal-count bins over positions sorted ascending by key.

    ``order[..., b * bin_size:(b + 1) * bin_size]`` lists the members of bin
    ``b``.  When the length is not divisible by ``bins`` the order is padded
    by repeating its last (largest-key) index; ``valid_mask`` flags the real
    slots.
    """

    order: np.ndarray
    inverse: np.ndarray
    bin_size: int
    bins: int
    pad_count: int

    @property
    def length(self) -> int:
        return self.inverse.shape[-1]

    @property
    def perm(self) -> Permutation:
        return Permutation(self.order[..., :self.length], self.inverse)

    @property
    def valid_mask(self) -> np.ndarray:
        return (np.arange(self.bins * self.bin_size) < self.length).reshape(self.bins, self.bin_size)

    def members(self, b: int) -> np.ndarray:
        return self.order[..., b * self.bin_size:(b + 1) * self.bin_size]


def histogram_partition(keys, bins: int) -> BinPartition:
    """Sort ``keys`` (last axis) ascending with stable ties and slice into ``bins`` bins."""
    keys = np.asarray(keys)
    length = keys.shape[-1] if keys.ndim else 0
    if length == 0:
        raise ValueError("histogram_partition: empty key array")
    if bins < 1:
        raise ValueError(f"histogram_partition: bins must be >= 1, got {bins}")
    perm = argsort_stable(keys)
    bin_size = -(-length // bins)
    pad = bin_size * bins - length
    order = perm.forward
    if pad:
        tail = np.repeat(order[..., -1:], pad, axis=-1)
        order = np.concatenate([order, tail], axis=-1)
    return BinPartition(order, perm.inverse, bin_size, bins, pad)


def dynamic_range_conv(x: Tensor, weight: Tensor, bias: Tensor | None, groups: int) -> Tensor:
    """Depthwise conv evaluated on a value-sorted spatial layout.

    Within each channel group the positions are ordered by the group's channel
    mean; the first half of the group's channels is laid out ascending, the
    second half descending.  The sorted sequence is folded back to ``(h, w)``
    row-major, convolved depthwise, and un-sorted.
    """
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"dynamic_range_conv: {c} channels not divisible into {groups} groups")
    length, cg = h * w, c // groups
    key = x.data.reshape(n, groups, cg, length).mean(axis=2)
    asc = argsort_stable(key)
    desc = argsort_stable(key, descending=True)
    half = (cg + 1) // 2
    fwd = np.empty((n, groups, cg, length), dtype=np.intp)
    inv = np.empty_like(fwd)
    fwd[:, :, :half] = asc.forward[:, :, None]
    fwd[:, :, half:] = desc.forward[:, :, None]
    inv[:, :, :half] = asc.inverse[:, :, None]
    inv[:, :, half:] = desc.inverse[:, :, None]
    fwd, inv = fwd.reshape(n, c, length), inv.reshape(n, c, length)

    flat = ops.reshape(x, (n, c, length))
    sorted_ = ops.reshape(ops.gather_last(flat, fwd), (n, c, h, w))
    kh = weight.shape[-1]
    conv = ops.conv2d(sorted_, weight, bias, padding=kh // 2, groups=c)
    back = ops.gather_last(ops.reshape(conv, (n, c, length)), inv)
    return ops.reshape(back, (n, c, h, w))


class DynamicRangeConv(Module):
    def __init__(self, channels: int, groups: int, rng: np.random.Generator, k: int = 3):
        self.conv = Conv2d(channels, channels, k, rng, groups=channels)
        self._groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        return dynamic_range_conv(x, self.conv.weight, self.conv.bias, self._groups)

    def flops(self, h: int, w: int) -> int:
        return self.conv.flops(h, w)


class IGHSA(Module):
    """Illumination-guided histogram self-attention."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        c = cfg.channels
        self._cfg = cfg
        self.qkv = Conv2d(c, 3 * c, 1, rng)
        self.qkv_dr = DynamicRangeConv(3 * c, 3 * cfg.heads, rng)
        if cfg.illumination_mod:
            self.illum_proj = Conv2d(cfg.illum_channels or c, 2 * c, 1, rng)
        self.proj = Conv2d(c, c, 1, rng, init="zero")

    def __call__(self, x: Tensor, illum: Tensor | None) -> Tensor:
        cfg = self._cfg
        q, k, v = ops.split_channels(self.qkv_dr(self.qkv(x)), 3)
        if cfg.illumination_mod:
            if illum is None or illum.shape[2:] != x.shape[2:]:
                got = None if illum is None else illum.shape
                raise ShapeError(f"illumination guidance {got} does not match features {x.shape}")
            gate = ops.scale(ops.sigmoid(self.illum_proj(illum)), 2.0)
            gk, gv = ops.split_channels(gate, 2)
            k, v = ops.mul(k, gk), ops.mul(v, gv)
        return self.proj(self.attend(q, k, v))

    def attend(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        """Histogram attention on already-projected q, k, v of shape (n, c, h, w)."""
        n, c, h, w = q.shape
        heads, bins = self._cfg.heads, self._cfg.bins
        d, length = c // heads, h * w
        qh, kh, vh = (ops.reshape(t, (n, heads, d, length)) for t in (q, k, v))
        part = histogram_partition(vh.data.mean(axis=2), bins)
        s = part.bin_size
        idx = part.order[:, :, None, :]

        def to_bins(t):
            t = ops.reshape(ops.gather_last(t, idx), (n, heads, d, bins, s))
            return ops.transpose(t, (0, 1, 3, 4, 2))

        qs, ks, vs = to_bins(qh), to_bins(kh), to_bins(vh)
        mask = part.valid_mask
        within = ops.attention(qs, ks, vs, mask)
        swap = (0, 1, 3, 2, 4)
        across = ops.attention(ops.transpose(qs, swap), ops.transpose(ks, swap),
                               ops.transpose(vs, swap), mask.T)
        fused = ops.scale(ops.add(within, ops.transpose(across, swap)), 0.5)
        fused = ops.reshape(ops.transpose(fused, (0, 1, 4, 2, 3)), (n, heads, d, bins * s))
        out = ops.gather_last(fused, part.inverse[:, :, None, :])
        return ops.reshape(out, (n, c, h, w))

    def flops(self, h: int, w: int) -> int:
        cfg = self._cfg
        length = h * w
        d = cfg.channels // cfg.heads
        s = -(-length // cfg.bins)
        attn = cfg.heads * (cfg.bins * 2 * s * s * d + s * 2 * cfg.bins * cfg.bins * d)
        total = self.qkv.flops(h, w) + self.qkv_dr.flops(h, w) + self.proj.flops(h, w) + attn
        if cfg.illumination_mod:
            total += self.illum_proj.flops(h, w)
        return total


class GatedFFN(Module):
    """1x1 expand, GELU-gated halves, 1x1 project back."""

    def __init__(self, channels: int, expansion: float, rng: np.random.Generator):
        hidden = max(2, int(round(expansion * channels)))
        hidden += hidden % 2
        self.expand = Conv2d(channels, hidden, 1, rng)
        self.project = Conv2d(hidden // 2, channels, 1, rng, init="zero")

    def __call__(self, x: Tensor) -> Tensor:
        a, b = ops.split_channels(self.expand(x), 2)
        return self.project(ops.mul(ops.gelu(a), b))

    def flops(self, h: int, w: int) -> int:
        return self.expand.flops(h, w) + self.project.flops(h, w)


class IGHTB(Module):
    """Two pre-norm residual branches: histogram attention, then gated FFN."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.norm1 = LayerNorm2d(cfg.channels)
        self.attn = IGHSA(cfg, rng)
        self.norm2 = LayerNorm2d(cfg.channels)
        self.ffn = GatedFFN(cfg.channels, cfg.ffn_expansion, rng)

    def __call__(self, f_prev: Tensor, illum: Tensor | None) -> Tensor:
        f = ops.add(f_prev, self.attn(self.norm1(f_prev), illum))
        return ops.add(f, self.ffn(self.norm2(f)))

    def flops(self, h: int, w: int) -> int:
        return self.attn.flops(h, w) + self.ffn.flops(h, w)
