"""Central-difference gradient suite over operators, blocks and the tiny model.

Each case builds fresh float64 inputs from a seed and returns a scalar loss
closure plus the tensors to probe.  Losses contract the output with a fixed
random mask so every output coordinate contributes.  Blocks and the model are
randomized first: zero-initialized residual tails would otherwise make most
gradients identically zero.

Operators use the plain two-point stencil at eps 1e-6.  Composite cases use
the five-point stencil at eps 1e-4 with small randomization noise: deep
stacks put many gradient entries seven or more orders of magnitude below the
loss, where two-point roundoff dominates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import nn
from .blocks import DRDB, IGHCTB, SAM, BlockConfig, DrdbConfig, SamConfig
from .hist_attention import IGHSA, IGHTB, AttentionConfig, GatedFFN
from .model import TINY, build_model
from .nn import Parameter, Tensor, ops
from .retinex import RetinexEstimator, compose_branches

Builder = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]

OP_TOL, BLOCK_TOL, MODEL_TOL = 1e-4, 1e-4, 1e-3
MODEL_PROBED_TENSORS = 40


@dataclass(frozen=True)
class GradCase:
    name: str
    scope: str
    build: Builder
    tol: float
    seeds: int = 1
    max_entries: int | None = None
    eps: float = 1e-6
    order: int = 2


@dataclass
class GradResult:
    case: GradCase
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.case.tol


def _p(a) -> Parameter:
    return Parameter(np.asarray(a, dtype=np.float64))


def _masked(fn, rng, *params):
    """Loss ``sum(fn() * m)`` with ``m`` drawn to match the output shape."""
    m = rng.standard_normal(fn().shape)
    return lambda: ops.sum_(ops.mul(fn(), m)), list(params)


def _unary(fn, shape=(2, 3, 3, 3), shift=0.0) -> Builder:
    def build(rng):
        x = _p(rng.standard_normal(shape) + shift)
        return _masked(lambda: fn(x), rng, x)
    return build


def _binary(fn, positive_b=False) -> Builder:
    def build(rng):
        a = _p(rng.standard_normal((2, 3, 2, 2)))
        braw = rng.standard_normal((1, 3, 1, 2))
        b = _p(np.abs(braw) + 0.5 if positive_b else braw)
        return _masked(lambda: fn(a, b), rng, a, b)
    return build


def _conv(**kw) -> Builder:
    def build(rng):
        x, w, b = (_p(rng.standard_normal(s)) for s in ((2, 3, 5, 5), (4, 3, 3, 3), (4,)))
        return _masked(lambda: ops.conv2d(x, w, b, **kw), rng, x, w, b)
    return build


def _conv_1x1(rng):
    x, w = _p(rng.standard_normal((2, 3, 4, 4))), _p(rng.standard_normal((2, 3, 1, 1)))
    return _masked(lambda: ops.conv2d(x, w), rng, x, w)


def _depthwise(rng):
    x, w = _p(rng.standard_normal((1, 3, 5, 5))), _p(rng.standard_normal((3, 1, 5, 5)))
    return _masked(lambda: ops.conv2d(x, w, padding=2, groups=3), rng, x, w)


def _layer_norm(rng):
    x = _p(rng.standard_normal((2, 4, 3, 3)))
    g, b = _p(rng.standard_normal(4)), _p(rng.standard_normal(4))
    return _masked(lambda: ops.layer_norm(x, g, b, 1e-5), rng, x, g, b)


def _attention(rng):
    q, k, v = (_p(rng.standard_normal((2, 3, 5, 4))) for _ in range(3))
    mask = rng.random((3, 5)) > 0.3
    mask[:, 0] = True
    return _masked(lambda: ops.attention(q, k, v, mask), rng, q, k, v)


def _gather(rng):
    x = _p(rng.standard_normal((2, 3, 6)))
    idx = np.concatenate([rng.permutation(6), [5, 5]])[None, None, :]
    return _masked(lambda: ops.gather_last(x, idx), rng, x)


def _concat_slice(rng):
    a, b = _p(rng.standard_normal((1, 2, 3, 3))), _p(rng.standard_normal((1, 3, 3, 3)))
    return _masked(lambda: ops.slice_channels(ops.concat([a, b]), 1, 4), rng, a, b)


OP_BUILDERS: dict[str, Builder] = {
    "conv2d": _conv(padding=1),
    "conv2d_dilated_strided": _conv(padding=2, dilation=2, stride=2),
    "conv2d_1x1": _conv_1x1,
    "conv2d_depthwise": _depthwise,
    "layer_norm": _layer_norm,
    "pixel_shuffle": _unary(lambda x: ops.pixel_shuffle(x, 2), (1, 8, 2, 3)),
    "bilinear_resize": _unary(lambda x: ops.bilinear_resize(x, 5, 2), (1, 2, 3, 4)),
    "avg_pool2": _unary(ops.avg_pool2, (1, 2, 5, 4)),
    "softmax": _unary(lambda x: ops.softmax(x, axis=1)),
    "relu": _unary(ops.relu),
    "gelu": _unary(ops.gelu),
    "sigmoid": _unary(ops.sigmoid),
    "softplus": _unary(ops.softplus),
    "abs": _unary(ops.abs_),
    "pow_scalar": _unary(lambda x: ops.pow_scalar(x, 0.37), shift=4.0),
    "clamp_min": _unary(lambda x: ops.clamp_min(x, 0.1)),
    "mean": _unary(lambda x: ops.reshape(ops.mean(x), (1,))),
    "mean_axes": _unary(lambda x: ops.mean_axes(x, (2, 3)), (2, 3, 4, 4)),
    "transpose": _unary(lambda x: ops.transpose(x, (0, 2, 3, 1))),
    "reshape": _unary(lambda x: ops.reshape(x, (3, 2, 9))),
    "scale_add_scalar": _unary(lambda x: ops.add_scalar(ops.scale(x, -1.7), 0.3)),
    "add": _binary(ops.add),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul),
    "div": _binary(ops.div, positive_b=True),
    "attention": _attention,
    "gather_last": _gather,
    "concat_slice": _concat_slice,
}


def _module_case(make, x_shape, with_illum=False, scale=0.1):
    def build(rng):
        module = make(rng)
        module.assign_names()
        nn.randomize_(module, rng, scale)
        x = _p(rng.standard_normal(x_shape))
        x.name = "input"
        if with_illum:
            illum = _p(rng.standard_normal(x_shape))
            illum.name = "illum"
            loss, params = _masked(lambda: module(x, illum), rng, x, illum)
        else:
            loss, params = _masked(lambda: module(x), rng, x)
        return loss, params + module.parameters()
    return build


def _retinex(rng):
    est = RetinexEstimator(4, 3, rng)
    est.assign_names()
    nn.randomize_(est, rng, 0.1)
    i_sh = _p(rng.uniform(0.1, 0.9, (1, 3, 8, 8)))
    i_sh.name = "i_sh"
    m = [rng.standard_normal((1, 3, 8, 8)) for _ in range(2)]

    def loss():
        r_prime, l_prime = compose_branches(i_sh, est(i_sh))
        return ops.add(ops.sum_(ops.mul(r_prime, m[0])), ops.sum_(ops.mul(l_prime, m[1])))
    return loss, [i_sh] + est.parameters()


def _ms_ssim(rng):
    from .training import ms_ssim_loss
    pred = _p(rng.uniform(0.2, 0.8, (1, 1, 24, 24)))
    target = Tensor(np.clip(pred.data + 0.1 * rng.standard_normal(pred.shape), 0, 1))
    return (lambda: ms_ssim_loss(pred, target, scales=2)), [pred]


def _tiny_model(rng):
    model = build_model(replace(TINY, bins=4), int(rng.integers(1 << 31)))
    nn.randomize_(model, rng, 0.1)
    x = _p(rng.uniform(0.1, 0.9, (1, 3, 16, 16)))
    x.name = "i_sh"
    m = rng.standard_normal((1, 3, 16, 16))
    params = model.parameters()
    # a random subset of tensors keeps the full-model check within budget
    picked = sorted(rng.choice(len(params), min(MODEL_PROBED_TENSORS, len(params)), replace=False))
    return (lambda: ops.sum_(ops.mul(model(x).i_out, m))), [x] + [params[i] for i in picked]


def suite() -> list[GradCase]:
    cases = [GradCase(name, "ops", b, OP_TOL, seeds=20) for name, b in OP_BUILDERS.items()]
    attn = AttentionConfig(8, heads=2, bins=4)
    block = BlockConfig(8, heads=2, bins=4)
    composite = {"eps": 1e-4, "order": 4}
    cases += [
        GradCase("DRDB", "blocks", _module_case(lambda r: DRDB(8, DrdbConfig(), r), (1, 8, 6, 6)),
                 BLOCK_TOL, **composite),
        GradCase("SAM", "blocks", _module_case(lambda r: SAM(4, SamConfig(), r), (1, 4, 8, 8)),
                 BLOCK_TOL, **composite),
        GradCase("IG-HSA", "blocks", _module_case(lambda r: IGHSA(attn, r), (1, 8, 6, 6), True),
                 BLOCK_TOL, **composite),
        GradCase("GatedFFN", "blocks", _module_case(lambda r: GatedFFN(4, 2.0, r), (1, 4, 3, 3)),
                 BLOCK_TOL, **composite),
        GradCase("IG-HTB", "blocks", _module_case(lambda r: IGHTB(attn, r), (1, 8, 6, 6), True),
                 BLOCK_TOL, **composite),
        GradCase("IG-HCTB", "blocks", _module_case(lambda r: IGHCTB(block, r), (1, 8, 8, 8), True),
                 BLOCK_TOL, **composite),
        GradCase("retinex", "blocks", _retinex, BLOCK_TOL, **composite),
        GradCase("ms_ssim_loss", "blocks", _ms_ssim, BLOCK_TOL, **composite),
        GradCase("tiny_model", "model", _tiny_model, MODEL_TOL, max_entries=2, **composite),
    ]
    return cases


SCOPES = ("ops", "blocks", "model", "hist_attention")
HIST_ATTENTION_CASES = ("attention", "gather_last", "IG-HSA", "GatedFFN", "IG-HTB")


def in_scope(case: GradCase, scope: str) -> bool:
    if scope == "hist_attention":
        return case.name in HIST_ATTENTION_CASES
    return scope in ("all", case.scope)


def run_case(case: GradCase, seed0: int = 0) -> GradResult:
    start = time.perf_counter()
    worst = 0.0
    with nn.numeric_mode("verify"):
        for s in range(case.seeds):
            rng = np.random.default_rng(seed0 + s)
            f, params = case.build(rng)
            worst = max(worst, nn.grad_check(f, params, eps=case.eps, max_entries=case.max_entries,
                                             rng=rng, order=case.order))
    return GradResult(case, worst, time.perf_counter() - start)


def run_suite(scope: str = "all", on_result: Callable[[GradResult], None] | None = None
              ) -> list[GradResult]:
    if scope != "all" and scope not in SCOPES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; expected all or one of {SCOPES}")
    results = []
    for case in suite():
        if in_scope(case, scope):
            r = run_case(case)
            results.append(r)
            if on_result is not None:
                on_result(r)
    return results
