"""Losses, Adam, learning-rate schedule, augmentation and the training loop."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .data import ShadowPair
from .metrics import gaussian_window, psnr
from .model import ForwardOutputs, ReHiTModel
from .nn import Parameter, ShapeError, Tape, Tensor, get_dtype, no_tape, ops

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_C1, _C2 = 0.01**2, 0.03**2


class NumericError(FloatingPointError):
    """Non-finite loss or gradient during training."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    lr_start: float = 1e-4
    lr_end: float = 6.25e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    crop: int = 384
    batch: int = 4
    iters: int = 1000
    w_l1: float = 1.0
    w_msssim: float = 0.4
    w_deep: float = 0.25
    schedule: str = "cosine"
    grad_clip: float | None = 1.0
    augment: bool = True
    seed: int = 0
    log_interval: int = 10
    ckpt_interval: int = 0
    eval_pairs: int = 4

    def __post_init__(self):
        if not 0 < self.lr_end <= self.lr_start:
            raise ValueError(f"need 0 < lr_end <= lr_start, got {self.lr_end}, {self.lr_start}")
        if self.crop < 4 or self.crop % 4:
            raise ValueError(f"crop must be a positive multiple of 4, got {self.crop}")
        if self.batch < 1 or self.iters < 0 or self.log_interval < 1 or self.eval_pairs < 1:
            raise ValueError("batch, log_interval and eval_pairs must be >= 1; iters >= 0")
        if self.schedule not in ("cosine", "linear"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.grad_clip is not None and self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0 (0 or None disables clipping)")

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ losses

def _check_dims(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    _check_dims(pred, target)
    return ops.mean(ops.abs_(ops.sub(pred, target)))


def ms_ssim_scales(h: int, w: int, scales: int = 5) -> int:
    """Largest usable scale count: the coarsest level must still fit the 11-tap window."""
    usable = 0
    while usable < scales and min(h, w) >= 11 * 2**usable:
        usable += 1
    if usable == 0:
        raise ShapeError(f"image {h}x{w} is smaller than the 11x11 SSIM window")
    return usable


def _gauss(x: Tensor, taps: Tensor, taps_t: Tensor) -> Tensor:
    return ops.conv2d(ops.conv2d(x, taps, groups=x.shape[1]), taps_t, groups=x.shape[1])


def ms_ssim_loss(pred: Tensor, target: Tensor, scales: int = 5) -> Tensor:
    """``1 - MS-SSIM``; scales the image cannot support are dropped and weights renormalized."""
    _check_dims(pred, target)
    n, c, h, w = pred.shape
    used = ms_ssim_scales(h, w, scales)
    weights = np.asarray(MS_SSIM_WEIGHTS[:used])
    weights = weights / weights.sum()
    g = gaussian_window().astype(pred.data.dtype)
    taps = Tensor(np.broadcast_to(g.reshape(1, 1, 1, -1), (c, 1, 1, len(g))).copy())
    taps_t = Tensor(np.broadcast_to(g.reshape(1, 1, -1, 1), (c, 1, len(g), 1)).copy())
    x, y = pred, target
    score = None
    for s in range(used):
        # (co)variances are shift invariant; centring first avoids cancellation in E[x^2] - mu^2
        xc = ops.sub(x, Tensor(x.data.mean(axis=(2, 3), keepdims=True)))
        yc = ops.sub(y, Tensor(y.data.mean(axis=(2, 3), keepdims=True)))
        mx, my = _gauss(xc, taps, taps_t), _gauss(yc, taps, taps_t)
        var_x = ops.sub(_gauss(ops.mul(xc, xc), taps, taps_t), ops.mul(mx, mx))
        var_y = ops.sub(_gauss(ops.mul(yc, yc), taps, taps_t), ops.mul(my, my))
        cov = ops.sub(_gauss(ops.mul(xc, yc), taps, taps_t), ops.mul(mx, my))
        cs = ops.div(ops.add_scalar(ops.scale(cov, 2.0), _C2), ops.add_scalar(ops.add(var_x, var_y), _C2))
        if s == used - 1:
            mu_x, mu_y = _gauss(x, taps, taps_t), _gauss(y, taps, taps_t)
            lum = ops.div(ops.add_scalar(ops.scale(ops.mul(mu_x, mu_y), 2.0), _C1),
                          ops.add_scalar(ops.add(ops.mul(mu_x, mu_x), ops.mul(mu_y, mu_y)), _C1))
            cs = ops.mul(lum, cs)
        term = ops.pow_scalar(ops.clamp_min(ops.mean_axes(cs, (2, 3)), 1e-6), float(weights[s]))
        score = term if score is None else ops.mul(score, term)
        if s < used - 1:
            x, y = ops.avg_pool2(x), ops.avg_pool2(y)
    return ops.sub(Tensor(np.ones((), dtype=pred.data.dtype)), ops.mean(score))


def total_loss(out: ForwardOutputs, target: Tensor, cfg: TrainConfig) -> tuple[Tensor, dict[str, float]]:
    """Weighted L1 + MS-SSIM on the output plus L1 on every deep-supervision image."""
    parts = {"l1": l1_loss(out.i_out, target)}
    loss = ops.scale(parts["l1"], cfg.w_l1)
    if cfg.w_msssim:
        parts["msssim"] = ms_ssim_loss(out.i_out, target)
        loss = ops.add(loss, ops.scale(parts["msssim"], cfg.w_msssim))
    if cfg.w_deep:
        deep = [l1_loss(k, target) for k in out.deep_images()]
        parts["deep"] = deep[0]
        for d in deep[1:]:
            parts["deep"] = ops.add(parts["deep"], d)
        loss = ops.add(loss, ops.scale(parts["deep"], cfg.w_deep))
    return loss, {k: float(v.data) for k, v in parts.items()}


# ------------------------------------------------------------------ optimizer

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Parameter]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Parameter], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update in place; missing grads count as zero."""
    if len(params) != len(state.m):
        raise ValueError(f"optimizer state tracks {len(state.m)} params, got {len(params)}")
    for p, g in zip(params, grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {p.name or '<unnamed>'}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1**state.t, 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"{p.name}: gradient {g.shape} vs parameter {p.data.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        update = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + cfg.eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)


def clip_grad_norm(grads: list[np.ndarray | None], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads if g is not None))
    if norm > max_norm:
        k = max_norm / norm
        for i, g in enumerate(grads):
            if g is not None:
                grads[i] = g * g.dtype.type(k)
    return norm


def lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    if total <= 0:
        raise ValueError("lr_at: total steps must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"lr_at: step {step} outside [0, {total}]")
    if step == 0:
        return cfg.lr_start
    if step == total:
        return cfg.lr_end
    frac = step / total
    if cfg.schedule == "linear":
        return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + math.cos(math.pi * frac))


# ------------------------------------------------------------------ augmentation

def transform_image(img: np.ndarray, rot: int, flip: str) -> np.ndarray:
    """Rotate by ``rot * 90`` degrees then flip (``"none"``, ``"h"``, ``"v"``) on the last two axes."""
    out = np.rot90(img, rot, axes=(-2, -1))
    if flip == "h":
        out = out[..., ::-1]
    elif flip == "v":
        out = out[..., ::-1, :]
    elif flip != "none":
        raise ValueError(f"unknown flip {flip!r}")
    return np.ascontiguousarray(out)


def augment_pair(pair: ShadowPair, rng: np.random.Generator) -> ShadowPair:
    rot = int(rng.integers(4))
    flip = ("none", "h", "v")[int(rng.integers(3))]
    return ShadowPair(transform_image(pair.i_sh, rot, flip), transform_image(pair.i_gt, rot, flip),
                      None, pair.id)


def random_crop_pair(pair: ShadowPair, size: int, rng: np.random.Generator) -> ShadowPair:
    h, w = pair.i_sh.shape[-2:]
    if h < size or w < size:
        raise ShapeError(f"pair {pair.id!r} is {h}x{w}, smaller than crop {size}")
    y, x = int(rng.integers(h - size + 1)), int(rng.integers(w - size + 1))
    window = (..., slice(y, y + size), slice(x, x + size))
    return ShadowPair(pair.i_sh[window].copy(), pair.i_gt[window].copy(), None, pair.id)


# ------------------------------------------------------------------ loop

@dataclass
class TrainResult:
    log: list[str] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    final_psnr: float = float("nan")


def predict(model: ReHiTModel, x: np.ndarray) -> np.ndarray:
    """Inference without recording; output clamped to [0, 1]."""
    with no_tape():
        out = model(Tensor(np.asarray(x, dtype=get_dtype())))
    return np.clip(out.i_out.data, 0.0, 1.0)


def dataset_psnr(model: ReHiTModel, pairs: Sequence[ShadowPair]) -> float:
    """Mean PSNR of clamped predictions over full-size pairs."""
    return float(np.mean([psnr(predict(model, p.i_sh), p.i_gt) for p in pairs]))


def _make_batch(pairs, cfg: TrainConfig, rng: np.random.Generator, order: list[int]):
    xs, ys = [], []
    for _ in range(cfg.batch):
        if not order:
            order.extend(rng.permutation(len(pairs)).tolist())
        p = random_crop_pair(pairs[order.pop(0)], cfg.crop, rng)
        if cfg.augment:
            p = augment_pair(p, rng)
        xs.append(p.i_sh)
        ys.append(p.i_gt)
    dt = get_dtype()
    return Tensor(np.concatenate(xs).astype(dt)), Tensor(np.concatenate(ys).astype(dt))


def train_loop(model: ReHiTModel, pairs: Sequence[ShadowPair], cfg: TrainConfig,
               out_dir=None, log_fn: Callable[[str], None] | None = None) -> TrainResult:
    """Crop, augment, forward, loss, backward, clip, Adam; log and checkpoint on intervals.

    Log lines read ``step=<n> lr=<v> loss=<v> psnr=<v>`` where ``psnr`` is
    the mean over the first ``cfg.eval_pairs`` training pairs at full size,
    measured after the update.  When
    ``out_dir`` is given the lines are appended to ``train.log`` and
    checkpoints are written as ``ckpt_<step>.reht``.
    """
    if not pairs:
        raise ValueError("train_loop: empty dataset")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = AdamState.zeros_like(params)
    result = TrainResult()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def emit(line: str) -> None:
        result.log.append(line)
        if out is not None:
            with open(out / "train.log", "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        if log_fn is not None:
            log_fn(line)

    def checkpoint(step: int) -> None:
        if out is not None:
            path = out / f"ckpt_{step}.reht"
            save_checkpoint(model, path, model.config)
            result.checkpoints.append(path)

    order: list[int] = []
    for step in range(1, cfg.iters + 1):
        x, y = _make_batch(pairs, cfg, rng, order)
        lr = lr_at(step - 1, cfg.iters, cfg)
        model.zero_grad()
        with Tape() as tape:
            outputs = model(x)
            loss, _ = total_loss(outputs, y, cfg)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at step {step}", step)
        tape.backward(loss)
        grads = [p.grad for p in params]
        if cfg.grad_clip:
            clip_grad_norm(grads, cfg.grad_clip)
        try:
            adam_step(params, grads, state, lr, cfg)
        except NumericError as exc:
            raise NumericError(f"{exc} at step {step}", step) from exc
        result.losses.append(value)
        if step % cfg.log_interval == 0 or step == cfg.iters:
            result.final_psnr = dataset_psnr(model, pairs[:cfg.eval_pairs])
            emit(f"step={step} lr={lr:.6e} loss={value:.6f} psnr={result.final_psnr:.4f}")
        if cfg.ckpt_interval and step % cfg.ckpt_interval == 0 and step != cfg.iters:
            checkpoint(step)
    checkpoint(cfg.iters)
    return result

