"""Image I/O, synthetic shadow pairs and dataset manifests.

Images travel as float64 arrays of shape ``(1, 3, h, w)`` with values in
``[0, 1]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .retinex import GroundTruthDecomposition, apply_perturbation_model

IMAGE_SUFFIXES = (".png", ".ppm")


class ImageFormatError(ValueError):
    pass


class DataMismatchError(ValueError):
    def __init__(self, message: str, ids: list[str]):
        super().__init__(f"{message}: {', '.join(ids)}")
        self.ids = ids


def load_image(path) -> np.ndarray:
    """Read an 8-bit RGB PNG or binary PPM; byte ``v`` maps to ``v / 255``."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "RGB":
                raise ImageFormatError(f"{path}: unsupported mode {im.mode!r}, expected 8-bit RGB")
            if im.format not in ("PNG", "PPM"):
                raise ImageFormatError(f"{path}: unsupported format {im.format!r}")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"{path}: cannot decode image ({exc})") from exc
    return (arr.astype(np.float64) / 255.0).transpose(2, 0, 1)[None]


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and quantize round-half-up to uint8 ``(h, w, 3)``."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 4:
        if img.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch of {img.shape[0]}")
        img = img[0]
    if img.shape[0] != 3:
        raise ValueError(f"expected 3 channels, got shape {img.shape}")
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5)
    return q.astype(np.uint8).transpose(1, 2, 0)


def save_image(img: np.ndarray, path) -> None:
    path = Path(path)
    fmt = {".png": "PNG", ".ppm": "PPM"}.get(path.suffix.lower())
    if fmt is None:
        raise ImageFormatError(f"{path}: unsupported output suffix")
    Image.fromarray(to_bytes(img), mode="RGB").save(path, format=fmt)


# ------------------------------------------------------------------ synthesis

@dataclass(frozen=True)
class ShadowConfig:
    count: int = 2
    softness: float = 2.0
    attenuation: float = 0.5
    reflectance_amp: float = 0.03

    def __post_init__(self):
        if not 0.0 <= self.attenuation < 1.0:
            raise ValueError(f"attenuation must lie in [0, 1), got {self.attenuation}")
        if self.count < 0 or self.softness < 0:
            raise ValueError("shadow count and softness must be non-negative")
        if not 0.0 <= self.reflectance_amp <= 0.05:
            raise ValueError(f"reflectance_amp must lie in [0, 0.05], got {self.reflectance_amp}")


@dataclass
class ShadowPair:
    i_sh: np.ndarray
    i_gt: np.ndarray
    gt_decomp: GroundTruthDecomposition | None = None
    id: str = ""

    def __post_init__(self):
        if self.i_sh.shape != self.i_gt.shape:
            raise ValueError(f"pair {self.id!r}: input {self.i_sh.shape} vs target {self.i_gt.shape}")


def _smooth_field(size: int, rng: np.random.Generator, waves: int = 3) -> np.ndarray:
    """Sum of a few low-frequency cosines, rescaled to [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    f = np.zeros((size, size))
    for _ in range(waves):
        fy, fx = rng.uniform(-1.5, 1.5, size=2)
        f += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    lo, hi = f.min(), f.max()
    return (f - lo) / (hi - lo) if hi > lo else np.zeros_like(f)


def _polygon_mask(size: int, rng: np.random.Generator, vertices: int) -> np.ndarray:
    cy, cx = rng.uniform(0.2, 0.8, size=2) * size
    radius = rng.uniform(0.15, 0.35) * size
    angles = np.sort(rng.uniform(0, 2 * np.pi, vertices))
    radii = radius * rng.uniform(0.6, 1.0, vertices)
    pts = [(float(cx + r * math.cos(a)), float(cy + r * math.sin(a))) for a, r in zip(angles, radii)]
    canvas = Image.new("L", (size, size), 0)
    ImageDraw.Draw(canvas).polygon(pts, fill=255)
    return np.asarray(canvas, dtype=np.float64) / 255.0


def synth_clean_image(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(r_gt, l_gt)``: reflectance in [0.05, 1], illumination in [0.3, 1]."""
    if size < 16:
        raise ValueError(f"synthetic images need size >= 16, got {size}")
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    theta = rng.uniform(0, 2 * np.pi)
    t = (np.cos(theta) * xx + np.sin(theta) * yy)
    t = (t - t.min()) / (t.max() - t.min())
    c0, c1 = rng.uniform(0.2, 1.0, 3), rng.uniform(0.2, 1.0, 3)
    r = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    for _ in range(rng.integers(2, 5)):
        mask = _polygon_mask(size, rng, int(rng.integers(3, 7)))
        color = rng.uniform(0.05, 1.0, 3)[:, None, None]
        shade = 0.85 + 0.15 * _smooth_field(size, rng, 1)
        r = r * (1 - mask) + np.clip(color * shade, 0.05, 1.0) * mask
    r = np.clip(r, 0.05, 1.0)
    base = 0.3 + 0.7 * _smooth_field(size, rng)
    tint = rng.uniform(0.9, 1.0, 3)[:, None, None]
    l = np.clip(base * tint, 0.3, 1.0)
    return r[None], l[None]


def synth_shadow_pair(size: int, rng: np.random.Generator, cfg: ShadowConfig = ShadowConfig(),
                      pair_id: str = "") -> ShadowPair:
    r_gt, l_gt = synth_clean_image(size, rng)
    mask = np.zeros((size, size))
    for _ in range(cfg.count):
        m = _polygon_mask(size, rng, int(rng.integers(3, 8)))
        if cfg.softness > 0:
            m = gaussian_filter(m, cfg.softness, mode="nearest")
        mask = np.maximum(mask, m)
    l_hat = -cfg.attenuation * mask[None, None] * l_gt
    r_hat = cfg.reflectance_amp * (2 * _smooth_field(size, rng) - 1)[None, None] * np.ones_like(r_gt)
    decomp = GroundTruthDecomposition(r_gt, l_gt, r_hat, l_hat)
    i_gt = np.clip(r_gt * l_gt, 0.0, 1.0)
    return ShadowPair(apply_perturbation_model(decomp), i_gt, decomp, pair_id)


def synth_dataset(n: int, size: int, seed: int, cfg: ShadowConfig = ShadowConfig()) -> list[ShadowPair]:
    if n < 1:
        raise ValueError(f"need at least one pair, got n={n}")
    rng = np.random.default_rng(seed)
    return [synth_shadow_pair(size, rng, cfg, f"{i:04d}") for i in range(n)]


# ------------------------------------------------------------------ manifests

@dataclass
class DatasetManifest:
    """Tab-separated ``input<TAB>target<TAB>id`` lines; paths relative to ``root``."""

    root: Path
    entries: list[tuple[str, str, str]] = field(default_factory=list)
    split: str = "train"

    def validate(self) -> None:
        ids = [e[2] for e in self.entries]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise DataMismatchError("duplicate ids in manifest", dupes)
        missing = [e[2] for e in self.entries
                   if not (self.root / e[0]).is_file() or not (self.root / e[1]).is_file()]
        if missing:
            raise DataMismatchError("manifest references missing files", missing)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            csv.writer(fh, delimiter="\t", lineterminator="\n").writerows(self.entries)

    @classmethod
    def read(cls, path, split: str = "train") -> "DatasetManifest":
        path = Path(path)
        with open(path, encoding="utf-8", newline="") as fh:
            rows = [tuple(r) for r in csv.reader(fh, delimiter="\t") if r]
        bad = [str(i + 1) for i, r in enumerate(rows) if len(r) != 3]
        if bad:
            raise DataMismatchError(f"{path}: malformed manifest lines", bad)
        m = cls(path.parent, rows, split)
        m.validate()
        return m

    def load_pairs(self) -> list[ShadowPair]:
        return [ShadowPair(load_image(self.root / a), load_image(self.root / b), None, i)
                for a, b, i in self.entries]


def write_synthetic(pairs: list[ShadowPair], out_dir) -> DatasetManifest:
    """Write PNG pairs, per-id decomposition sidecars and ``manifest.tsv``.

    Sidecars are plain ``.npy`` files (one per component) so reruns are
    byte-identical.
    """
    out = Path(out_dir)
    for sub in ("input", "target", "decomp"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for p in pairs:
        save_image(p.i_sh, out / "input" / f"{p.id}.png")
        save_image(p.i_gt, out / "target" / f"{p.id}.png")
        if p.gt_decomp is not None:
            for name in ("r_gt", "l_gt", "r_hat", "l_hat"):
                np.save(out / "decomp" / f"{p.id}_{name}.npy", getattr(p.gt_decomp, name))
        entries.append((f"input/{p.id}.png", f"target/{p.id}.png", p.id))
    manifest = DatasetManifest(out, entries)
    manifest.write(out / "manifest.tsv")
    return manifest


def load_decomposition(out_dir, pair_id: str) -> GroundTruthDecomposition:
    d = Path(out_dir) / "decomp"
    return GroundTruthDecomposition(*(np.load(d / f"{pair_id}_{n}.npy")
                                      for n in ("r_gt", "l_gt", "r_hat", "l_hat")))


def list_images(directory) -> dict[str, Path]:
    """Map file stem to path for every PNG/PPM file in ``directory``."""
    return {p.stem: p for p in sorted(Path(directory).iterdir())
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES}
