"""Synthetic driving-attention data: Gaussian-blob ground truth, corrupted
pseudo-labels, and detector-style instance masks.

Each sample has ground truth G (a normalized mixture of 1-3 isotropic blobs),
a 3-channel frame rendering G plus textured noise, N pseudo-labels that
corrupt G in per-source styles, and a binary mask of disks over a fraction of
the true blob centers. Even-indexed sources blur G and mix in a fixed
center-bias Gaussian; odd-indexed sources jitter the blob positions and apply
multiplicative noise. With all corruption knobs at zero every pseudo-label
equals G bit for bit.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .maps import (
    AttentionMap,
    KnowledgeMask,
    Manifest,
    ManifestEntry,
    PseudoLabelSet,
    SampleRecord,
    normalize_spatial,
    save_map,
    save_raster,
    write_ppm,
)

_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    samples: int = 500
    sources: int = 2
    blob_count_min: int = 1
    blob_count_max: int = 3
    blob_sigma_min: float = 0.06   # fraction of min(height, width)
    blob_sigma_max: float = 0.15
    frame_noise: float = 0.08
    blur_passes: int = 3           # even-source corruption strength
    center_bias_weight: float = 0.3
    jitter: float = 3.0            # odd-source center offset std, pixels
    mult_noise: float = 0.5
    mask_fraction: float = 0.5
    mask_radius: float = 5.0       # pixels

    def validate(self) -> "SynthConfig":
        if self.height < 16 or self.width < 16:
            raise ConfigError(f"size {self.height}x{self.width} below minimum 16x16")
        if self.height % 16 or self.width % 16:
            raise ConfigError(
                f"size {self.height}x{self.width} must be divisible by 16"
            )
        if self.samples < 3:
            raise ConfigError("need at least 3 samples for train/val/test splits")
        if self.sources < 1:
            raise ConfigError("need at least one pseudo-label source")
        if not (1 <= self.blob_count_min <= self.blob_count_max):
            raise ConfigError("blob count range is invalid")
        if not (0 < self.blob_sigma_min <= self.blob_sigma_max):
            raise ConfigError("blob sigma range is invalid")
        if not 0.0 <= self.center_bias_weight <= 1.0:
            raise ConfigError("center_bias_weight must lie in [0, 1]")
        if not 0.0 <= self.mask_fraction <= 1.0:
            raise ConfigError("mask_fraction must lie in [0, 1]")
        for name in ("frame_noise", "jitter", "mult_noise", "mask_radius"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.blur_passes < 0:
            raise ConfigError("blur_passes must be nonnegative")
        return self


def _grid(h: int, w: int):
    return np.meshgrid(np.arange(h, dtype=np.float64),
                       np.arange(w, dtype=np.float64), indexing="ij")


def _render_blobs(h, w, centers, sigmas, weights) -> np.ndarray:
    yy, xx = _grid(h, w)
    field = np.zeros((h, w))
    for (cy, cx), sigma, wgt in zip(centers, sigmas, weights):
        field += wgt * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
    return field


def _center_bias(h: int, w: int) -> np.ndarray:
    yy, xx = _grid(h, w)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    sigma = 0.2 * min(h, w)
    g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def _binomial_blur(x: np.ndarray) -> np.ndarray:
    rows = np.apply_along_axis(np.convolve, 1, x, _BINOMIAL, "same")
    return np.apply_along_axis(np.convolve, 0, rows, _BINOMIAL, "same")


def _smooth_noise(rng, h, w):
    """Low-resolution noise upsampled to [h, w], values roughly in [-1, 1]."""
    coarse = rng.uniform(-1.0, 1.0, (max(1, h // 8), max(1, w // 8)))
    up = np.kron(coarse, np.ones((8, 8)))[:h, :w]
    if up.shape != (h, w):  # tiny planes where h//8 rounds to zero
        up = np.resize(up, (h, w))
    return _binomial_blur(up)


def _sample_blobs(rng, cfg: SynthConfig):
    n = int(rng.integers(cfg.blob_count_min, cfg.blob_count_max + 1))
    lo_y, hi_y = 0.15 * cfg.height, 0.85 * cfg.height
    lo_x, hi_x = 0.15 * cfg.width, 0.85 * cfg.width
    centers = [(rng.uniform(lo_y, hi_y), rng.uniform(lo_x, hi_x)) for _ in range(n)]
    scale = min(cfg.height, cfg.width)
    sigmas = rng.uniform(cfg.blob_sigma_min * scale, cfg.blob_sigma_max * scale, n)
    weights = rng.uniform(0.5, 1.0, n)
    return centers, list(sigmas), list(weights)


def _source_label(rng, cfg, style, raw, centers, sigmas, weights) -> AttentionMap:
    h, w = cfg.height, cfg.width
    if style == 0:
        blurred = raw
        for _ in range(cfg.blur_passes):
            blurred = _binomial_blur(blurred)
        cbw = cfg.center_bias_weight
        norm = blurred.sum()
        base = blurred / norm if norm > 0 else blurred
        label = (1.0 - cbw) * base + cbw * _center_bias(h, w)
    else:
        jittered = [(cy + rng.normal(0.0, cfg.jitter) if cfg.jitter else cy,
                     cx + rng.normal(0.0, cfg.jitter) if cfg.jitter else cx)
                    for cy, cx in centers]
        field = _render_blobs(h, w, jittered, sigmas, weights)
        if cfg.mult_noise:
            field = field * np.clip(1.0 + cfg.mult_noise * _smooth_noise(rng, h, w),
                                    0.05, None)
        label = field
    return normalize_spatial(AttentionMap(np.clip(label, 0.0, None)))


def generate_sample(cfg: SynthConfig, seed: int, index: int) -> SampleRecord:
    """Build one record; deterministic in (seed, index) so generation can be
    parallelized or resumed per sample."""
    rng = np.random.default_rng([seed, index])
    h, w = cfg.height, cfg.width
    centers, sigmas, weights = _sample_blobs(rng, cfg)
    raw = _render_blobs(h, w, centers, sigmas, weights)
    gt = normalize_spatial(AttentionMap(raw))

    peak = raw / raw.max()
    texture = cfg.frame_noise * _smooth_noise(rng, h, w)
    frame = np.clip(np.stack([
        0.9 * peak + texture,
        0.6 * peak + 0.15 + texture,
        0.3 * peak + 0.3 - texture,
    ]), 0.0, 1.0)

    labels = [
        _source_label(rng, cfg, s % 2, raw, centers, sigmas, weights)
        for s in range(cfg.sources)
    ]
    names = tuple(f"s{k + 1}" for k in range(cfg.sources))

    mask = np.zeros((h, w))
    yy, xx = _grid(h, w)
    for cy, cx in centers:
        if rng.random() < cfg.mask_fraction:
            mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= cfg.mask_radius**2] = 1.0

    return SampleRecord(
        frame=frame,
        pseudo_labels=PseudoLabelSet(names, labels),
        mask=KnowledgeMask(mask, classes=("pedestrian",)),
        ground_truth=gt,
    )


def split_counts(samples: int) -> tuple:
    n_val = max(1, samples // 10)
    n_test = max(1, samples // 10)
    return samples - n_val - n_test, n_val, n_test


def split_of(index: int, samples: int) -> str:
    n_train, n_val, _ = split_counts(samples)
    if index < n_train:
        return "train"
    if index < n_train + n_val:
        return "val"
    return "test"


def write_dataset(cfg: SynthConfig, out_dir, seed: int) -> Manifest:
    """Generate and write the full dataset plus its manifest; byte-level
    deterministic for a fixed (config, seed)."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(cfg.samples):
        rec = generate_sample(cfg, seed, i)
        stem = f"sample_{i:05d}"
        write_ppm(rec.frame, out / f"{stem}_frame.ppm")
        label_paths = []
        for name, amap in zip(rec.pseudo_labels.source_names, rec.pseudo_labels.maps):
            p = f"{stem}_label_{name}.atnm"
            save_map(amap, out / p)
            label_paths.append(p)
        mask_path = f"{stem}_mask.atnm"
        save_raster(rec.mask.values, out / mask_path)
        gt_path = f"{stem}_gt.atnm"
        save_map(rec.ground_truth, out / gt_path)
        entries.append(ManifestEntry(
            split=split_of(i, cfg.samples),
            frame=f"{stem}_frame.ppm",
            labels=tuple(label_paths),
            mask=mask_path,
            gt=gt_path,
        ))
    manifest = Manifest(base_dir=out, entries=entries)
    manifest.save(out / "manifest.tsv")
    return manifest
