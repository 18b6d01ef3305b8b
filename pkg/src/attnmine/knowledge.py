"""Knowledge embedding: boost pseudo-label mass inside instance masks of
traffic-critical object classes.

The "single" strategy multiplies a label pointwise by ``M + alpha`` (merged
binary mask M, small constant alpha) and renormalizes, so masked pixels gain
relative weight ``(1 + alpha) / alpha`` over unmasked ones. The "concat"
strategy instead stacks the mask as a second channel and leaves the trade-off
to the downstream network.
"""

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .maps import (
    DEFAULT_KEEP_CLASSES,
    AttentionMap,
    KnowledgeMask,
    PseudoLabelSet,
    normalize_spatial,
)

STRATEGIES = ("single", "concat")


@dataclass(frozen=True)
class KebConfig:
    strategy: str = "single"
    alpha: float = 0.3
    renormalize: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not np.isfinite(self.alpha) or self.alpha <= 0:
            raise ConfigError(f"alpha must be finite and > 0, got {self.alpha!r}")


def merge_instance_masks(instances: Iterable[KnowledgeMask],
                         keep_classes=DEFAULT_KEEP_CLASSES) -> KnowledgeMask:
    """Pixelwise union of the instances whose class tags intersect
    ``keep_classes``; empty input yields an all-zero 1x1 mask."""
    keep = frozenset(keep_classes)
    kept = [m for m in instances if keep.intersection(m.classes)]
    if not kept:
        return KnowledgeMask(np.zeros((1, 1)))
    dims = {(m.height, m.width) for m in kept}
    if len(dims) != 1:
        raise ShapeError(f"instance masks disagree on dimensions: {dims}")
    merged = np.maximum.reduce([m.values for m in kept])
    classes = tuple(dict.fromkeys(c for m in kept for c in m.classes))
    return KnowledgeMask(merged, classes=classes)


def _check_dims(label: AttentionMap, mask: KnowledgeMask) -> None:
    if (label.height, label.width) != (mask.height, mask.width):
        raise ShapeError(
            f"label {label.height}x{label.width} vs mask {mask.height}x{mask.width}"
        )


def embed_single(label: AttentionMap, mask: KnowledgeMask,
                 cfg: KebConfig = KebConfig()) -> AttentionMap:
    """Pointwise ``Y * (M + alpha)``, optionally renormalized.

    A spatially constant mask scales every pixel equally, so with
    renormalization it is an identity; that case short-circuits to keep the
    identity bitwise. Zero pixels of the label stay zero.
    """
    _check_dims(label, mask)
    if cfg.renormalize and np.all(mask.values == mask.values.flat[0]):
        return normalize_spatial(label)
    raw = label.values * (mask.values + cfg.alpha)
    out = AttentionMap(raw)
    return normalize_spatial(out) if cfg.renormalize else out


def embed_concat(label: AttentionMap, mask: KnowledgeMask) -> Tensor:
    """Stack label and mask as a [1, 2, H, W] tensor for the network input."""
    _check_dims(label, mask)
    return Tensor(np.stack([label.values, mask.values])[None])


def embed_set(labels: PseudoLabelSet, mask: Optional[KnowledgeMask],
              cfg: KebConfig = KebConfig()) -> PseudoLabelSet:
    """Apply the single-mask embedding to every label of a set.

    A missing mask leaves the labels untouched (aside from normalization),
    since ``Y * (0 + alpha)`` renormalizes back to Y.
    """
    normed = [normalize_spatial(m) for m in labels.maps]
    if mask is None:
        embedded = normed
    else:
        embedded = [embed_single(m, mask, cfg) for m in normed]
    return PseudoLabelSet(labels.source_names, embedded, embedded=True)
