"""Uncertainty mining network: three stacked blocks with non-local
self-attention that turn N pseudo-labels plus the encoder's feature pyramid
into one log-variance map per source.

Stage 0 downsamples each label to quarter resolution through two
conv+relu+pool steps and a residual block. Every stage maps its pyramid
level to the shared working width with a 1x1 adapter, concatenates it with
the per-source features, runs one non-local attention pass over the
concatenation, reduces back to per-source widths with a zero-initialized
1x1 fuse convolution, and adds the result residually per source. Stages 1-2 feed residual-block-processed copies of the incoming
maps into the concatenation while keeping the residual add on the raw inputs,
so a zero-weight attention/fuse branch leaves them untouched. A per-source
decoder upsamples back to full resolution; its final convolution starts at
zero, making the initial uncertainty maps identically zero (unit variance).
"""

from dataclasses import dataclass

import numpy as np

from .attention_net import FeaturePyramid
from .autodiff import (
    Conv2dLayer,
    Tensor,
    add,
    concat_channels,
    channel_slice,
    nonlocal_attention,
    relu,
    resample,
)
from .errors import ConfigError, ShapeError

PIXEL_BUDGET = 4096


@dataclass(frozen=True)
class UmbConfig:
    sources: int = 2
    width: int = 8            # per-source working channels
    label_channels: int = 1   # 2 when labels arrive with a mask channel
    pyramid_channels: tuple = (8, 16, 64)
    pixel_budget: int = PIXEL_BUDGET

    def __post_init__(self):
        if self.sources < 1:
            raise ConfigError("need at least one source")
        if self.width < 2 or self.width % 2:
            raise ConfigError("width must be an even integer >= 2")
        if self.label_channels not in (1, 2):
            raise ConfigError("label_channels must be 1 or 2")
        if len(self.pyramid_channels) != 3:
            raise ConfigError("pyramid_channels must have 3 entries")
        for c in self.pyramid_channels:
            if c < 1:
                raise ConfigError("pyramid channel counts must be positive")


class ResidualBlock:
    """x + conv2(relu(conv1(x))), both convs 3x3 width-preserving."""

    def __init__(self, channels, rng):
        self.c1 = Conv2dLayer(channels, channels, 3, rng)
        self.c2 = Conv2dLayer(channels, channels, 3, rng)

    def __call__(self, x):
        return add(x, self.c2(relu(self.c1(x))))

    def named_parameters(self, prefix):
        yield from self.c1.named_parameters(f"{prefix}.c1")
        yield from self.c2.named_parameters(f"{prefix}.c2")


class NonLocalBlock:
    """Dense pairwise attention with residual output, zero-init out conv."""

    def __init__(self, channels, rng, pixel_budget=PIXEL_BUDGET):
        if channels % 2:
            raise ConfigError(f"non-local channels must be even, got {channels}")
        half = channels // 2
        self.theta = Conv2dLayer(channels, half, 1, rng, padding="valid")
        self.phi = Conv2dLayer(channels, half, 1, rng, padding="valid")
        self.g = Conv2dLayer(channels, half, 1, rng, padding="valid")
        self.out = Conv2dLayer(half, channels, 1, rng, padding="valid", zero_init=True)
        self.pixel_budget = pixel_budget

    def __call__(self, x):
        return nonlocal_attention(
            x,
            self.theta.weight, self.theta.bias,
            self.phi.weight, self.phi.bias,
            self.g.weight, self.g.bias,
            self.out.weight, self.out.bias,
            pixel_budget=self.pixel_budget,
        )

    def named_parameters(self, prefix):
        for name, layer in (("theta", self.theta), ("phi", self.phi),
                            ("g", self.g), ("out", self.out)):
            yield from layer.named_parameters(f"{prefix}.{name}")


class _Stage:
    """Shared stage plumbing: adapt features to the working width, concat,
    non-local, zero-init fuse, split per source."""

    def __init__(self, cfg: UmbConfig, feature_channels, rng):
        n, w = cfg.sources, cfg.width
        cat_ch = (n + 1) * w
        self.n, self.w = n, w
        self.adapt = Conv2dLayer(feature_channels, w, 1, rng, padding="valid")
        self.attention = NonLocalBlock(cat_ch, rng, cfg.pixel_budget)
        self.fuse = Conv2dLayer(cat_ch, n * w, 1, rng, padding="valid", zero_init=True)

    def mix(self, contexts, features, residuals):
        """contexts feed the attention; residuals receive the fused slices."""
        cat = concat_channels([*contexts, self.adapt(features)])
        fused = self.fuse(self.attention(cat))
        return [
            add(residuals[i], channel_slice(fused, i * self.w, (i + 1) * self.w))
            for i in range(self.n)
        ]

    def named_parameters(self, prefix):
        yield from self.adapt.named_parameters(f"{prefix}.adapt")
        yield from self.attention.named_parameters(f"{prefix}.attn")
        yield from self.fuse.named_parameters(f"{prefix}.fuse")


class Stage0:
    """Label intake: two conv+pool steps, residual block, then attention mix."""

    def __init__(self, cfg: UmbConfig, rng):
        w = cfg.width
        self.intake = []
        for _ in range(cfg.sources):
            self.intake.append((
                Conv2dLayer(cfg.label_channels, w, 3, rng),
                Conv2dLayer(w, w, 3, rng),
                ResidualBlock(w, rng),
            ))
        self.stage = _Stage(cfg, cfg.pyramid_channels[0], rng)

    def __call__(self, labels, f0):
        processed = []
        for (ca, cb, rb), label in zip(self.intake, labels):
            h = resample(relu(ca(label)), "down2")
            h = resample(relu(cb(h)), "down2")
            processed.append(rb(h))
        return self.stage.mix(processed, f0, processed)

    def named_parameters(self, prefix):
        for i, (ca, cb, rb) in enumerate(self.intake):
            yield from ca.named_parameters(f"{prefix}.src{i}.in1")
            yield from cb.named_parameters(f"{prefix}.src{i}.in2")
            yield from rb.named_parameters(f"{prefix}.src{i}.rb")
        yield from self.stage.named_parameters(prefix)


class StageT:
    """Refinement: residual blocks feed the context, raw inputs take the add."""

    def __init__(self, cfg: UmbConfig, feature_channels, rng):
        self.blocks = [ResidualBlock(cfg.width, rng) for _ in range(cfg.sources)]
        self.stage = _Stage(cfg, feature_channels, rng)

    def __call__(self, prev, ft):
        contexts = [rb(p) for rb, p in zip(self.blocks, prev)]
        return self.stage.mix(contexts, ft, prev)

    def named_parameters(self, prefix):
        for i, rb in enumerate(self.blocks):
            yield from rb.named_parameters(f"{prefix}.src{i}.rb")
        yield from self.stage.named_parameters(prefix)


class _Decoder:
    """Quarter resolution back to full: (up2, conv+relu), (up2, conv-to-1)."""

    def __init__(self, width, rng):
        self.c1 = Conv2dLayer(width, width, 3, rng)
        self.c2 = Conv2dLayer(width, 1, 3, rng, zero_init=True)

    def __call__(self, x):
        h = relu(self.c1(resample(x, "up2")))
        return self.c2(resample(h, "up2"))

    def named_parameters(self, prefix):
        yield from self.c1.named_parameters(f"{prefix}.c1")
        yield from self.c2.named_parameters(f"{prefix}.c2")


class UmbModel:
    """Three uncertainty stages plus per-source decoders."""

    def __init__(self, cfg: UmbConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.stage0 = Stage0(cfg, rng)
        self.stage1 = StageT(cfg, cfg.pyramid_channels[1], rng)
        self.stage2 = StageT(cfg, cfg.pyramid_channels[2], rng)
        self.decoders = [_Decoder(cfg.width, rng) for _ in range(cfg.sources)]

    def named_parameters(self, prefix: str = "umb"):
        yield from self.stage0.named_parameters(f"{prefix}.stage0")
        yield from self.stage1.named_parameters(f"{prefix}.stage1")
        yield from self.stage2.named_parameters(f"{prefix}.stage2")
        for i, dec in enumerate(self.decoders):
            yield from dec.named_parameters(f"{prefix}.dec{i}")

    def forward(self, labels, pyramid: FeaturePyramid):
        """N label tensors [B,label_channels,H,W] -> N log-variance maps
        [B,1,H,W]."""
        if len(labels) != self.cfg.sources:
            raise ShapeError(
                f"got {len(labels)} labels, model expects {self.cfg.sources}"
            )
        for t in labels:
            if t.data.ndim != 4 or t.data.shape[1] != self.cfg.label_channels:
                raise ShapeError(
                    f"labels must be [B,{self.cfg.label_channels},H,W], "
                    f"got {t.data.shape}"
                )
        u = self.stage0(labels, pyramid.f0)
        u = self.stage1(u, pyramid.f1)
        u = self.stage2(u, pyramid.f2)
        return [dec(x) for dec, x in zip(self.decoders, u)]
