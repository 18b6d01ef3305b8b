"""Attention prediction network: five-stage encoder, skip-connected decoder,
and a readout head producing single-channel attention logits.

The encoder halves the spatial size at stages 2-5 (two 3x3 conv+relu per
stage); the decoder mirrors it with nearest-neighbour upsampling and skip
concatenation. Outputs of stages 1, 2, and 4 are resampled to a quarter of
the input size and exposed as a feature pyramid for the uncertainty branch.
The readout's final convolution starts at zero, so an untrained model
predicts the uniform distribution.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Conv2dLayer,
    Tensor,
    concat_channels,
    conv2d,
    relu,
    resample,
    spatial_softmax,
)
from .errors import ConfigError, ShapeError
from .maps import AttentionMap

DEFAULT_MULTIPLIERS = (1, 2, 4, 8, 8)


@dataclass(frozen=True)
class ApbConfig:
    height: int = 64
    width: int = 64
    base_channels: int = 8
    multipliers: tuple = DEFAULT_MULTIPLIERS

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ConfigError(f"input {self.height}x{self.width} below minimum 16x16")
        if self.height % 16 or self.width % 16:
            raise ConfigError(
                f"input {self.height}x{self.width} must be divisible by 16"
            )
        if self.base_channels < 2 or self.base_channels % 2:
            raise ConfigError("base_channels must be an even integer >= 2")
        if len(self.multipliers) != 5 or any(m < 1 for m in self.multipliers):
            raise ConfigError("multipliers must be 5 positive integers")

    @property
    def stage_channels(self) -> tuple:
        return tuple(self.base_channels * m for m in self.multipliers)

    @property
    def pyramid_channels(self) -> tuple:
        """Channel counts of the pyramid features (encoder stages 1, 2, 4)."""
        c = self.stage_channels
        return (c[0], c[1], c[3])


@dataclass
class FeaturePyramid:
    """Encoder features from stages 1, 2, 4, all at (H/4, W/4)."""

    f0: Tensor
    f1: Tensor
    f2: Tensor

    def as_tuple(self) -> tuple:
        return (self.f0, self.f1, self.f2)


class _ConvPair:
    """Two 3x3 convolutions with relu after each."""

    def __init__(self, cin, cout, rng):
        self.c1 = Conv2dLayer(cin, cout, 3, rng)
        self.c2 = Conv2dLayer(cout, cout, 3, rng)

    def __call__(self, x):
        return relu(self.c2(relu(self.c1(x))))

    def named_parameters(self, prefix):
        yield from self.c1.named_parameters(f"{prefix}.c1")
        yield from self.c2.named_parameters(f"{prefix}.c2")


class ApbModel:
    """U-Net-style predictor; construction is deterministic in the rng."""

    def __init__(self, cfg: ApbConfig, rng: np.random.Generator):
        self.cfg = cfg
        chans = cfg.stage_channels
        self.encoder = []
        cin = 3
        for c in chans:
            self.encoder.append(_ConvPair(cin, c, rng))
            cin = c
        # decoder level i consumes up2(deeper) + skip from encoder stage i
        self.decoder = []
        deeper = chans[4]
        for skip in (chans[3], chans[2], chans[1], chans[0]):
            self.decoder.append(_ConvPair(deeper + skip, skip, rng))
            deeper = skip
        self.read1 = Conv2dLayer(chans[0], chans[0], 3, rng)
        self.read2 = Conv2dLayer(chans[0], 1, 1, rng, zero_init=True)

    def named_parameters(self, prefix: str = "apb"):
        for i, stage in enumerate(self.encoder):
            yield from stage.named_parameters(f"{prefix}.enc{i}")
        for i, level in enumerate(self.decoder):
            yield from level.named_parameters(f"{prefix}.dec{i}")
        yield from self.read1.named_parameters(f"{prefix}.read1")
        yield from self.read2.named_parameters(f"{prefix}.read2")

    def readout(self, features: Tensor) -> Tensor:
        return self.read2(relu(self.read1(features)))

    def forward(self, frame: Tensor):
        """Frame [B,3,H,W] -> (FeaturePyramid at H/4 x W/4, logits [B,1,H,W])."""
        if frame.data.ndim != 4 or frame.data.shape[1] != 3:
            raise ShapeError(f"frame must be [B,3,H,W], got {frame.data.shape}")
        if frame.data.shape[2:] != (self.cfg.height, self.cfg.width):
            raise ShapeError(
                f"frame is {frame.data.shape[2:]}, model expects "
                f"{(self.cfg.height, self.cfg.width)}"
            )
        acts = []
        h = frame
        for i, stage in enumerate(self.encoder):
            if i > 0:
                h = resample(h, "down2")
            h = stage(h)
            acts.append(h)
        # stages 1, 2, 4 (1-based) resampled to quarter resolution
        f0 = resample(resample(acts[0], "down2"), "down2")
        f1 = resample(acts[1], "down2")
        f2 = resample(acts[3], "up2")
        pyramid = FeaturePyramid(f0, f1, f2)

        h = acts[4]
        for level, skip in zip(self.decoder, (acts[3], acts[2], acts[1], acts[0])):
            h = level(concat_channels([resample(h, "up2"), skip]))
        return pyramid, self.readout(h)

    def predict(self, frame: Tensor) -> AttentionMap:
        """Single-frame inference: spatial softmax over the logits."""
        _, logits = self.forward(frame)
        probs = spatial_softmax(logits)
        if probs.data.shape[0] != 1:
            raise ShapeError("predict expects a single-sample batch")
        return AttentionMap(probs.data[0, 0], normalized=True)
