"""Model assembly: a tiny backbone with stage taps, per-stage multi-scale

aggregation + 1x1 fuse (feature extraction), and an attentive top-down
integration chain ending in a sigmoid saliency map (feature integration).

The backbone is deliberately small (plain conv-ReLU-maxpool units); the
parts under study are the MAG/AMI blocks and the loss, so the backbone can
also be bypassed entirely with precomputed stage features
(``BackboneSpec.external``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .blocks import (AMIParams, CABlockParams, ConvLayer, MAGParams,
                     ami_forward, ami_params, conv_layer, mag_forward,
                     mag_params)
from .errors import ConfigError, UsageError
from .tensor import Tensor

log = logging.getLogger(__name__)

VARIANTS = ("full", "without_mag", "without_ami", "without_mag_ami", "without_cas")

BRANCH_COUNT = 6  # branches per MAG module; fixed by the default table
HEAD_BIAS_INIT = -2.0  # initial logit bias; see build_model


@dataclass(frozen=True)
class StageSpec:
    """One backbone tap: spatial size input/2^exponent, given width."""

    downsample_exponent: int
    channels: int


@dataclass(frozen=True)
class BackboneSpec:
    kind: str  # "tiny3" | "tiny4" | "external_features"
    stages: tuple[StageSpec, ...]

    @staticmethod
    def tiny3() -> "BackboneSpec":
        return BackboneSpec("tiny3", (StageSpec(2, 32), StageSpec(3, 64),
                                      StageSpec(4, 128)))

    @staticmethod
    def tiny4() -> "BackboneSpec":
        return BackboneSpec("tiny4", (StageSpec(2, 16), StageSpec(3, 32),
                                      StageSpec(4, 64), StageSpec(5, 128)))

    @staticmethod
    def external(channels: Sequence[int],
                 exponents: Sequence[int] | None = None) -> "BackboneSpec":
        """Stage plan for precomputed features (no backbone parameters)."""
        if exponents is None:
            exponents = range(2, 2 + len(channels))
        stages = tuple(StageSpec(n, c) for n, c in zip(exponents, channels))
        return BackboneSpec("external_features", stages)

    @property
    def max_exponent(self) -> int:
        return max(s.downsample_exponent for s in self.stages)

    def validate(self) -> None:
        if len(self.stages) not in (3, 4):
            raise ConfigError(f"backbone must tap 3 or 4 stages, got {len(self.stages)}")
        exps = [s.downsample_exponent for s in self.stages]
        if exps != list(range(exps[0], exps[0] + len(exps))):
            raise ConfigError(f"stage downsample exponents must be consecutive, got {exps}")
        if self.kind in ("tiny3", "tiny4") and exps[0] != 2:
            raise ConfigError(f"tiny backbones tap from exponent 2, got {exps[0]}")
        if any(s.channels < 1 for s in self.stages):
            raise ConfigError("stage channel counts must be positive")
        if self.kind not in ("tiny3", "tiny4", "external_features"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")


def backbone_by_name(name: str) -> BackboneSpec:
    if name == "tiny3":
        return BackboneSpec.tiny3()
    if name == "tiny4":
        return BackboneSpec.tiny4()
    raise ConfigError(f"unknown backbone {name!r} (choose tiny3 or tiny4)")


@dataclass(frozen=True)
class DFNetConfig:
    backbone: BackboneSpec = field(default_factory=BackboneSpec.tiny3)
    branch_channels: int = 8
    fuse_channels: int = 32    # N: per-stage width after the 1x1 fuse
    ami_channels: int = 32     # width of each integration step's output
    input_size: tuple[int, int] = (64, 64)
    variant: str = "full"
    dtype: str = "float64"
    seed: int = 0

    def validate(self) -> None:
        self.backbone.validate()
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; "
                              f"valid: {', '.join(VARIANTS)}")
        for name in ("branch_channels", "fuse_channels", "ami_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        h, w = self.input_size
        div = 2 ** self.backbone.max_exponent
        if h % div or w % div:
            raise ConfigError(f"input size {h}x{w} must be divisible by {div}")


@dataclass
class DFNetModel:
    config: DFNetConfig
    backbone_layers: list[ConvLayer]
    stage_extractors: list  # MAGParams, or ConvLayer for the no-MAG variant
    stage_fuses: list[ConvLayer]
    ami_steps: list[AMIParams]
    head_conv3: ConvLayer
    head_conv1: ConvLayer

    def named_parameters(self):
        for i, layer in enumerate(self.backbone_layers):
            yield from layer.named_parameters(f"backbone.conv{i}")
        for i, (ex, fuse) in enumerate(zip(self.stage_extractors, self.stage_fuses)):
            if isinstance(ex, MAGParams):
                yield from ex.named_parameters(f"stage{i}.mag")
            else:
                yield from ex.named_parameters(f"stage{i}.conv3")
            yield from fuse.named_parameters(f"stage{i}.fuse")
        for j, step in enumerate(self.ami_steps):
            yield from step.named_parameters(f"ami{j}")
        yield from self.head_conv3.named_parameters("head.conv3")
        yield from self.head_conv1.named_parameters("head.conv1")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    @property
    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.parameters())

    @property
    def dtype(self) -> np.dtype:
        return self.head_conv1.weight.dtype

    def load_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        """Assign named arrays (e.g. from a checkpoint) to the parameters."""
        from .errors import FormatError

        for name, tensor in self.named_parameters():
            if name not in arrays:
                raise FormatError(f"checkpoint is missing parameter {name!r}")
            arr = arrays[name]
            if arr.shape != tensor.shape:
                raise FormatError(f"parameter {name!r}: checkpoint shape "
                                  f"{arr.shape} != model shape {tensor.shape}")
            if arr.dtype != tensor.dtype:
                raise FormatError(f"parameter {name!r}: checkpoint dtype "
                                  f"{arr.dtype} != model dtype {tensor.dtype}")
            tensor.data = arr.copy()


def build_model(config: DFNetConfig, seed: int | None = None) -> DFNetModel:
    """Construct a model with freshly initialized parameters.

    Parameter values are drawn in a fixed construction order from one
    Generator, so (config, seed) determines every bit. ``seed`` overrides
    config.seed when given.
    """
    config.validate()
    if seed is not None:
        config = replace(config, seed=seed)
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.dtype)
    stages = config.backbone.stages
    variant = config.variant

    backbone_layers: list[ConvLayer] = []
    if config.backbone.kind != "external_features":
        widths = [stages[0].channels] + [s.channels for s in stages]
        in_c = 3
        for width in widths:
            backbone_layers.append(conv_layer(rng, width, in_c, 3, 3, dtype))
            in_c = width

    with_mag = variant not in ("without_mag", "without_mag_ami")
    mag_ca = variant != "without_cas"
    ami_ca = variant not in ("without_ami", "without_mag_ami", "without_cas")

    stage_extractors = []
    stage_fuses = []
    pre_fuse = config.branch_channels * BRANCH_COUNT
    for spec in stages:
        if with_mag:
            stage_extractors.append(mag_params(rng, spec.channels,
                                               config.branch_channels,
                                               with_ca=mag_ca, dtype=dtype))
        else:
            stage_extractors.append(conv_layer(rng, pre_fuse, spec.channels,
                                               3, 3, dtype))
        stage_fuses.append(conv_layer(rng, config.fuse_channels, pre_fuse,
                                      1, 1, dtype))

    ami_steps = []
    high_c = config.fuse_channels
    for _ in range(len(stages) - 1):
        ami_steps.append(ami_params(rng, config.fuse_channels, high_c,
                                    config.ami_channels, with_ca=ami_ca,
                                    dtype=dtype))
        high_c = config.ami_channels

    head_conv3 = conv_layer(rng, config.ami_channels, config.ami_channels, 3, 3, dtype)
    head_conv1 = conv_layer(rng, 1, config.ami_channels, 1, 1, dtype)
    # Start the logit bias low so initial saliency sits near 0.1: from a
    # mid-gray start the precision gradient's background pull (weighted by
    # -s against the foreground's 1-s) drags the shared features into the
    # all-zero sigmoid plateau before they can differentiate, while from a
    # low start the recall gradient grows fast and pulls foreground up first.
    head_conv1.bias.data[...] += HEAD_BIAS_INIT

    model = DFNetModel(config, backbone_layers, stage_extractors, stage_fuses,
                       ami_steps, head_conv3, head_conv1)
    log.info("built %s/%s model: %d parameters",
             config.backbone.kind, variant, model.parameter_count)
    return model


# ---------------------------------------------------------------------------
# forward passes


def _backbone_taps(model: DFNetModel, images: Tensor) -> list[Tensor]:
    spec = model.config.backbone
    if spec.kind == "external_features":
        raise UsageError("this model takes precomputed stage features; "
                         "use extraction_from_features")
    b, c, h, w = images.shape
    if c != 3:
        raise UsageError(f"backbone expects 3-channel images, got {c}")
    div = 2 ** spec.max_exponent
    if h % div or w % div:
        raise UsageError(f"input {h}x{w} not divisible by {div}")
    taps = []
    x = images
    for i, layer in enumerate(model.backbone_layers):
        x = T.max_pool2(T.relu(layer(x)))
        if i >= 1:
            taps.append(x)
    return taps


def _extract_stage(model: DFNetModel, i: int, tap: Tensor) -> Tensor:
    ex = model.stage_extractors[i]
    if isinstance(ex, MAGParams):
        h = mag_forward(tap, ex)
    else:
        h = T.relu(ex(tap))
    return model.stage_fuses[i](h)  # linear 1x1 combine


def extraction_forward(model: DFNetModel, images: Tensor) -> list[Tensor]:
    """Images -> one fused feature tensor per stage (shallow to deep)."""
    taps = _backbone_taps(model, images)
    return [_extract_stage(model, i, tap) for i, tap in enumerate(taps)]


def extraction_from_features(model: DFNetModel, features: Sequence[Tensor]) -> list[Tensor]:
    """Run MAG+fuse on externally supplied backbone stage features."""
    stages = model.config.backbone.stages
    if len(features) != len(stages):
        raise ConfigError(f"model expects {len(stages)} stage features, "
                          f"got {len(features)}")
    for i, (f, s) in enumerate(zip(features, stages)):
        if f.shape[1] != s.channels:
            raise ConfigError(f"stage {i} features have {f.shape[1]} channels, "
                              f"model expects {s.channels}")
    return [_extract_stage(model, i, f) for i, f in enumerate(features)]


def integration_forward(model: DFNetModel, stage_features: Sequence[Tensor]) -> Tensor:
    """Fuse stages deepest-first through the AMI chain, then the head.

    Output is a [B,1,H,W] map in (0,1) at the resolution the shallowest
    stage was downsampled from.
    """
    feats = list(stage_features)
    if len(feats) != len(model.ami_steps) + 1:
        raise ConfigError(f"expected {len(model.ami_steps) + 1} stage features, "
                          f"got {len(feats)}")
    for low, high in zip(feats, feats[1:]):
        lh, lw = low.shape[2:]
        if high.shape[2:] != (lh // 2, lw // 2) or lh % 2 or lw % 2:
            raise ConfigError(f"stages must be ordered shallow to deep with "
                              f"factor-2 spatial steps, got {low.shape} then "
                              f"{high.shape}")
    cur = feats[-1]
    for low, step in zip(reversed(feats[:-1]), model.ami_steps):
        cur = ami_forward(low, T.upsample_bilinear(cur, 2), step)
    h = T.relu(model.head_conv3(cur))
    logits = model.head_conv1(h)
    full = T.upsample_bilinear(
        logits, 2 ** model.config.backbone.stages[0].downsample_exponent)
    return T.sigmoid(full)


def forward(model: DFNetModel, images: Tensor) -> Tensor:
    """Images -> saliency maps, end to end."""
    return integration_forward(model, extraction_forward(model, images))
