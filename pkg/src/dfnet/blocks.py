"""Network building blocks: channel attention, multi-scale branch

aggregation (MAG) and attentive integration (AMI).

Parameter containers are plain dataclasses of Tensors. Builders draw from a
numpy Generator in a fixed construction order; that order is part of the
reproducibility contract (same seed, same bits) and of the checkpoint naming
scheme exposed through ``named_parameters``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

NamedParams = Iterator[tuple[str, Tensor]]


# ---------------------------------------------------------------------------
# initialization


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                    fan_in: int, dtype) -> np.ndarray:
    """Fan-in scaled uniform init; drawn in float64, cast once to dtype."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class ConvLayer:
    """One convolution's parameters plus its dilation."""

    weight: Tensor
    bias: Tensor | None = None
    dilation: int = 1

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, dilation=self.dilation)

    def named_parameters(self, prefix: str) -> NamedParams:
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


def conv_layer(rng: np.random.Generator, out_channels: int, in_channels: int,
               kh: int, kw: int, dtype, *, dilation: int = 1,
               with_bias: bool = True) -> ConvLayer:
    weight = Tensor(kaiming_uniform(rng, (out_channels, in_channels, kh, kw),
                                    in_channels * kh * kw, dtype),
                    requires_grad=True)
    bias = None
    if with_bias:
        bias = Tensor(np.zeros((1, out_channels, 1, 1), dtype=dtype),
                      requires_grad=True)
    return ConvLayer(weight, bias, dilation)


# ---------------------------------------------------------------------------
# channel attention


@dataclass
class CABlockParams:
    """Squeeze (dense1+ReLU) and gate (dense2+sigmoid) layer parameters."""

    dense1_weight: Tensor
    dense1_bias: Tensor
    dense2_weight: Tensor
    dense2_bias: Tensor

    @property
    def channels(self) -> int:
        return self.dense2_weight.shape[0]

    def named_parameters(self, prefix: str) -> NamedParams:
        yield f"{prefix}.dense1.weight", self.dense1_weight
        yield f"{prefix}.dense1.bias", self.dense1_bias
        yield f"{prefix}.dense2.weight", self.dense2_weight
        yield f"{prefix}.dense2.bias", self.dense2_bias


def ca_hidden_width(channels: int, ratio: int = 4) -> int:
    """Squeeze width: channels/ratio rounded half-up, never below 1."""
    return max(1, int(channels / ratio + 0.5))


def ca_block_params(rng: np.random.Generator, channels: int, *,
                    ratio: int = 4, dtype=np.float64) -> CABlockParams:
    if channels < 1:
        raise ConfigError(f"channel attention needs channels >= 1, got {channels}")
    hidden = ca_hidden_width(channels, ratio)
    return CABlockParams(
        dense1_weight=Tensor(kaiming_uniform(rng, (hidden, channels, 1, 1),
                                             channels, dtype), requires_grad=True),
        dense1_bias=Tensor(np.zeros((1, hidden, 1, 1), dtype=dtype), requires_grad=True),
        dense2_weight=Tensor(kaiming_uniform(rng, (channels, hidden, 1, 1),
                                             hidden, dtype), requires_grad=True),
        dense2_bias=Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True),
    )


def ca_block_forward(x: Tensor, p: CABlockParams) -> Tensor:
    """Re-weight channels by sigmoid(dense2(relu(dense1(gap(x)))))."""
    if x.shape[1] != p.dense1_weight.shape[1]:
        raise ConfigError(f"channel attention built for {p.dense1_weight.shape[1]} "
                          f"channels, input has {x.shape[1]}")
    s = T.global_avg_pool(x)
    s = T.relu(T.dense(s, p.dense1_weight, p.dense1_bias))
    s = T.sigmoid(T.dense(s, p.dense2_weight, p.dense2_bias))
    return T.scale_channels(x, s)


# ---------------------------------------------------------------------------
# multi-scale aggregation (MAG)


@dataclass(frozen=True)
class BranchSpec:
    """One branch of the multi-scale block.

    ``extent`` is the effective receptive extent the branch must realize;
    ``kernel`` the tap count of each factor; ``factorized`` selects a 1xk
    row conv followed by a kx1 column conv instead of a square kxk kernel.
    The two factors of a pair share the dilation and have nothing between
    them (no bias, no nonlinearity), so the pair collapses exactly to one
    dense kernel.
    """

    extent: int
    kernel: int
    dilation: int = 1
    factorized: bool = False


def effective_kernel_extent(spec: BranchSpec) -> int:
    """Extent covered by a kernel of k taps spaced by the dilation rate."""
    return spec.kernel + (spec.kernel - 1) * (spec.dilation - 1)


def default_branch_table() -> tuple[BranchSpec, ...]:
    """Six branches realizing extents 1,3,5,7,9,11 via both mechanisms."""
    return (
        BranchSpec(extent=1, kernel=1),
        BranchSpec(extent=3, kernel=3),
        BranchSpec(extent=5, kernel=3, dilation=2),
        BranchSpec(extent=7, kernel=7, factorized=True),
        BranchSpec(extent=9, kernel=3, dilation=4),
        BranchSpec(extent=11, kernel=3, dilation=5, factorized=True),
    )


@dataclass
class MAGParams:
    specs: tuple[BranchSpec, ...]
    branches: list[list[ConvLayer]]  # one conv, or row conv then column conv
    ca: CABlockParams | None

    @property
    def out_channels(self) -> int:
        return sum(layers[-1].weight.shape[0] for layers in self.branches)

    def named_parameters(self, prefix: str) -> NamedParams:
        for j, layers in enumerate(self.branches):
            for i, layer in enumerate(layers):
                yield from layer.named_parameters(f"{prefix}.branch{j}.conv{i}")
        if self.ca is not None:
            yield from self.ca.named_parameters(f"{prefix}.ca")


def mag_params(rng: np.random.Generator, in_channels: int, branch_channels: int,
               *, table: Sequence[BranchSpec] | None = None, with_ca: bool = True,
               dtype=np.float64) -> MAGParams:
    specs = tuple(table) if table is not None else default_branch_table()
    extents = sorted(effective_kernel_extent(s) for s in specs)
    if len(specs) != 6 or extents != [1, 3, 5, 7, 9, 11]:
        raise ConfigError(f"branch table must realize extents 1,3,5,7,9,11 "
                          f"exactly once each, got {extents}")
    for spec in specs:
        if spec.extent != effective_kernel_extent(spec):
            raise ConfigError(f"branch declares extent {spec.extent} but "
                              f"k={spec.kernel}, r={spec.dilation} gives "
                              f"{effective_kernel_extent(spec)}")
    branches = []
    for spec in specs:
        k, r = spec.kernel, spec.dilation
        if spec.factorized:
            row = conv_layer(rng, branch_channels, in_channels, 1, k, dtype,
                             dilation=r, with_bias=False)
            col = conv_layer(rng, branch_channels, branch_channels, k, 1, dtype,
                             dilation=r)
            branches.append([row, col])
        else:
            branches.append([conv_layer(rng, branch_channels, in_channels, k, k,
                                        dtype, dilation=r)])
    ca = None
    if with_ca:
        ca = ca_block_params(rng, branch_channels * len(specs), dtype=dtype)
    return MAGParams(specs, branches, ca)


def mag_forward(x: Tensor, p: MAGParams) -> Tensor:
    """Run the six branches in parallel, concatenate, apply CA.

    Each branch ends in a ReLU; within a factorized pair the two convs
    compose linearly. The stage's 1x1 fuse conv lives in the model graph,
    not here.
    """
    outs = []
    for layers in p.branches:
        h = x
        for layer in layers:
            h = layer(h)
        outs.append(T.relu(h))
    out = T.concat_channels(outs)
    if p.ca is not None:
        out = ca_block_forward(out, p.ca)
    return out


# ---------------------------------------------------------------------------
# attentive integration (AMI)


@dataclass
class AMIParams:
    ca: CABlockParams | None
    refine: ConvLayer  # 3x3, out_channels = N

    def named_parameters(self, prefix: str) -> NamedParams:
        if self.ca is not None:
            yield from self.ca.named_parameters(f"{prefix}.ca")
        yield from self.refine.named_parameters(f"{prefix}.refine")


def ami_params(rng: np.random.Generator, low_channels: int, high_channels: int,
               out_channels: int, *, with_ca: bool = True,
               dtype=np.float64) -> AMIParams:
    cat = low_channels + high_channels
    ca = ca_block_params(rng, cat, dtype=dtype) if with_ca else None
    refine = conv_layer(rng, out_channels, cat, 3, 3, dtype)
    return AMIParams(ca, refine)


def ami_forward(low: Tensor, high: Tensor, p: AMIParams) -> Tensor:
    """Fuse a shallow stage with an (already upsampled) deeper stage.

    Without a CA block this degrades to plain concatenation + 3x3 conv,
    which is exactly the "no attention" ablation.
    """
    if low.shape[0] != high.shape[0] or low.shape[2:] != high.shape[2:]:
        raise ConfigError(f"integration inputs must share batch and spatial "
                          f"dims, got {low.shape} and {high.shape} "
                          f"(upsample the deep stage first)")
    x = T.concat_channels([low, high])
    if p.ca is not None:
        x = ca_block_forward(x, p.ca)
    return T.relu(p.refine(x))
