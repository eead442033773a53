# Copyright 2024 The tsnet Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#      http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Parameterized layers: feature extraction towers and metric networks.

The tower follows MatchNet: five convolutions with 2×2 max-pooling after the first,
second and fifth, then a linear bottleneck producing a 128-dimensional descriptor.
Convolutions use Xavier initialization; fully connected layers use a truncated
normal (mean 0, stddev 0.005, cut at two standard deviations). All biases start at 0.1.
"""

import dataclasses
import math
from typing import Dict, Iterable, Mapping, Sequence, Tuple, Union

import numpy as np
import scipy.stats

from tsnet import tensor
from tsnet.tensor import Tensor

PATCH_SIZE = 64
BOTTLENECK_DIM = 128
METRIC_HIDDEN = 512
FC_STDDEV = 0.005
BIAS_INIT = 0.1

# (out_channels, kernel, padding, max-pool afterwards)
TOWER_LAYOUT: Tuple[Tuple[int, int, int, bool], ...] = (
    (24, 7, 3, True),
    (64, 5, 2, True),
    (96, 3, 1, False),
    (96, 3, 1, False),
    (64, 3, 1, True),
)

NamedParameters = Dict[str, Tensor]


def init_xavier(shape: Sequence[int], rng: np.random.Generator) -> Tensor:
    """Glorot-uniform initialization, fans including the kernel area for convolutions."""
    shape = tuple(shape)
    if len(shape) < 2:
        raise tensor.DimensionError(f"Xavier initialization needs >= 2 extents, got {shape}")
    receptive = int(np.prod(shape[2:]))
    fan_in = shape[1] * receptive
    fan_out = shape[0] * receptive
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_truncated_normal(
    shape: Sequence[int], rng: np.random.Generator, stddev: float = FC_STDDEV
) -> Tensor:
    """Normal(0, stddev) with samples beyond two standard deviations redrawn."""
    values = scipy.stats.truncnorm.rvs(
        -2.0, 2.0, loc=0.0, scale=stddev, size=tuple(shape), random_state=rng
    )
    return Tensor(values, requires_grad=True)


def init_bias(size: int) -> Tensor:
    return Tensor(np.full(size, BIAS_INIT), requires_grad=True)


def prefixed(prefix: str, params: Mapping[str, Tensor]) -> NamedParameters:
    return {f"{prefix}.{name}": param for name, param in params.items()}


def scale_channels(channels: int, multiplier: float) -> int:
    """Rounds half up; at least one channel."""
    return max(1, int(math.floor(channels * multiplier + 0.5)))


@dataclasses.dataclass
class ConvLayer:
    """A convolution followed (in the tower) by a ReLU."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    @classmethod
    def create(
        cls,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        *,
        stride: int = 1,
        padding: int = 0,
    ) -> "ConvLayer":
        weight = init_xavier((out_channels, in_channels, kernel, kernel), rng)
        return cls(weight=weight, bias=init_bias(out_channels), stride=stride, padding=padding)

    def __call__(self, x: Tensor) -> Tensor:
        return tensor.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def named_parameters(self) -> NamedParameters:
        return {"weight": self.weight, "bias": self.bias}


@dataclasses.dataclass
class FCLayer:
    """Fully connected layer computing `x @ weight.T + bias`, weight of shape out×in."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "FCLayer":
        return cls(weight=init_truncated_normal((out_dim, in_dim), rng), bias=init_bias(out_dim))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise tensor.DimensionError(
                f"FC layer expects inputs of length {self.in_dim}, got shape {x.shape}"
            )
        if x.ndim == 1:
            out = tensor.matmul(tensor.reshape(x, (1, -1)), self.weight.T) + self.bias
            return tensor.reshape(out, (self.out_dim,))
        return tensor.matmul(x, self.weight.T) + self.bias

    def named_parameters(self) -> NamedParameters:
        return {"weight": self.weight, "bias": self.bias}


@dataclasses.dataclass
class FeatureTower:
    """Maps 1×64×64 patches to descriptors of length 128·bottleneck_multiplier."""

    convs: Sequence[ConvLayer]
    pool_after: Sequence[bool]
    bottleneck: FCLayer
    width_multiplier: float = 1.0
    bottleneck_multiplier: float = 1.0

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        width_multiplier: float = 1.0,
        bottleneck_multiplier: float = 1.0,
    ) -> "FeatureTower":
        convs = []
        in_channels = 1
        extent = PATCH_SIZE
        for out_channels, kernel, padding, pool in TOWER_LAYOUT:
            out_channels = scale_channels(out_channels, width_multiplier)
            convs.append(ConvLayer.create(in_channels, out_channels, kernel, rng, padding=padding))
            in_channels = out_channels
            extent //= 2 if pool else 1
        out_dim = scale_channels(BOTTLENECK_DIM, bottleneck_multiplier)
        bottleneck = FCLayer.create(in_channels * extent * extent, out_dim, rng)
        return cls(
            convs=convs,
            pool_after=[pool for *_, pool in TOWER_LAYOUT],
            bottleneck=bottleneck,
            width_multiplier=width_multiplier,
            bottleneck_multiplier=bottleneck_multiplier,
        )

    @property
    def out_dim(self) -> int:
        return self.bottleneck.out_dim

    def __call__(self, patch: Tensor) -> Tensor:
        return tower_forward(self, patch)

    def named_parameters(self) -> NamedParameters:
        params = {}
        for i, conv in enumerate(self.convs):
            params.update(prefixed(f"conv{i + 1}", conv.named_parameters()))
        params.update(prefixed("bottleneck", self.bottleneck.named_parameters()))
        return params


def tower_forward(tower: FeatureTower, patch: Tensor) -> Tensor:
    """Extracts descriptors from a patch (1×64×64) or a batch of patches (N×1×64×64).

    The bottleneck output is linear: descriptors may be negative.
    """
    single = patch.shape == (1, PATCH_SIZE, PATCH_SIZE)
    if not single and patch.shape[1:] != (1, PATCH_SIZE, PATCH_SIZE):
        raise tensor.DimensionError(
            f"tower expects 1×{PATCH_SIZE}×{PATCH_SIZE} patches, got shape {patch.shape}"
        )
    x = tensor.reshape(patch, (1,) + patch.shape) if single else patch
    for conv, pool in zip(tower.convs, tower.pool_after):
        x = tensor.relu(conv(x))
        if pool:
            x = tensor.maxpool2(x)
    features = tower.bottleneck(tensor.flatten(x))
    return tensor.reshape(features, (tower.out_dim,)) if single else features


@dataclasses.dataclass
class MetricNetwork:
    """Fully connected layers FC1 → FC2 → FC3 with ReLU in between, ending in 2 logits.

    `layers` maps a position (0 = FC1, 1 = FC2, 2 = FC3) to its layer. Partial networks,
    holding only some positions, implement the per-stream prefixes and shared tails of
    the mid-metric fusion variants.
    """

    layers: Dict[int, FCLayer]

    @classmethod
    def create(
        cls,
        in_dim: int,
        rng: np.random.Generator,
        hidden: int = METRIC_HIDDEN,
        positions: Iterable[int] = (0, 1, 2),
    ) -> "MetricNetwork":
        dims = (in_dim, hidden, hidden, 2)
        return cls(layers={i: FCLayer.create(dims[i], dims[i + 1], rng) for i in positions})

    def __call__(self, x: Tensor, start: int = 0, stop: int = 3) -> Tensor:
        for i in range(start, stop):
            x = self.layers[i](x)
            if i < 2:
                x = tensor.relu(x)
        return x

    def named_parameters(self) -> NamedParameters:
        params = {}
        for i, layer in sorted(self.layers.items()):
            params.update(prefixed(f"fc{i + 1}", layer.named_parameters()))
        return params


def metric_forward(metric: MetricNetwork, v: Tensor) -> Tensor:
    """Raw 2-logit output of a full metric network; softmax is applied by losses/scoring."""
    return metric(v)


LayerSet = Union[Tensor, ConvLayer, FCLayer, FeatureTower, MetricNetwork, Iterable]


def count_parameters(layers: LayerSet) -> int:
    """Counts scalar parameters (weights and biases) of anything exposing `named_parameters`.

    Tensors shared between several entries of an iterable are counted once.
    """
    seen = {}

    def visit(obj):
        if isinstance(obj, Tensor):
            seen[id(obj)] = obj.data.size
        elif hasattr(obj, "named_parameters"):
            for param in obj.named_parameters().values():
                visit(param)
        else:
            for item in obj:
                visit(item)

    visit(layers)
    return int(np.sum(list(seen.values()), dtype=np.int64))
