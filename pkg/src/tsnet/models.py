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

"""Patch matching networks: Siamese, Pseudo-Siamese, TS-Net and their ablations.

Every model maps a pair of patches `(x1, x2)`, one per modality, to `ForwardOutputs`.
Towers of a stream are fused by element-wise subtraction of their descriptors before
the metric network. TS-Net runs a Siamese stream (one tower, shared) and a
Pseudo-Siamese stream (two towers) and combines their FC3 logits with a 4→2 FC layer.
The fusion-point ablations instead subtract the two streams' activations after the
towers, FC1 or FC2, feeding a single metric tail.
"""

import abc
import dataclasses
import enum
import logging
from typing import Dict, List, Optional, Tuple

import numpy as np

from tsnet import layers, tensor
from tsnet.layers import FCLayer, FeatureTower, MetricNetwork, NamedParameters
from tsnet.tensor import Tensor

SSTAR_WIDTH = 1.45
SSTAR_BOTTLENECK = 2.0
PARAMETER_BAND = (0.98, 1.02)


class ModelKind(str, enum.Enum):
    S = "S"
    PS = "PS"
    TSNET = "TSNet"
    SSTAR = "SStar"


class FusionPoint(str, enum.Enum):
    """Where the two TS-Net streams are combined; FC3 is the standard TS-Net."""

    FC3 = "FC3"
    FC2 = "FC2"
    FC1 = "FC1"
    FEATURE_TOWER = "FeatureTower"


class LossMode(str, enum.Enum):
    ONE_ENTROPY = "OneEntropy"
    THREE_ENTROPY = "ThreeEntropy"


# Number of metric layers each stream applies before a mid-metric fusion.
_FUSION_DEPTH = {FusionPoint.FEATURE_TOWER: 0, FusionPoint.FC1: 1, FusionPoint.FC2: 2}


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    """Architecture of a model variant.

    Attributes:
        kind: The network family.
        loss_mode: Whether TS-Net streams carry their own classification loss.
            Ignored by the single-stream kinds.
        fusion_point: Where TS-Net fuses its streams. Must be FC3 for other kinds.
        width_multiplier: Scales every tower's convolution channels.
        metric_hidden: Width of FC1 and FC2.
        sstar_width: Extra tower width factor of S*. None selects 1.45 when that matches
            TS-Net's parameter count within 2%, else an auto-tuned factor.
        sstar_bottleneck: Bottleneck width factor of S*.
    """

    kind: ModelKind = ModelKind.TSNET
    loss_mode: LossMode = LossMode.THREE_ENTROPY
    fusion_point: FusionPoint = FusionPoint.FC3
    width_multiplier: float = 1.0
    metric_hidden: int = layers.METRIC_HIDDEN
    sstar_width: Optional[float] = None
    sstar_bottleneck: float = SSTAR_BOTTLENECK

    def __post_init__(self):
        # Accept plain strings, e.g. from configuration files.
        object.__setattr__(self, "kind", ModelKind(self.kind))
        object.__setattr__(self, "loss_mode", LossMode(self.loss_mode))
        object.__setattr__(self, "fusion_point", FusionPoint(self.fusion_point))
        if self.fusion_point != FusionPoint.FC3 and self.kind != ModelKind.TSNET:
            raise ValueError(f"fusion point {self.fusion_point.value} requires kind TSNet")
        if (
            self.kind == ModelKind.TSNET
            and self.fusion_point == FusionPoint.FEATURE_TOWER
            and self.loss_mode == LossMode.THREE_ENTROPY
        ):
            raise ValueError("ThreeEntropy is undefined when fusing after the feature towers")
        if self.width_multiplier <= 0 or self.metric_hidden <= 0:
            raise ValueError("width_multiplier and metric_hidden must be positive")

    @property
    def three_entropy(self) -> bool:
        return self.kind == ModelKind.TSNET and self.loss_mode == LossMode.THREE_ENTROPY

    def to_dict(self) -> Dict[str, object]:
        return {
            field.name: getattr(getattr(self, field.name), "value", getattr(self, field.name))
            for field in dataclasses.fields(self)
        }


@dataclasses.dataclass
class ForwardOutputs:
    """Logits and descriptors of one forward pass; optional fields depend on the variant."""

    logits_final: Tensor
    logits_siam: Optional[Tensor] = None
    logits_pseudo: Optional[Tensor] = None
    feat_siam: Optional[Tuple[Tensor, Tensor]] = None
    feat_pseudo: Optional[Tuple[Tensor, Tensor]] = None


@dataclasses.dataclass
class Stream:
    """Two towers fused by subtraction. The towers are one object for a Siamese stream."""

    tower_a: FeatureTower
    tower_b: FeatureTower
    metric: Optional[MetricNetwork]

    @property
    def shared(self) -> bool:
        return self.tower_a is self.tower_b

    def features(self, x1: Tensor, x2: Tensor) -> Tuple[Tensor, Tensor]:
        return self.tower_a(x1), self.tower_b(x2)

    def named_parameters(self) -> NamedParameters:
        if self.shared:
            params = layers.prefixed("tower", self.tower_a.named_parameters())
        else:
            params = layers.prefixed("tower_a", self.tower_a.named_parameters())
            params.update(layers.prefixed("tower_b", self.tower_b.named_parameters()))
        if self.metric is not None:
            params.update(layers.prefixed("metric", self.metric.named_parameters()))
        return params


class PatchMatcher(abc.ABC):
    """A network scoring whether two patches from different modalities correspond."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec

    @abc.abstractmethod
    def forward(self, x1: Tensor, x2: Tensor) -> ForwardOutputs:
        """Runs the network on a patch pair (1×64×64) or batch of pairs (N×1×64×64)."""

    @abc.abstractmethod
    def named_parameters(self) -> NamedParameters:
        """Gets every trainable tensor, each exactly once, keyed by a stable name."""

    def __call__(self, x1: Tensor, x2: Tensor) -> ForwardOutputs:
        return self.forward(x1, x2)

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return layers.count_parameters(self)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()


class SiameseNet(PatchMatcher):
    """One tower applied to both patches (kinds S and S*)."""

    def __init__(self, spec: ModelSpec, stream: Stream):
        super().__init__(spec)
        assert stream.shared
        self.stream = stream

    def forward(self, x1, x2):
        return forward_siamese(self, x1, x2)

    def named_parameters(self):
        return self.stream.named_parameters()


class PseudoSiameseNet(PatchMatcher):
    """A distinct tower per modality (kind PS)."""

    def __init__(self, spec: ModelSpec, stream: Stream):
        super().__init__(spec)
        assert not stream.shared
        self.stream = stream

    def forward(self, x1, x2):
        return forward_pseudo(self, x1, x2)

    def named_parameters(self):
        return self.stream.named_parameters()


class TSNet(PatchMatcher):
    """Siamese and Pseudo-Siamese streams fused by an FC layer over their logits."""

    def __init__(self, spec: ModelSpec, siamese: Stream, pseudo: Stream, fusion: FCLayer):
        super().__init__(spec)
        self.siamese = siamese
        self.pseudo = pseudo
        self.fusion = fusion

    def forward(self, x1, x2):
        return forward_tsnet(self, x1, x2)

    def named_parameters(self):
        params = layers.prefixed("siamese", self.siamese.named_parameters())
        params.update(layers.prefixed("pseudo", self.pseudo.named_parameters()))
        params.update(layers.prefixed("fusion", self.fusion.named_parameters()))
        return params


class FusedTSNet(PatchMatcher):
    """TS-Net variant fusing its streams after the towers, FC1 or FC2.

    Each stream's metric holds the layers it applies before the fusion point, plus its
    own remaining layers when trained with ThreeEntropy (per-stream heads). The
    subtracted activations feed `tail`, which holds the layers after the fusion point.
    """

    def __init__(self, spec: ModelSpec, siamese: Stream, pseudo: Stream, tail: MetricNetwork):
        super().__init__(spec)
        self.siamese = siamese
        self.pseudo = pseudo
        self.tail = tail

    def forward(self, x1, x2):
        return forward_tsnet_fused_at(self, self.spec.fusion_point, x1, x2)

    def named_parameters(self):
        params = layers.prefixed("siamese", self.siamese.named_parameters())
        params.update(layers.prefixed("pseudo", self.pseudo.named_parameters()))
        params.update(layers.prefixed("tail", self.tail.named_parameters()))
        return params


def forward_siamese(model: SiameseNet, x1: Tensor, x2: Tensor) -> ForwardOutputs:
    """f = tower(x1) − tower(x2); logits = metric(f)."""
    f1, f2 = model.stream.features(x1, x2)
    logits = model.stream.metric(f1 - f2)
    return ForwardOutputs(logits_final=logits, logits_siam=logits, feat_siam=(f1, f2))


def forward_pseudo(model: PseudoSiameseNet, x1: Tensor, x2: Tensor) -> ForwardOutputs:
    """f = towerA(x1) − towerB(x2); logits = metric(f)."""
    f1, f2 = model.stream.features(x1, x2)
    logits = model.stream.metric(f1 - f2)
    return ForwardOutputs(logits_final=logits, logits_pseudo=logits, feat_pseudo=(f1, f2))


def forward_tsnet(model: TSNet, x1: Tensor, x2: Tensor) -> ForwardOutputs:
    """Runs both streams, then fuses concat(siamese logits, pseudo logits) with a 4→2 FC."""
    fs1, fs2 = model.siamese.features(x1, x2)
    fp1, fp2 = model.pseudo.features(x1, x2)
    logits_siam = model.siamese.metric(fs1 - fs2)
    logits_pseudo = model.pseudo.metric(fp1 - fp2)
    logits_final = model.fusion(tensor.concat(logits_siam, logits_pseudo, axis=-1))
    return ForwardOutputs(
        logits_final=logits_final,
        logits_siam=logits_siam,
        logits_pseudo=logits_pseudo,
        feat_siam=(fs1, fs2),
        feat_pseudo=(fp1, fp2),
    )


def forward_tsnet_fused_at(
    model: FusedTSNet, point: FusionPoint, x1: Tensor, x2: Tensor
) -> ForwardOutputs:
    """Subtracts the streams' activations at `point` and applies the shared metric tail."""
    point = FusionPoint(point)
    if point not in _FUSION_DEPTH:
        raise ValueError(f"mid-network fusion is undefined at {point.value}")
    if point != model.spec.fusion_point:
        raise ValueError(f"model was built to fuse at {model.spec.fusion_point.value}")
    depth = _FUSION_DEPTH[point]

    fs1, fs2 = model.siamese.features(x1, x2)
    fp1, fp2 = model.pseudo.features(x1, x2)
    hidden_siam = fs1 - fs2
    hidden_pseudo = fp1 - fp2
    if depth:
        hidden_siam = model.siamese.metric(hidden_siam, 0, depth)
        hidden_pseudo = model.pseudo.metric(hidden_pseudo, 0, depth)
    outputs = ForwardOutputs(
        logits_final=model.tail(hidden_siam - hidden_pseudo, depth, 3),
        feat_siam=(fs1, fs2),
        feat_pseudo=(fp1, fp2),
    )
    if model.spec.three_entropy:
        outputs.logits_siam = model.siamese.metric(hidden_siam, depth, 3)
        outputs.logits_pseudo = model.pseudo.metric(hidden_pseudo, depth, 3)
    return outputs


# *** Construction ***


def tower_parameter_count(width_multiplier: float, bottleneck_multiplier: float = 1.0) -> int:
    """Parameter count of a FeatureTower, computed without building it."""
    total = 0
    in_channels = 1
    extent = layers.PATCH_SIZE
    for out_channels, kernel, _, pool in layers.TOWER_LAYOUT:
        out_channels = layers.scale_channels(out_channels, width_multiplier)
        total += out_channels * in_channels * kernel * kernel + out_channels
        in_channels = out_channels
        extent //= 2 if pool else 1
    out_dim = layers.scale_channels(layers.BOTTLENECK_DIM, bottleneck_multiplier)
    return total + in_channels * extent * extent * out_dim + out_dim


def _metric_parameter_count(in_dim: int, hidden: int) -> int:
    return (in_dim + 1) * hidden + (hidden + 1) * hidden + (hidden + 1) * 2


def expected_parameter_count(spec: ModelSpec) -> int:
    """Parameter count of `build_model(spec)` for kinds S, PS, S* and the standard TS-Net."""
    tower = tower_parameter_count(spec.width_multiplier)
    metric = _metric_parameter_count(layers.BOTTLENECK_DIM, spec.metric_hidden)
    if spec.kind == ModelKind.S:
        return tower + metric
    if spec.kind == ModelKind.PS:
        return 2 * tower + metric
    if spec.kind == ModelKind.SSTAR:
        width = spec.width_multiplier * resolve_sstar_width(spec)
        bottleneck = layers.scale_channels(layers.BOTTLENECK_DIM, spec.sstar_bottleneck)
        return tower_parameter_count(width, spec.sstar_bottleneck) + _metric_parameter_count(
            bottleneck, spec.metric_hidden
        )
    if spec.fusion_point != FusionPoint.FC3:
        raise ValueError("expected_parameter_count covers the standard TS-Net only")
    return 3 * tower + 2 * metric + 4 * 2 + 2


def resolve_sstar_width(spec: ModelSpec) -> float:
    """Width factor making S* match TS-Net's parameter count within `PARAMETER_BAND`.

    The 1.45 factor is used when it lands in the band; otherwise the factor on a 0.01 grid
    closest to a ratio of 1 is chosen and logged.
    """
    if spec.sstar_width is not None:
        return spec.sstar_width
    tsnet = dataclasses.replace(
        spec, kind=ModelKind.TSNET, fusion_point=FusionPoint.FC3, sstar_width=None
    )
    target = expected_parameter_count(tsnet)
    bottleneck = layers.scale_channels(layers.BOTTLENECK_DIM, spec.sstar_bottleneck)
    metric = _metric_parameter_count(bottleneck, spec.metric_hidden)

    def ratio(factor: float) -> float:
        width = spec.width_multiplier * factor
        return (tower_parameter_count(width, spec.sstar_bottleneck) + metric) / target

    low, high = PARAMETER_BAND
    if low <= ratio(SSTAR_WIDTH) <= high:
        return SSTAR_WIDTH
    candidates = np.round(np.arange(1.0, 4.0, 0.01), 2)
    best = float(min(candidates, key=lambda factor: abs(ratio(factor) - 1.0)))
    logging.info(
        f"S* width factor {SSTAR_WIDTH} gives parameter ratio {ratio(SSTAR_WIDTH):.4f} to "
        f"TS-Net; using auto-tuned factor {best} (ratio {ratio(best):.4f})"
    )
    return best


def _siamese_stream(rng, spec, width=None, bottleneck=1.0, positions=(0, 1, 2)) -> Stream:
    tower = FeatureTower.create(rng, width or spec.width_multiplier, bottleneck)
    metric = None
    if positions:
        metric = MetricNetwork.create(tower.out_dim, rng, spec.metric_hidden, positions)
    return Stream(tower, tower, metric)


def _pseudo_stream(rng, spec, positions=(0, 1, 2)) -> Stream:
    tower_a = FeatureTower.create(rng, spec.width_multiplier)
    tower_b = FeatureTower.create(rng, spec.width_multiplier)
    metric = None
    if positions:
        metric = MetricNetwork.create(tower_a.out_dim, rng, spec.metric_hidden, positions)
    return Stream(tower_a, tower_b, metric)


def build_model(spec: ModelSpec, rng: np.random.Generator) -> PatchMatcher:
    """Constructs and initializes the variant described by `spec`.

    For S* the returned model's spec records the resolved width factor.
    """
    if spec.kind == ModelKind.S:
        return SiameseNet(spec, _siamese_stream(rng, spec))
    if spec.kind == ModelKind.SSTAR:
        spec = dataclasses.replace(spec, sstar_width=resolve_sstar_width(spec))
        width = spec.width_multiplier * spec.sstar_width
        return SiameseNet(spec, _siamese_stream(rng, spec, width, spec.sstar_bottleneck))
    if spec.kind == ModelKind.PS:
        return PseudoSiameseNet(spec, _pseudo_stream(rng, spec))
    if spec.fusion_point == FusionPoint.FC3:
        siamese = _siamese_stream(rng, spec)
        pseudo = _pseudo_stream(rng, spec)
        return TSNet(spec, siamese, pseudo, FCLayer.create(4, 2, rng))

    depth = _FUSION_DEPTH[spec.fusion_point]
    positions = tuple(range(3 if spec.three_entropy else depth))
    siamese = _siamese_stream(rng, spec, positions=positions)
    pseudo = _pseudo_stream(rng, spec, positions=positions)
    tail = MetricNetwork.create(
        layers.BOTTLENECK_DIM, rng, spec.metric_hidden, positions=range(depth, 3)
    )
    return FusedTSNet(spec, siamese, pseudo, tail)
