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

"""Classification and feature-level contrastive losses, and their weighted combination.

The objective of TS-Net is

    L = L_tsnet_en + L_siam_en + L_pseudo_en + λ·L_siam_con + β·L_pseudo_con

where the `_en` terms are binary cross-entropies of each head and the `_con` terms are
contrastive losses on the descriptors of each stream. Every term is averaged over the batch.
"""

import dataclasses
import enum
from typing import Dict, Optional, Union

import numpy as np

from tsnet import models, tensor
from tsnet.tensor import Tensor

PROB_EPS = 1e-7
NORM_EPS = 1e-12
DECAY = 2.77

Labels = Union[int, np.ndarray]


class ContrastiveKind(str, enum.Enum):
    EXPONENTIAL = "exponential"
    CLASSICAL = "classical"


@dataclasses.dataclass(frozen=True)
class LossWeights:
    """Weights and margin of the combined objective.

    Attributes:
        lam: Weight λ of the Siamese stream's contrastive term, in [0, 1].
        beta: Weight β of the Pseudo-Siamese stream's contrastive term, in [0, 1].
        q: Contrastive margin Q, positive.
        normalize_features: Whether descriptors are scaled to unit length before the
            contrastive distance is taken.
        contrastive_kind: `exponential` (default) or the classical hinge-squared form.
    """

    lam: float = 1e-2
    beta: float = 1e-2
    q: float = 50.0
    normalize_features: bool = False
    contrastive_kind: ContrastiveKind = ContrastiveKind.EXPONENTIAL

    def __post_init__(self):
        object.__setattr__(self, "contrastive_kind", ContrastiveKind(self.contrastive_kind))
        for name in ("lam", "beta"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.q <= 0:
            raise ValueError(f"margin q must be positive, got {self.q}")


@dataclasses.dataclass
class LossBreakdown:
    """The total objective and each populated component; absent components are None."""

    total: Tensor
    tsnet_en: Optional[Tensor] = None
    siam_en: Optional[Tensor] = None
    pseudo_en: Optional[Tensor] = None
    siam_con: Optional[Tensor] = None
    pseudo_con: Optional[Tensor] = None

    COMPONENTS = ("tsnet_en", "siam_en", "pseudo_en", "siam_con", "pseudo_con")

    def to_floats(self) -> Dict[str, Optional[float]]:
        values = {"total": self.total.item()}
        for name in self.COMPONENTS:
            term = getattr(self, name)
            values[name] = None if term is None else term.item()
        return values


def _labels(y: Labels, batch_shape) -> np.ndarray:
    labels = np.asarray(y)
    if not np.all((labels == 0) | (labels == 1)):
        raise tensor.ContractError(f"labels must be 0 or 1, got {np.unique(labels)}")
    if labels.shape != tuple(batch_shape):
        raise tensor.DimensionError(f"labels of shape {labels.shape} for batch {batch_shape}")
    return labels


def cross_entropy(logits: Tensor, y: Labels) -> Tensor:
    """Binary cross-entropy of ŷ = softmax2(logits)[1], clamped to [1e-7, 1 − 1e-7].

    Args:
        logits: Shape (2,) or (N, 2).
        y: A label in {0, 1}, or N labels.

    Returns:
        The scalar loss, averaged over the batch.

    Raises:
        ContractError: if a label is outside {0, 1}.
    """
    labels = _labels(y, logits.shape[:-1]).astype(logits.dtype)
    prob = tensor.clip(tensor.softmax2(logits)[..., 1], PROB_EPS, 1.0 - PROB_EPS)
    log_likelihood = tensor.log(prob) * labels + tensor.log(1.0 - prob) * (1.0 - labels)
    return -tensor.mean(log_likelihood)


def _unit(features: Tensor) -> Tensor:
    norm = tensor.clip(tensor.l2norm(features), NORM_EPS, np.inf)
    return features / tensor.reshape(norm, norm.shape + (1,))


def contrastive(
    f1: Tensor,
    f2: Tensor,
    y: Labels,
    q: float,
    kind: ContrastiveKind = ContrastiveKind.EXPONENTIAL,
    normalize_features: bool = False,
) -> Tensor:
    """Contrastive loss on the Euclidean distance D = ‖f1 − f2‖.

    The exponential form is `y·(2/Q)·D² + (1−y)·2Q·exp(−2.77·D/Q)`; the classical form is
    `y·D² + (1−y)·max(0, Q − D)²`.

    Raises:
        ContractError: if `q` is not positive or a label is outside {0, 1}.
    """
    if q <= 0:
        raise tensor.ContractError(f"margin q must be positive, got {q}")
    if normalize_features:
        f1, f2 = _unit(f1), _unit(f2)
    diff = f1 - f2
    labels = _labels(y, diff.shape[:-1]).astype(diff.dtype)
    if ContrastiveKind(kind) == ContrastiveKind.EXPONENTIAL:
        pos = tensor.l2norm_sq(diff) * (2.0 / q)
        neg = tensor.exp(tensor.l2norm(diff) * (-DECAY / q)) * (2.0 * q)
    else:
        pos = tensor.l2norm_sq(diff)
        margin = tensor.relu(q - tensor.l2norm(diff))
        neg = margin * margin
    return tensor.mean(pos * labels + neg * (1.0 - labels))


def _require(out: models.ForwardOutputs, field: str):
    value = getattr(out, field)
    if value is None:
        raise tensor.ContractError(f"combined loss needs ForwardOutputs.{field}")
    return value


def combined_loss(
    out: models.ForwardOutputs, y: Labels, weights: LossWeights, spec: models.ModelSpec
) -> LossBreakdown:
    """Weighted sum of the loss terms that `spec` defines.

    TS-Net with ThreeEntropy populates all five terms. TS-Net with OneEntropy has only
    `tsnet_en`, plus contrastive terms whose weight is non-zero. The single-stream
    kinds populate their stream's cross-entropy and, with a non-zero weight, its
    contrastive term.

    Raises:
        ContractError: if `out` lacks a field the variant's loss needs.
    """

    def con(field: str) -> Tensor:
        f1, f2 = _require(out, field)
        return contrastive(
            f1, f2, y, weights.q, weights.contrastive_kind, weights.normalize_features
        )

    terms = {}
    kind = spec.kind
    if kind in (models.ModelKind.S, models.ModelKind.SSTAR):
        terms["siam_en"] = cross_entropy(_require(out, "logits_siam"), y)
        if weights.lam > 0:
            terms["siam_con"] = con("feat_siam")
    elif kind == models.ModelKind.PS:
        terms["pseudo_en"] = cross_entropy(_require(out, "logits_pseudo"), y)
        if weights.beta > 0:
            terms["pseudo_con"] = con("feat_pseudo")
    else:
        terms["tsnet_en"] = cross_entropy(out.logits_final, y)
        if spec.three_entropy:
            terms["siam_en"] = cross_entropy(_require(out, "logits_siam"), y)
            terms["pseudo_en"] = cross_entropy(_require(out, "logits_pseudo"), y)
        if spec.three_entropy or weights.lam > 0:
            terms["siam_con"] = con("feat_siam")
        if spec.three_entropy or weights.beta > 0:
            terms["pseudo_con"] = con("feat_pseudo")

    scale = {"siam_con": weights.lam, "pseudo_con": weights.beta}
    total = None
    for name, term in terms.items():
        weighted = term * scale[name] if name in scale else term
        total = weighted if total is None else total + weighted
    return LossBreakdown(total=total, **terms)
