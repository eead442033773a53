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

"""Match scores and the error rate at 95% recall."""

import dataclasses
import logging
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import special
from sklearn import metrics

from tsnet import datasets, models, tensor, util
from tsnet.tensor import Tensor

# Fixed so scores do not depend on the number of worker threads.
SCORE_CHUNK = 64


def score(
    model: models.PatchMatcher, x1: np.ndarray, x2: np.ndarray
) -> Union[float, np.ndarray]:
    """Probability that patches match: softmax2(logits_final)[1].

    Args:
        model: Any variant.
        x1: Modality A patch (1×64×64) or batch (N×1×64×64).
        x2: Modality B patch(es), shaped like `x1`.

    Returns:
        A float for a single pair, else an array of N scores, each in (0, 1).
    """
    with tensor.no_grad():
        logits = model(Tensor(x1), Tensor(x2)).logits_final.data.astype(np.float64)
    # softmax2(l)[1] == expit(l1 - l0); float64 keeps near-certain matches below 1.0.
    probs = special.expit(logits[..., 1] - logits[..., 0])
    return float(probs) if probs.ndim == 0 else probs


def score_dataset(
    model: models.PatchMatcher, dataset: datasets.PatchDataset, parallelism: Optional[int] = None
) -> np.ndarray:
    """Scores every pair of `dataset`, fanning chunks out over threads."""
    chunks = [slice(i, i + SCORE_CHUNK) for i in range(0, len(dataset), SCORE_CHUNK)]

    def score_chunk(chunk: slice) -> np.ndarray:
        return np.atleast_1d(score(model, *dataset.inputs(chunk)))

    if parallelism is None:
        parallelism = util.threads_from_env()
    results = util.parallel_map(score_chunk, chunks, parallelism=parallelism)
    return np.concatenate(results) if results else np.zeros(0)


def err_rate_95(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> float:
    """Percentage of negatives accepted at the threshold detecting 95% of positives.

    The threshold t is the ⌈0.95·n_pos⌉-th largest positive score; scores equal to t count
    as accepted.

    Raises:
        ContractError: if either list is empty.
    """
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise tensor.ContractError(
            f"need positive and negative scores, got {pos.size} and {neg.size}"
        )
    return 100.0 * np.count_nonzero(neg >= threshold_at_95(pos)) / neg.size


def threshold_at_95(pos_scores: np.ndarray) -> float:
    k = (95 * len(pos_scores) + 99) // 100  # ⌈0.95·n⌉ in integers
    return float(np.sort(pos_scores)[::-1][k - 1])


@dataclasses.dataclass
class EvalReport:
    """Scores of one split and the derived 95% error rate and ROC curve samples."""

    n_pos: int
    n_neg: int
    scores: np.ndarray
    labels: np.ndarray
    threshold_at_95tpr: float
    err_rate_95: float
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def scores_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"score": self.scores, "label": self.labels.astype(int)})

    def curve_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"fpr": self.fpr, "tpr": self.tpr, "threshold": self.thresholds})


def report_from_scores(scores: np.ndarray, labels: np.ndarray) -> EvalReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    err = err_rate_95(pos, neg)
    fpr, tpr, thresholds = metrics.roc_curve(labels, scores)
    return EvalReport(
        n_pos=int(pos.size),
        n_neg=int(neg.size),
        scores=scores,
        labels=labels.astype(np.uint8),
        threshold_at_95tpr=threshold_at_95(pos),
        err_rate_95=err,
        fpr=fpr,
        tpr=tpr,
        thresholds=thresholds,
    )


def evaluate(
    model: models.PatchMatcher, dataset: datasets.PatchDataset, parallelism: Optional[int] = None
) -> EvalReport:
    """Scores a (normalized) dataset and reports its 95% error rate."""
    report = report_from_scores(score_dataset(model, dataset, parallelism), dataset.labels)
    logging.debug(
        f"evaluated {report.n_pos} positives and {report.n_neg} negatives: "
        f"95% error rate {report.err_rate_95:.2f}"
    )
    return report
