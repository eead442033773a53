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

"""CLI script to score a split with a trained checkpoint and report its 95% error rate."""

import logging
import os
from typing import Any, Dict, Optional

import sacred

from tsnet import datasets, evaluation, serialize
from tsnet.scripts import script_utils

evaluate_ex = sacred.Experiment("evaluate")


@evaluate_ex.config
def default_config():
    """Default configuration values."""
    checkpoint_path = None  # path of a `best.tsck` or `last.tsck`
    cache_dir = None  # output directory of gen_data
    split = "val"
    parallelism = None  # scoring threads; None reads TSNET_THREADS
    out_dir = None
    _ = locals()  # quieten flake8 unused variable warning
    del _


script_utils.add_logging_config(evaluate_ex, "evaluate")


@evaluate_ex.main
def evaluate(
    checkpoint_path: Optional[str],
    cache_dir: Optional[str],
    split: str,
    parallelism: Optional[int],
    log_dir: str,
) -> Dict[str, Any]:
    """Entry-point into script to evaluate a checkpoint on one split.

    Normalizes the split with the statistics stored in the checkpoint, so evaluation sees
    exactly the preprocessing training did. Writes `scores.csv` and `curve.csv` to `log_dir`.
    """
    if checkpoint_path is None or cache_dir is None:
        raise ValueError("checkpoint_path and cache_dir must both be set")
    if split not in datasets.SPLITS:
        raise ValueError(f"unknown split '{split}', expected one of {datasets.SPLITS}")
    ckpt = serialize.load_checkpoint(checkpoint_path)
    model = serialize.restore_model(ckpt)
    data = datasets.normalize(serialize.read_split(cache_dir, split), ckpt.modality_stats())
    report = evaluation.evaluate(model, data, parallelism)

    os.makedirs(log_dir, exist_ok=True)
    report.scores_frame().to_csv(os.path.join(log_dir, "scores.csv"), index=False)
    report.curve_frame().to_csv(os.path.join(log_dir, "curve.csv"), index=False)
    logging.info(f"Scored {len(data)} pairs of split '{split}'")
    print(f"95%ErrRate: {report.err_rate_95:.2f}")
    return {
        "err_rate_95": report.err_rate_95,
        "threshold_at_95tpr": report.threshold_at_95tpr,
        "n_pos": report.n_pos,
        "n_neg": report.n_neg,
    }


if __name__ == "__main__":
    script_utils.experiment_main(evaluate_ex, "evaluate")
