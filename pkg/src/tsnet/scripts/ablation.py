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

"""CLI script to run an ablation grid over models, fusion points and loss counts."""

import os
from typing import Any, Mapping, Optional

import sacred

from tsnet import config, serialize, training
from tsnet.experiments import ablation
from tsnet.scripts import script_utils

ablation_ex = sacred.Experiment("ablation")
script_utils.add_experiment_config(ablation_ex)


@ablation_ex.config
def default_config():
    """Default configuration values."""
    table = "models"  # one of ablation.TABLES
    cache_dir = None  # output directory of gen_data
    parallelism = 1  # runs trained concurrently; None for one per CPU
    save_checkpoints = False
    _ = locals()  # quieten flake8 unused variable warning
    del _


@ablation_ex.named_config
def fusion():
    table = "fusion"
    _ = locals()  # quieten flake8 unused variable warning
    del _


script_utils.add_logging_config(ablation_ex, "ablation")


@ablation_ex.main
def run_ablation(
    model: Mapping[str, Any],
    loss: Mapping[str, Any],
    train: Mapping[str, Any],
    data: Mapping[str, Any],
    out_dir: Optional[str],
    runs: int,
    config_path: Optional[str],
    table: str,
    cache_dir: Optional[str],
    parallelism: Optional[int],
    save_checkpoints: bool,
    log_dir: str,
) -> str:
    """Entry-point into script to train every cell of `table` `runs` times.

    Writes `runs.csv` (one row per run) and `summary.csv` (one row per cell) to `log_dir`,
    and returns the grid of `mean ± std [config hash]` as text.
    """
    cfg = script_utils.experiment_config(model, loss, train, data, out_dir, runs, config_path)
    if cache_dir is None:
        raise ValueError("cache_dir must name the output directory of gen_data")
    raw = {split: serialize.read_split(cache_dir, split) for split in ("train", "val")}
    splits, stats = training.prepare_splits(raw)

    os.makedirs(log_dir, exist_ok=True)
    config.save(os.path.join(log_dir, "config.txt"), cfg)
    results = ablation.run_ablation(
        table,
        cfg,
        splits,
        stats,
        epochs=cfg.train.resolve_epochs(cfg.data.synthetic),
        parallelism=parallelism,
        out_dir=log_dir if save_checkpoints else None,
    )
    summary = ablation.summarize(results)
    results.to_csv(os.path.join(log_dir, "runs.csv"), index=False)
    summary.to_csv(os.path.join(log_dir, "summary.csv"), index=False)

    text = ablation.format_table(summary).to_string()
    print(text)
    return text


if __name__ == "__main__":
    script_utils.experiment_main(ablation_ex, "ablation")
