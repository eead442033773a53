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

"""CLI script to train a patch matching model on caches written by `gen_data`."""

import logging
import os
from typing import Any, Dict, Mapping, Optional, Tuple

import sacred

from tsnet import config, models, serialize, training
from tsnet.scripts import script_utils

train_ex = sacred.Experiment("train")
script_utils.add_experiment_config(train_ex)


@train_ex.config
def default_config():
    """Default configuration values."""
    cache_dir = None  # output directory of gen_data
    resume_from = None  # path of a `last.tsck` to continue from
    _ = locals()  # quieten flake8 unused variable warning
    del _


script_utils.add_logging_config(train_ex, "train")


def load_resume(
    resume_from: str, spec: models.ModelSpec
) -> Tuple[serialize.Checkpoint, Optional[serialize.Checkpoint]]:
    """Loads a checkpoint to resume and, if kept beside it, the run's best checkpoint."""
    resume = serialize.load_checkpoint(resume_from)
    if resume.model_spec() != spec:
        raise serialize.IntegrityError(
            f"{resume_from}: checkpoint of {resume.spec} cannot resume {spec.to_dict()}"
        )
    best_path = os.path.join(os.path.dirname(resume_from), "best.tsck")
    best = serialize.load_checkpoint(best_path) if os.path.exists(best_path) else None
    return resume, best


@train_ex.main
def train_model(
    model: Mapping[str, Any],
    loss: Mapping[str, Any],
    train: Mapping[str, Any],
    data: Mapping[str, Any],
    out_dir: Optional[str],
    runs: int,
    config_path: Optional[str],
    cache_dir: Optional[str],
    resume_from: Optional[str],
    log_dir: str,
) -> Dict[str, Any]:
    """Entry-point into script to train one model, keeping best and last checkpoints."""
    cfg = script_utils.experiment_config(model, loss, train, data, out_dir, runs, config_path)
    if cache_dir is None:
        raise ValueError("cache_dir must name the output directory of gen_data")
    raw = {split: serialize.read_split(cache_dir, split) for split in ("train", "val")}
    splits, stats = training.prepare_splits(raw)

    init_rng, _ = training.make_rngs(cfg.train.seed)
    net = models.build_model(cfg.model, init_rng)
    resume, best = None, None
    if resume_from is not None:
        resume, best = load_resume(resume_from, net.spec)

    os.makedirs(log_dir, exist_ok=True)
    config.save(os.path.join(log_dir, "config.txt"), cfg)
    logging.info(f"Training {net.spec.kind.value} with {net.num_parameters()} parameters")
    result = training.train(
        net,
        splits,
        cfg.loss,
        cfg.train,
        epochs=cfg.train.resolve_epochs(cfg.data.synthetic),
        stats=stats,
        config=cfg.as_strings(),
        out_dir=log_dir,
        resume_from=resume,
        resume_best=best,
    )
    return {
        "best_val_err95": result.best.best_val_err,
        "best_epoch": result.best.best_epoch,
        "epochs": result.last.epoch,
        "n_params": net.num_parameters(),
    }


if __name__ == "__main__":
    script_utils.experiment_main(train_ex, "train")
