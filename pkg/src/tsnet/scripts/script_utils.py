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

"""Utility functions to aid in constructing Sacred experiments."""

import os
from typing import Any, Mapping, Optional

import sacred
from sacred import observers

from tsnet import config, serialize, util

# Tiny model and data, finishing in seconds; intended for tests / debugging.
TEST_CONFIG = {
    "model": {"width_multiplier": 0.25, "metric_hidden": 32},
    "train": {"epochs": 1, "batch_size": 16},
    "data": {"n_images": 20, "image_size": 128},
}
# The smaller Pseudo-Siamese contrastive weight, also reported as best on some datasets.
BETA_SMALL_CONFIG = {"loss": {"beta": 1e-4}}


def logging_config(log_root, out_dir):
    log_dir = out_dir or os.path.join(log_root, util.make_unique_timestamp())
    _ = locals()  # quieten flake8 unused variable warning
    del _


def add_logging_config(experiment, name):
    experiment.add_config({"log_root": os.path.join(serialize.get_output_dir(), name)})
    experiment.config(logging_config)


def add_experiment_config(experiment: sacred.Experiment) -> None:
    """Adds the `ExperimentConfig` sections, `config_path` and the shared named configs."""
    experiment.add_config(config.ExperimentConfig().to_nested())
    experiment.add_config({"config_path": None})
    experiment.add_named_config("test", TEST_CONFIG)
    experiment.add_named_config("beta_small", BETA_SMALL_CONFIG)


def experiment_config(
    model: Mapping[str, Any],
    loss: Mapping[str, Any],
    train: Mapping[str, Any],
    data: Mapping[str, Any],
    out_dir: Optional[str],
    runs: int,
    config_path: Optional[str],
) -> config.ExperimentConfig:
    """Builds the run's configuration; keys in the file at `config_path` take precedence."""
    nested = {
        "model": dict(model),
        "loss": dict(loss),
        "train": dict(train),
        "data": dict(data),
        "out_dir": out_dir,
        "runs": runs,
    }
    cfg = config.from_nested(nested)
    if config_path is None:
        return cfg
    with open(config_path) as f:
        values, lines = config.parse_lines(f.read())
    return config.from_flat({**cfg.to_flat(), **values}, lines)


def add_sacred_symlink(observer: observers.FileStorageObserver):
    """Adds a symbolic link to the output directory of `observer`."""

    def f(log_dir: str) -> None:
        """Adds a symbolic link in log_dir to observer output directory."""
        if observer.dir is None:
            # In a command like print_config that produces no permanent output
            return
        os.makedirs(log_dir, exist_ok=True)
        # Use relative paths so we can mount the output directory at different paths
        # (e.g. when copying across machines).
        symlink_path = os.path.join(log_dir, "sacred")
        target_path = os.path.relpath(observer.dir, start=log_dir)
        if not os.path.lexists(symlink_path):
            os.symlink(target_path, symlink_path, target_is_directory=True)

    return f


def experiment_main(experiment: sacred.Experiment, name: str, sacred_symlink: bool = True):
    """Returns a main function for experiment."""

    sacred_dir = os.path.join(serialize.get_output_dir(), "sacred", name)
    observer = observers.FileStorageObserver(sacred_dir)
    if sacred_symlink:
        experiment.pre_run_hook(add_sacred_symlink(observer))
    experiment.observers.append(observer)
    experiment.run_commandline()
