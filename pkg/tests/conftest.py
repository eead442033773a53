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

"""Configuration settings and fixtures for tests."""

import numpy as np
import pytest

from tsnet import datasets, training

# 20 images of 128×128 give 14/4/2 source images and 448/32/16 pairs per split.
SMALL_DATA = datasets.DataConfig(n_images=20, image_size=128, transform="edge", seed=3)


@pytest.fixture(name="rng")
def fixture_rng():
    return np.random.default_rng(42)


@pytest.fixture(name="small_splits", scope="session")
def fixture_small_splits():
    return datasets.generate(SMALL_DATA)


@pytest.fixture(name="normalized_splits", scope="session")
def fixture_normalized_splits(small_splits):
    raw = small_splits.datasets()
    return training.prepare_splits({"train": raw["train"], "val": raw["val"]})


def pytest_addoption(parser):
    parser.addoption(
        "--expensive", action="store_true", default=False, help="run tests marked expensive"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--expensive"):
        return
    skip = pytest.mark.skip(reason="needs --expensive")
    for item in items:
        if "expensive" in item.keywords:
            item.add_marker(skip)
