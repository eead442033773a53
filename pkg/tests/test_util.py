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

"""Unit tests for tsnet.util."""

import math

import pytest

from tsnet import util


def _square(x: int) -> int:
    return x * x


@pytest.mark.parametrize("items", [[], [3], list(range(10))])
@pytest.mark.parametrize("threading", [False, True])
@pytest.mark.parametrize("parallelism", [1, 2])
def test_parallel_map(items, parallelism: int, threading: bool) -> None:
    """Results come back in input order whatever the pool."""
    actual = util.parallel_map(_square, items, parallelism=parallelism, threading=threading)
    assert actual == [x * x for x in items]


@pytest.mark.parametrize(
    "values,expected",
    [([2.0], (2.0, 0.0)), ([1.0, 3.0], (2.0, 1.0)), ([1.0, 2.0, 3.0], (2.0, math.sqrt(2 / 3)))],
)
def test_mean_std(values, expected):
    mean, std = util.mean_std(values)
    assert mean == pytest.approx(expected[0])
    assert std == pytest.approx(expected[1])


def test_config_hash():
    digest = util.config_hash("model.kind = S\n")
    assert len(digest) == 8
    assert digest == util.config_hash("model.kind = S\n")
    assert digest != util.config_hash("model.kind = PS\n")


def test_threads_from_env(monkeypatch):
    monkeypatch.delenv(util.THREADS_ENV, raising=False)
    assert util.threads_from_env() is None
    monkeypatch.setenv(util.THREADS_ENV, "3")
    assert util.threads_from_env() == 3
    monkeypatch.setenv(util.THREADS_ENV, "0")
    with pytest.raises(ValueError):
        util.threads_from_env()


def test_make_unique_timestamp():
    assert util.make_unique_timestamp() != util.make_unique_timestamp()
