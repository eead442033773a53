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

"""Miscellaneous helper methods."""

import datetime
import hashlib
import multiprocessing
import multiprocessing.dummy
import os
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar
import uuid

import numpy as np

T = TypeVar("T")
V = TypeVar("V")

THREADS_ENV = "TSNET_THREADS"


def threads_from_env() -> Optional[int]:
    """Parallelism cap from `TSNET_THREADS`, or None (one worker per CPU) when unset."""
    value = os.getenv(THREADS_ENV)
    if not value:
        return None
    threads = int(value)
    if threads < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got '{value}'")
    return threads


def parallel_map(
    fn: Callable[[T], V],
    items: Sequence[T],
    parallelism: Optional[int] = None,
    threading: bool = True,
) -> List[V]:
    """Computes `[fn(item) for item in items]`, possibly in parallel.

    Args:
        fn: The function to apply.
        items: The inputs, in order.
        parallelism: The number of threads/processes to execute in parallel; if not specified,
            defaults to `multiprocessing.cpu_count()`.
        threading: If true, use multi-threading; otherwise, use multiprocessing. NumPy releases
            the GIL in most array kernels, and threads avoid copying the arrays.

    Returns:
        The results, in the order of `items`.
    """
    if parallelism == 1 or len(items) <= 1:
        # Only one worker? Skip the pool, since creating it adds overhead.
        return [fn(item) for item in items]
    module = multiprocessing.dummy if threading else multiprocessing
    with module.Pool(processes=parallelism) as pool:
        return pool.map(fn, items)


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and population standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=0))


def config_hash(flat_config: str) -> str:
    """Short stable digest of a serialized configuration."""
    return hashlib.sha1(flat_config.encode("utf-8")).hexdigest()[:8]


def make_unique_timestamp() -> str:
    """Timestamp, with random uuid added to avoid collisions."""
    iso_timestamp = datetime.datetime.now().isoformat(timespec="seconds")
    return f"{iso_timestamp}_{uuid.uuid4().hex[:6]}"
