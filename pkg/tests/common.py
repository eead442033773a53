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

"""Common functionality for tests."""
from typing import Callable, Iterator, Optional, Sequence, Tuple

import numpy as np
import pytest

from tsnet import models, tensor
from tsnet.tensor import Tensor

# Small enough for a forward/backward pass in milliseconds.
TINY_WIDTH = 0.25
TINY_HIDDEN = 16


def tiny_spec(**kwargs) -> models.ModelSpec:
    kwargs.setdefault("width_multiplier", TINY_WIDTH)
    kwargs.setdefault("metric_hidden", TINY_HIDDEN)
    return models.ModelSpec(**kwargs)


def mark_parametrize_dict(argnames, args, **kwargs):
    ids = list(args.keys())
    argvals = args.values()
    return pytest.mark.parametrize(argnames, argvals, ids=ids, **kwargs)


def numerical_gradient(
    loss_fn: Callable[[], float],
    array: np.ndarray,
    index: Tuple[int, ...],
    eps: float = 1e-6,
) -> float:
    """Central difference of `loss_fn` in coordinate `index` of `array`, perturbed in place."""
    original = array[index]
    array[index] = original + eps
    plus = loss_fn()
    array[index] = original - eps
    minus = loss_fn()
    array[index] = original
    return (plus - minus) / (2 * eps)


def check_op_gradients(
    op: Callable[..., Tensor],
    *arrays: np.ndarray,
    seed: int = 0,
    rtol: float = 1e-5,
    atol: float = 1e-7,
) -> None:
    """Compares backprop through `op` against finite differences in float64.

    The output is reduced to a scalar with fixed random weights, so every output element
    contributes a distinct gradient.
    """
    with tensor.float64_mode():
        values = [np.array(a, dtype=np.float64) for a in arrays]
        inputs = [Tensor(v, requires_grad=True) for v in values]
        out = op(*inputs)
        weights = np.random.default_rng(seed).normal(size=out.shape)
        tensor.sum(out * weights).backward()

        def loss_fn():
            return tensor.sum(op(*[Tensor(v) for v in values]) * weights).item()

        for value, param in zip(values, inputs):
            expected = np.zeros_like(value)
            for index in np.ndindex(value.shape):
                expected[index] = numerical_gradient(loss_fn, value, index)
            np.testing.assert_allclose(param.grad, expected, rtol=rtol, atol=atol)


def sample_indices(
    shape: Sequence[int], n: int, rng: np.random.Generator
) -> Iterator[Tuple[int, ...]]:
    for flat in rng.choice(int(np.prod(shape)), size=min(n, int(np.prod(shape))), replace=False):
        yield tuple(int(i) for i in np.unravel_index(flat, shape))


def check_model_gradients(
    model: models.PatchMatcher,
    loss_fn: Callable[[], Tensor],
    names: Optional[Sequence[str]] = None,
    n_samples: int = 3,
    rtol: float = 1e-4,
    atol: float = 1e-8,
) -> None:
    """Spot-checks parameter gradients of `loss_fn` against finite differences."""
    model.zero_grad()
    loss_fn().backward()
    params = model.named_parameters()
    rng = np.random.default_rng(0)
    for name in names or sorted(params):
        param = params[name]
        assert param.grad is not None, name
        for index in sample_indices(param.shape, n_samples, rng):
            expected = numerical_gradient(lambda: loss_fn().item(), param.data, index)
            assert param.grad[index] == pytest.approx(expected, rel=rtol, abs=atol), (name, index)
