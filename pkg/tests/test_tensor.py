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

"""Unit tests for tsnet.tensor."""

import hypothesis
from hypothesis import strategies as st
from hypothesis.extra import numpy as hp_numpy
import numpy as np
import pytest

from tsnet import layers, losses, tensor
from tsnet.tensor import Tensor
from tests import common


def _away_from_zero(rng, shape, low=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.0, size=shape)


def _distinct(rng, shape):
    """Values spaced well beyond the finite-difference step, so argmaxes are stable."""
    return rng.permutation(int(np.prod(shape))).reshape(shape) / 10.0


def test_matmul():
    a = Tensor([[1.0, 2.0]])
    b = Tensor([[3.0], [4.0]])
    np.testing.assert_array_equal(tensor.matmul(a, b).data, [[11.0]])
    eye = Tensor(np.eye(2))
    other = Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal((eye @ other).data, other.data)


def test_matmul_shape_mismatch():
    with pytest.raises(tensor.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        tensor.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv2d_constant_kernel():
    x = Tensor(np.ones((1, 3, 3)))
    out = tensor.conv2d(x, Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 2.0))


def test_conv2d_averaging_kernel():
    ramp = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
    with tensor.float64_mode():
        out = tensor.conv2d(Tensor(ramp), Tensor(np.full((1, 1, 3, 3), 1 / 9)), Tensor([0.0]))
    expected = [[ramp[0, i : i + 3, j : j + 3].mean() for j in range(2)] for i in range(2)]
    np.testing.assert_allclose(out.data[0], expected)


def test_conv2d_matches_direct_sum(rng):
    """Strided, padded convolution against an explicit loop."""
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    with tensor.float64_mode():
        out = tensor.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    assert out.shape == (2, 4, 4, 3)
    for n, c, i, j in np.ndindex(out.shape):
        window = padded[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
        assert out[n, c, i, j] == pytest.approx(np.sum(window * w[c]) + b[c])


def test_conv2d_kernel_too_large():
    with pytest.raises(tensor.DimensionError):
        tensor.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]))


def test_maxpool2():
    out = tensor.maxpool2(Tensor([[[1.0, 2.0], [3.0, 4.0]]]))
    np.testing.assert_array_equal(out.data, [[[4.0]]])
    with pytest.raises(tensor.DimensionError):
        tensor.maxpool2(Tensor(np.ones((1, 3, 4))))


def test_maxpool2_ties_route_to_first_element():
    x = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
    tensor.sum(tensor.maxpool2(x)).backward()
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1.0
    np.testing.assert_array_equal(x.grad[0, 0], expected)


def test_elementwise_examples():
    np.testing.assert_array_equal(tensor.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(tensor.softmax2(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    stable = tensor.softmax2(Tensor([1000.0, 0.0])).data
    assert stable[0] == 1.0
    assert stable[1] == pytest.approx(0.0, abs=1e-30)


def test_python_scalars_broadcast_over_batches():
    assert Tensor(2.5).shape == ()
    batch = Tensor([0.25, 0.5, 1.0])
    np.testing.assert_allclose((1.0 - batch).data, [0.75, 0.5, 0.0])
    np.testing.assert_allclose((batch - 1.0).data, [-0.75, -0.5, 0.0])
    np.testing.assert_allclose((2.0 * batch).data, [0.5, 1.0, 2.0])
    assert tensor.mean(batch).shape == ()


def test_shape_errors():
    with pytest.raises(tensor.DimensionError, match=r"\(3,\).*\(2,\)"):
        tensor.sub(Tensor(np.ones(3)), Tensor(np.ones(2)))
    with pytest.raises(tensor.DimensionError):
        tensor.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(tensor.DimensionError):
        tensor.softmax2(Tensor(np.ones(3)))
    with pytest.raises(tensor.DimensionError):
        tensor.reshape(Tensor(np.ones(6)), (4, 2))


def test_backward_examples():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    tensor.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    tensor.sum(x * x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_gradients_accumulate_over_reuse():
    x = Tensor([1.0, -2.0], requires_grad=True)
    tensor.sum(x * x + x).backward()
    np.testing.assert_array_equal(x.grad, [3.0, -3.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(tensor.ContractError):
        (x * 2.0).backward()
    with pytest.raises(tensor.ContractError):
        tensor.sum(Tensor(np.ones(3))).backward()


def test_non_finite_output_raises():
    with pytest.raises(tensor.NonFiniteError, match="log"):
        tensor.log(Tensor([0.0, 1.0]))


def test_no_grad():
    x = Tensor(np.ones(2), requires_grad=True)
    with tensor.no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert y.is_leaf
    assert (x * 3.0).requires_grad


def test_float64_mode():
    assert Tensor([1.0]).dtype == np.float32
    with tensor.float64_mode():
        assert Tensor([1.0]).dtype == np.float64
        assert (Tensor([1.0]) * 2.0).dtype == np.float64
    assert tensor.default_dtype() == np.float32


def test_deterministic():
    rng_a, rng_b = np.random.default_rng(5), np.random.default_rng(5)
    outs = []
    for rng in (rng_a, rng_b):
        x = Tensor(rng.normal(size=(2, 1, 8, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 1, 3, 3)), requires_grad=True)
        loss = tensor.sum(tensor.maxpool2(tensor.relu(tensor.conv2d(x, w, Tensor(np.zeros(3))))))
        loss.backward()
        outs.append((loss.data, x.grad, w.grad))
    for first, second in zip(*outs):
        np.testing.assert_array_equal(first, second)


OP_CASES = {
    "add_broadcast": (lambda a, b: a + b, [(3, 2), (2,)]),
    "sub": (lambda a, b: a - b, [(3, 2), (3, 2)]),
    "mul_broadcast": (lambda a, b: a * b, [(2, 3), (1, 3)]),
    "matmul": (tensor.matmul, [(2, 3), (3, 4)]),
    "transpose": (lambda a: a.T, [(2, 3)]),
    "concat": (lambda a, b: tensor.concat(a, b, axis=-1), [(2, 2), (2, 3)]),
    "sum_axis": (lambda a: tensor.sum(a, axis=0), [(3, 2)]),
    "mean": (tensor.mean, [(3, 2)]),
    "exp": (tensor.exp, [(4,)]),
    "softmax2": (tensor.softmax2, [(3, 2)]),
    "l2norm_sq": (tensor.l2norm_sq, [(3, 4)]),
    "l2norm": (tensor.l2norm, [(3, 4)]),
    "flatten": (tensor.flatten, [(2, 3, 2)]),
    "index_basic": (lambda a: a[..., 1], [(3, 2)]),
    "index_repeated": (lambda a: a[np.array([0, 2, 0])], [(3, 2)]),
}


@common.mark_parametrize_dict("op,shapes", OP_CASES)
def test_op_gradients(op, shapes, rng):
    common.check_op_gradients(op, *[rng.normal(size=shape) for shape in shapes])


def test_kinked_op_gradients(rng):
    common.check_op_gradients(tensor.relu, _away_from_zero(rng, (3, 4)))
    common.check_op_gradients(lambda a: tensor.clip(a, 0.3, 0.7), np.array([0.1, 0.5, 0.9, 0.45]))
    common.check_op_gradients(tensor.log, rng.uniform(0.5, 2.0, size=5))
    common.check_op_gradients(tensor.div, rng.normal(size=(2, 3)), _away_from_zero(rng, (2, 3)))
    common.check_op_gradients(tensor.maxpool2, _distinct(rng, (2, 3, 4, 4)))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradients(stride, padding, rng):
    common.check_op_gradients(
        lambda x, w, b: tensor.conv2d(x, w, b, stride=stride, padding=padding),
        rng.normal(size=(2, 2, 6, 6)),
        rng.normal(size=(3, 2, 3, 3)),
        rng.normal(size=3),
    )


def test_l2norm_gradient_at_zero_is_finite():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    tensor.sum(tensor.l2norm(x)).backward()
    np.testing.assert_array_equal(x.grad, np.zeros((2, 3)))


def test_composite_graph_gradients(rng):
    """Conv, relu, maxpool, flatten, FC and cross-entropy; every parameter."""
    labels = np.array([1, 0, 1])
    x = rng.normal(size=(3, 1, 4, 4))

    def op(w, b, fc_w, fc_b):
        hidden = tensor.maxpool2(tensor.relu(tensor.conv2d(Tensor(x), w, b, padding=1)))
        logits = layers.FCLayer(fc_w, fc_b)(tensor.flatten(hidden))
        return losses.cross_entropy(logits, labels)

    common.check_op_gradients(
        op,
        rng.normal(size=(2, 1, 3, 3)),
        rng.uniform(0.5, 1.0, size=2),
        rng.normal(size=(2, 8)),
        rng.normal(size=2),
    )


@hypothesis.given(
    logits=hp_numpy.arrays(
        np.float64, (4, 2), elements=st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)
    )
)
def test_softmax2_is_distribution(logits):
    probs = tensor.softmax2(Tensor(logits)).data
    assert np.all(probs >= 0.0) and np.all(probs <= 1.0)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, rtol=1e-6)
