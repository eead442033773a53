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

"""Dense tensors with define-by-run reverse-mode automatic differentiation.

Every differentiable operation records its inputs and a backward closure on the
output tensor. `Tensor.backward` walks the recorded graph in reverse topological
order, accumulating gradients by addition into every leaf with `requires_grad`.

All operations accept an optional leading batch axis. Tensors are float32 by
default; `float64_mode` switches newly created tensors to float64, which is used
to make finite-difference gradient checks sharp.
"""

import contextlib
import threading
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class DimensionError(ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(ValueError):
    """An operation was called outside of its preconditions."""


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf from its inputs."""


class _State(threading.local):
    """Per-thread engine state: the graph is confined to the thread that records it."""

    def __init__(self):
        super().__init__()
        self.dtype = np.float32
        self.grad_enabled = True


_state = _State()


def default_dtype() -> np.dtype:
    return np.dtype(_state.dtype)


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Creates float64 tensors inside the context (gradient-check shadow mode)."""
    old = _state.dtype
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disables graph recording inside the context, e.g. for evaluation."""
    old = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class Tensor:
    """An n-dimensional real array, optionally tracking gradients.

    Attributes:
        data: The contiguous array of values.
        grad: The accumulated gradient, same shape as `data`, or None.
        requires_grad: Whether gradients flow into this tensor.
        op: The name of the operation producing this tensor ("leaf" for inputs).
    """

    __array_priority__ = 1000  # so `ndarray * Tensor` dispatches to Tensor.__rmul__

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        *,
        dtype: Optional[np.dtype] = None,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
        op: str = "leaf",
    ):
        dtype = dtype or default_dtype()
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self) -> None:
        """Populates `grad` of every `requires_grad` leaf reachable from this scalar.

        Raises:
            ContractError: if this tensor is not a scalar or was not recorded on a graph.
        """
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward called on a tensor that does not require grad")

        order = topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node.is_leaf:
                node.grad = grad if node.grad is None else node.grad + grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad

    # Operator sugar; every operator is a thin wrapper around a module-level op.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    @property
    def T(self) -> "Tensor":  # pylint:disable=invalid-name
        return transpose(self)


def as_tensor(value: Union[Tensor, ArrayLike], like: Optional[Tensor] = None) -> Tensor:
    """Wraps constants as non-differentiable tensors with the dtype of `like`."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def topological_order(root: Tensor) -> List[Tensor]:
    """Returns the recorded graph below `root`, inputs before the ops consuming them.

    Each node appears exactly once. Iterative, so deep graphs do not hit the recursion limit.
    """
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Builds an op output, recording it on the graph when gradients are required."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"'{op}' produced non-finite values")
    dtype = parents[0].dtype
    requires_grad = _state.grad_enabled and any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(data, dtype=dtype, op=op)
    return Tensor(
        data, requires_grad=True, dtype=dtype, _parents=tuple(parents), _backward=backward, op=op
    )


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sums `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from e


# *** Elementwise arithmetic ***


def add(a: Tensor, b: Union[Tensor, ArrayLike]) -> Tensor:
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Union[Tensor, ArrayLike]) -> Tensor:
    """Element-wise `a - b`. Requires equal shapes when both operands are tensors."""
    b = as_tensor(b, like=a)
    if a.ndim and b.ndim and a.shape != b.shape:
        raise DimensionError(f"sub: shapes differ, {a.shape} vs {b.shape}")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Union[Tensor, ArrayLike]) -> Tensor:
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a: Tensor, b: Union[Tensor, ArrayLike]) -> Tensor:
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "div")

    def backward(g):
        grad_a = g / b.data
        grad_b = -g * a.data / (b.data * b.data)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result(a.data / b.data, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _result(out, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    def backward(g):
        return (g / x.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _result(out, (x,), backward, "log")


def clip(x: Tensor, low: float, high: float) -> Tensor:
    """Clamps to [low, high]; the gradient is zero where the clamp is active."""

    def backward(g):
        return (g * ((x.data >= low) & (x.data <= high)),)

    return _result(np.clip(x.data, low, high), (x,), backward, "clip")


def relu(x: Tensor) -> Tensor:
    """max(0, x). The subgradient at 0 is 0."""

    def backward(g):
        return (g * (x.data > 0),)

    return _result(np.maximum(x.data, 0), (x,), backward, "relu")


def softmax2(x: Tensor) -> Tensor:
    """Softmax over a last axis of length 2, stabilized by max-subtraction."""
    if x.shape[-1:] != (2,):
        raise DimensionError(f"softmax2 expects a last axis of length 2, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), backward, "softmax2")


# *** Shape manipulation ***


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from e

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), backward, "reshape")


def flatten(x: Tensor) -> Tensor:
    """Flattens all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")

    def backward(g):
        return (g.T,)

    return _result(x.data.T, (x,), backward, "transpose")


def concat(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    try:
        out = np.concatenate([a.data, b.data], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: shapes {a.shape} and {b.shape} along {axis}") from e
    split = a.shape[axis]

    def backward(g):
        grad_a, grad_b = np.split(g, [split], axis=axis)
        return grad_a, grad_b

    return _result(out, (a, b), backward, "concat")


def index_select(x: Tensor, index) -> Tensor:
    """Basic/advanced indexing, e.g. `probs[..., 1]`."""
    out = x.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, slice, type(Ellipsis))) for p in parts)

    def backward(g):
        grad = np.zeros_like(x.data)
        if basic:
            grad[index] = g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return _result(np.array(out), (x,), backward, "index")


# *** Reductions ***


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # pylint:disable=redefined-builtin
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / count)


def l2norm_sq(x: Tensor, axis: int = -1) -> Tensor:
    """Squared Euclidean norm along `axis`."""

    def backward(g):
        return (2.0 * np.expand_dims(g, axis) * x.data,)

    return _result(np.asarray((x.data * x.data).sum(axis=axis)), (x,), backward, "l2norm_sq")


def l2norm(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Euclidean norm along `axis`; dD/dx = x / max(D, eps) so D = 0 has a finite gradient."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis))

    def backward(g):
        denom = np.expand_dims(np.maximum(norm, eps), axis)
        return (np.expand_dims(g, axis) * x.data / denom,)

    return _result(np.asarray(norm), (x,), backward, "l2norm")


# *** Linear algebra, convolution and pooling ***


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of `a` (m×k) and `b` (k×n)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def _batched(x: Tensor, rank: int, op: str) -> Tuple[Tensor, bool]:
    if x.ndim == rank - 1:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != rank:
        raise DimensionError(f"{op}: expected rank {rank - 1} or {rank} input, got {x.shape}")
    return x, False


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation (no kernel flip).

    Args:
        x: input of shape C_in×H×W or N×C_in×H×W.
        w: kernels of shape C_out×C_in×kh×kw.
        b: bias of shape C_out.
        stride: step between windows, at least 1.
        padding: zero padding added to both sides of each spatial axis.

    Returns:
        Output of shape (N×)C_out×H'×W', H' = (H + 2·padding − kh) // stride + 1.
    """
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    x, squeeze = _batched(x, 4, "conv2d")
    n, c_in, height, width = x.shape
    c_out, w_c_in, kh, kw = w.shape
    if w_c_in != c_in or b.shape != (c_out,):
        raise DimensionError(f"conv2d: input {x.shape}, weights {w.shape}, bias {b.shape}")
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise DimensionError(f"conv2d: kernel {w.shape} does not fit input {x.shape}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # N×C×H'×W'×kh×kw view of every window.
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    out = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3]))  # N×H'×W'×C_out
    out = out.transpose(0, 3, 1, 2) + b.data[None, :, None, None]

    def backward(g):
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = g.sum(axis=(0, 2, 3))
        cols = np.tensordot(g, w.data, axes=([1], [0]))  # N×H'×W'×C_in×kh×kw
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                grad_padded[
                    :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
                ] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        grad_x = grad_padded[:, :, padding : padding + height, padding : padding + width]
        return grad_x, grad_w, grad_b

    result = _result(np.ascontiguousarray(out), (x, w, b), backward, "conv2d")
    return reshape(result, result.shape[1:]) if squeeze else result


def maxpool2(x: Tensor) -> Tensor:
    """2×2 max-pooling with stride 2 over the last two axes.

    The backward pass routes the gradient to the argmax of each window; on ties the
    first element in row-major window order receives it.
    """
    x, squeeze = _batched(x, 4, "maxpool2")
    n, c, height, width = x.shape
    if height % 2 or width % 2:
        raise DimensionError(f"maxpool2: spatial extents must be even, got {x.shape}")
    windows = x.data.reshape(n, c, height // 2, 2, width // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, height // 2, width // 2, 4)
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    def backward(g):
        routed = (np.arange(4) == argmax[..., None]) * g[..., None]
        routed = routed.reshape(n, c, height // 2, width // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (routed.reshape(n, c, height, width),)

    result = _result(out, (x,), backward, "maxpool2")
    return reshape(result, result.shape[1:]) if squeeze else result
