"""Reverse-mode automatic differentiation over dense float64 tensors.

The engine is define-by-run: every primitive applied while a `GradientTape`
is active is appended to that tape, and `GradientTape.backward` walks the
tape in reverse to produce gradients for the watched leaves.

Rules the rest of the package relies on:
- Tensors are immutable; their arrays are read-only float64.
- Broadcasting is one-sided: the result shape must equal one operand's shape.
  The smaller operand aligns to trailing axes and may expand missing or
  size-1 axes (style modulation multiplies (B, H, W, C) by (B, 1, 1, C));
  expanding both operands is an error.
- A tape belongs to the thread that entered it; separate threads keep
  separate tape stacks and share nothing mutable.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Union

import numpy as np
from scipy.special import expit


# ---------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------


class ShapeMismatchError(ValueError):
    """Raised when input shapes violate a primitive's shape rule."""

    def __init__(self, *, primitive: str, shapes: Sequence[tuple[int, ...]]) -> None:
        rendered = " vs ".join(str(tuple(shape)) for shape in shapes)
        super().__init__(f"shape mismatch in {primitive}: {rendered}")
        self.primitive = primitive
        self.shapes = [tuple(shape) for shape in shapes]


class UnknownPrimitiveError(ValueError):
    """Raised when `apply_primitive` is asked for an unregistered name."""

    def __init__(self, name: str) -> None:
        super().__init__(f"unknown primitive: {name!r}")
        self.name = name


class NonScalarLossError(ValueError):
    """Raised when backward is requested for a tensor with more than one element."""

    def __init__(self, shape: tuple[int, ...]) -> None:
        super().__init__(f"loss must be a scalar, got shape {shape}")
        self.shape = shape


class NoActiveTapeError(RuntimeError):
    """Raised when a tape-dependent call runs without an active tape."""


class NonFiniteError(ArithmeticError):
    """Raised when a computation produces NaN or Inf."""

    def __init__(self, *, where: str) -> None:
        super().__init__(f"non-finite value produced by {where}")
        self.where = where


# ---------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------


TensorLike = Union["Tensor", np.ndarray, float, int, Sequence[Any]]


class Tensor:
    """Immutable dense float64 array, optionally bound to a tape node."""

    __slots__ = ("_data", "_tape", "node_id")
    # Make `np.float64(2.0) * tensor` dispatch to Tensor.__rmul__.
    __array_priority__ = 100

    def __init__(self, data: TensorLike) -> None:
        if isinstance(data, Tensor):
            array = data._data
        elif isinstance(data, np.ndarray) and data.dtype == np.float64 and not data.flags.writeable:
            array = data
        else:
            array = np.array(data, dtype=np.float64)
            array.setflags(write=False)
        self._data = array
        self._tape: GradientTape | None = None
        self.node_id: int | None = None

    @classmethod
    def _wrap(
        cls, array: np.ndarray, tape: GradientTape | None = None, node_id: int | None = None
    ) -> Tensor:
        tensor = cls.__new__(cls)
        tensor._data = array
        tensor._tape = tape
        tensor.node_id = node_id
        return tensor

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return int(self._data.size)

    def numpy(self) -> np.ndarray:
        """Writable copy of the underlying values."""
        return np.array(self._data, dtype=np.float64)

    def item(self) -> float:
        if self._data.size != 1:
            raise NonScalarLossError(self.shape)
        return float(self._data.reshape(-1)[0])

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __getitem__(self, key: Any) -> Tensor:
        return take_slice(self, key)

    def __add__(self, other: TensorLike) -> Tensor:
        return apply_primitive("add", (self, other))

    def __radd__(self, other: TensorLike) -> Tensor:
        return apply_primitive("add", (other, self))

    def __sub__(self, other: TensorLike) -> Tensor:
        return apply_primitive("sub", (self, other))

    def __rsub__(self, other: TensorLike) -> Tensor:
        return apply_primitive("sub", (other, self))

    def __mul__(self, other: TensorLike) -> Tensor:
        return apply_primitive("mul", (self, other))

    def __rmul__(self, other: TensorLike) -> Tensor:
        return apply_primitive("mul", (other, self))

    def __truediv__(self, other: TensorLike) -> Tensor:
        return apply_primitive("div", (self, other))

    def __rtruediv__(self, other: TensorLike) -> Tensor:
        return apply_primitive("div", (other, self))

    def __neg__(self) -> Tensor:
        return apply_primitive("mul", (self, -1.0))

    def __matmul__(self, other: TensorLike) -> Tensor:
        return apply_primitive("matmul", (self, other))

    def __repr__(self) -> str:
        tracked = "" if self.node_id is None else f", node_id={self.node_id}"
        return f"Tensor(shape={self.shape}{tracked})"


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------


LEAF = "leaf"


@dataclass(frozen=True, slots=True)
class TapeNode:
    """One recorded primitive application (or a watched leaf)."""

    primitive: str
    inputs: tuple[int | None, ...]
    values: tuple[np.ndarray, ...]
    output: np.ndarray
    params: Mapping[str, Any]


_LOCAL = threading.local()


def _tape_stack() -> list[GradientTape]:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape() -> GradientTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradientTape:
    """Append-only record of primitive applications for one backward pass.

    Usage:
        with GradientTape() as tape:
            x = tape.watch(values)
            loss = reduce_sum(tanh(x))
        (grad_x,) = tape.gradient(loss, [x])
    """

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> GradientTape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def watch(self, value: TensorLike) -> Tensor:
        """Register a leaf whose gradient backward should report."""
        array = as_tensor(value)._data
        node_id = self._record(LEAF, (), (), array, {})
        return Tensor._wrap(array, self, node_id)

    def _record(
        self,
        primitive: str,
        inputs: tuple[int | None, ...],
        values: tuple[np.ndarray, ...],
        output: np.ndarray,
        params: Mapping[str, Any],
    ) -> int:
        self.nodes.append(TapeNode(primitive, inputs, values, output, dict(params)))
        return len(self.nodes) - 1

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Gradient of `loss` for every leaf recorded on this tape."""
        if loss.size != 1:
            raise NonScalarLossError(loss.shape)

        grads: dict[int, np.ndarray] = {}
        if loss._tape is self and loss.node_id is not None:
            grads[loss.node_id] = np.ones_like(loss._data)
            for node_id in range(loss.node_id, -1, -1):
                node = self.nodes[node_id]
                if node.primitive == LEAF:
                    continue
                grad = grads.pop(node_id, None)
                if grad is None:
                    continue
                rule = _PRIMITIVES[node.primitive]
                input_grads = rule.backward(grad, node.values, node.output, **node.params)
                for input_id, input_grad in zip(node.inputs, input_grads):
                    if input_id is None or input_grad is None:
                        continue
                    if input_id in grads:
                        grads[input_id] = grads[input_id] + input_grad
                    else:
                        grads[input_id] = input_grad

        result: dict[int, Tensor] = {}
        for node_id, node in enumerate(self.nodes):
            if node.primitive != LEAF:
                continue
            grad = grads.get(node_id)
            array = np.zeros_like(node.output) if grad is None else np.array(grad, dtype=np.float64)
            array = array.reshape(node.output.shape)
            array.setflags(write=False)
            result[node_id] = Tensor._wrap(array)
        return result

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of `loss` for `sources`, in order, as arrays."""
        grads = self.backward(loss)
        out: list[np.ndarray] = []
        for source in sources:
            if source._tape is not self or source.node_id not in grads:
                raise ValueError("gradient source was not watched on this tape")
            out.append(grads[source.node_id].data)
        return out

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded primitive from the leaves, in tape order."""
        outputs: list[np.ndarray] = []
        for node in self.nodes:
            if node.primitive == LEAF:
                outputs.append(node.output)
                continue
            values = tuple(
                value if input_id is None else outputs[input_id]
                for input_id, value in zip(node.inputs, node.values)
            )
            outputs.append(np.asarray(_PRIMITIVES[node.primitive].forward(*values, **node.params)))
        return outputs


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Backward pass on the currently active tape."""
    tape = active_tape()
    if tape is None:
        raise NoActiveTapeError("backward requires an active GradientTape")
    return tape.backward(loss)


# ---------------------------------------------------------------------
# Primitive registry
# ---------------------------------------------------------------------


Values = tuple[np.ndarray, ...]
BackwardFn = Callable[..., tuple[np.ndarray | None, ...]]


@dataclass(frozen=True, slots=True)
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    backward: BackwardFn
    check: Callable[..., None]


_PRIMITIVES: dict[str, Primitive] = {}


def _no_check(values: Values, **params: Any) -> None:
    del values, params


def _register(
    name: str, *, backward: BackwardFn, check: Callable[..., None] = _no_check
) -> Callable[[Callable[..., np.ndarray]], Callable[..., np.ndarray]]:
    def decorator(forward: Callable[..., np.ndarray]) -> Callable[..., np.ndarray]:
        _PRIMITIVES[name] = Primitive(name=name, forward=forward, backward=backward, check=check)
        return forward

    return decorator


def primitive_names() -> list[str]:
    return sorted(_PRIMITIVES)


def apply_primitive(name: str, inputs: Sequence[TensorLike], **params: Any) -> Tensor:
    """Evaluate one primitive and record it on the active tape, if any."""
    primitive = _PRIMITIVES.get(name)
    if primitive is None:
        raise UnknownPrimitiveError(name)

    tensors = tuple(as_tensor(item) for item in inputs)
    values = tuple(tensor._data for tensor in tensors)
    primitive.check(values, **params)

    output = np.asarray(primitive.forward(*values, **params), dtype=np.float64)
    if not np.all(np.isfinite(output)):
        raise NonFiniteError(where=name)
    output.setflags(write=False)

    tape = active_tape()
    if tape is not None:
        input_ids = tuple(t.node_id if t._tape is tape else None for t in tensors)
        if any(input_id is not None for input_id in input_ids):
            node_id = tape._record(name, input_ids, values, output, params)
            return Tensor._wrap(output, tape, node_id)
    return Tensor._wrap(output)


# ---------------------------------------------------------------------
# Shape helpers
# ---------------------------------------------------------------------


def one_sided_shape(primitive: str, big: tuple[int, ...], small: tuple[int, ...]) -> tuple[int, ...]:
    """Result shape when one operand expands into the other, else raise.

    Expansion follows numpy rules for the smaller operand only: leading axes
    may be missing and any size-1 axis may grow. Shapes such as (3, 1) and
    (1, 4), which would both have to grow, are rejected.
    """
    if big == small:
        return big
    try:
        out = tuple(np.broadcast_shapes(big, small))
    except ValueError:
        raise ShapeMismatchError(primitive=primitive, shapes=[big, small]) from None
    if out != big and out != small:
        raise ShapeMismatchError(primitive=primitive, shapes=[big, small])
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out the axes that broadcasting expanded so `grad` matches `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_binary(name: str) -> Callable[..., None]:
    def check(values: Values, **params: Any) -> None:
        del params
        a, b = values
        one_sided_shape(name, a.shape, b.shape)

    return check


# ---------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------


def _add_backward(grad: np.ndarray, values: Values, output: np.ndarray) -> tuple[np.ndarray, ...]:
    a, b = values
    return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)


def _sub_backward(grad: np.ndarray, values: Values, output: np.ndarray) -> tuple[np.ndarray, ...]:
    a, b = values
    return unbroadcast(grad, a.shape), unbroadcast(-grad, b.shape)


def _mul_backward(grad: np.ndarray, values: Values, output: np.ndarray) -> tuple[np.ndarray, ...]:
    a, b = values
    return unbroadcast(grad * b, a.shape), unbroadcast(grad * a, b.shape)


def _div_backward(grad: np.ndarray, values: Values, output: np.ndarray) -> tuple[np.ndarray, ...]:
    a, b = values
    return unbroadcast(grad / b, a.shape), unbroadcast(-grad * a / (b * b), b.shape)


@_register("add", backward=_add_backward, check=_check_binary("add"))
def _add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a + b


@_register("sub", backward=_sub_backward, check=_check_binary("sub"))
def _sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a - b


@_register("mul", backward=_mul_backward, check=_check_binary("mul"))
def _mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a * b


@_register("div", backward=_div_backward, check=_check_binary("div"))
def _div(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a / b


# ---------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------


def _check_matmul(values: Values, **params: Any) -> None:
    a, b = values[0], values[1]
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError(primitive="matmul", shapes=[a.shape, b.shape])


def _matmul_backward(grad: np.ndarray, values: Values, output: np.ndarray) -> tuple[np.ndarray, ...]:
    a, b = values
    grad_a = grad @ b.T
    grad_b = a.reshape(-1, b.shape[0]).T @ grad.reshape(-1, b.shape[1])
    return grad_a.reshape(a.shape), grad_b


@_register("matmul", backward=_matmul_backward, check=_check_matmul)
def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b


def _check_affine(values: Values, **params: Any) -> None:
    x, weight, bias = values
    _check_matmul((x, weight))
    if bias.shape != (weight.shape[1],):
        raise ShapeMismatchError(primitive="affine", shapes=[x.shape, weight.shape, bias.shape])


def _affine_backward(grad: np.ndarray, values: Values, output: np.ndarray) -> tuple[np.ndarray, ...]:
    x, weight, _ = values
    flat_grad = grad.reshape(-1, weight.shape[1])
    grad_x = (grad @ weight.T).reshape(x.shape)
    grad_w = x.reshape(-1, weight.shape[0]).T @ flat_grad
    grad_b = flat_grad.sum(axis=0)
    return grad_x, grad_w, grad_b


@_register("affine", backward=_affine_backward, check=_check_affine)
def _affine(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return x @ weight + bias


# ---------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------


def _leaky_relu_backward(
    grad: np.ndarray, values: Values, output: np.ndarray, *, slope: float = 0.2
) -> tuple[np.ndarray, ...]:
    (x,) = values
    # Subgradient at 0 is the negative-side slope.
    return (grad * np.where(x > 0, 1.0, slope),)


@_register("leaky_relu", backward=_leaky_relu_backward)
def _leaky_relu(x: np.ndarray, *, slope: float = 0.2) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def _tanh_backward(grad: np.ndarray, values: Values, output: np.ndarray) -> tuple[np.ndarray, ...]:
    return (grad * (1.0 - output * output),)


@_register("tanh", backward=_tanh_backward)
def _tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def _softplus_backward(grad: np.ndarray, values: Values, output: np.ndarray) -> tuple[np.ndarray, ...]:
    (x,) = values
    return (grad * expit(x),)


@_register("softplus", backward=_softplus_backward)
def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _square_backward(grad: np.ndarray, values: Values, output: np.ndarray) -> tuple[np.ndarray, ...]:
    (x,) = values
    return (2.0 * x * grad,)


@_register("square", backward=_square_backward)
def _square(x: np.ndarray) -> np.ndarray:
    return x * x


# ---------------------------------------------------------------------
# Reductions and layout
# ---------------------------------------------------------------------


def _expand_reduced(grad: np.ndarray, shape: tuple[int, ...], axis: int | tuple[int, ...] | None) -> np.ndarray:
    if axis is not None:
        axes = (axis,) if isinstance(axis, int) else axis
        grad = np.expand_dims(grad, tuple(a % len(shape) for a in axes))
    return np.broadcast_to(grad, shape)


def _sum_backward(
    grad: np.ndarray, values: Values, output: np.ndarray, *, axis: int | tuple[int, ...] | None = None
) -> tuple[np.ndarray, ...]:
    (x,) = values
    return (_expand_reduced(grad, x.shape, axis),)


@_register("sum", backward=_sum_backward)
def _sum(x: np.ndarray, *, axis: int | tuple[int, ...] | None = None) -> np.ndarray:
    return np.sum(x, axis=axis)


def _mean_backward(
    grad: np.ndarray, values: Values, output: np.ndarray, *, axis: int | tuple[int, ...] | None = None
) -> tuple[np.ndarray, ...]:
    (x,) = values
    count = x.size // max(output.size, 1)
    return (_expand_reduced(grad, x.shape, axis) / count,)


@_register("mean", backward=_mean_backward)
def _mean(x: np.ndarray, *, axis: int | tuple[int, ...] | None = None) -> np.ndarray:
    return np.mean(x, axis=axis)


def _check_reshape(values: Values, *, shape: tuple[int, ...]) -> None:
    (x,) = values
    if int(np.prod(shape, dtype=np.int64)) != x.size or any(extent < 0 for extent in shape):
        raise ShapeMismatchError(primitive="reshape", shapes=[x.shape, tuple(shape)])


def _reshape_backward(
    grad: np.ndarray, values: Values, output: np.ndarray, *, shape: tuple[int, ...]
) -> tuple[np.ndarray, ...]:
    (x,) = values
    return (grad.reshape(x.shape),)


@_register("reshape", backward=_reshape_backward, check=_check_reshape)
def _reshape(x: np.ndarray, *, shape: tuple[int, ...]) -> np.ndarray:
    return x.reshape(shape)


def _check_slice(values: Values, *, index: tuple[Any, ...]) -> None:
    (x,) = values
    if len(index) > x.ndim or not all(isinstance(item, (slice, int)) for item in index):
        raise ShapeMismatchError(primitive="slice", shapes=[x.shape])


def _slice_backward(
    grad: np.ndarray, values: Values, output: np.ndarray, *, index: tuple[Any, ...]
) -> tuple[np.ndarray, ...]:
    (x,) = values
    full = np.zeros_like(x)
    full[index] = grad
    return (full,)


@_register("slice", backward=_slice_backward, check=_check_slice)
def _slice(x: np.ndarray, *, index: tuple[Any, ...]) -> np.ndarray:
    return np.array(x[index])


def _check_concat(values: Values, *, axis: int = 0) -> None:
    if not values:
        raise ShapeMismatchError(primitive="concat", shapes=[])
    reference = values[0].shape
    for value in values[1:]:
        if value.ndim != len(reference):
            raise ShapeMismatchError(primitive="concat", shapes=[v.shape for v in values])
        rest = [e for i, e in enumerate(value.shape) if i != axis % len(reference)]
        ref_rest = [e for i, e in enumerate(reference) if i != axis % len(reference)]
        if rest != ref_rest:
            raise ShapeMismatchError(primitive="concat", shapes=[v.shape for v in values])


def _concat_backward(
    grad: np.ndarray, values: Values, output: np.ndarray, *, axis: int = 0
) -> tuple[np.ndarray, ...]:
    boundaries = np.cumsum([value.shape[axis] for value in values])[:-1]
    return tuple(np.split(grad, boundaries, axis=axis))


@_register("concat", backward=_concat_backward, check=_check_concat)
def _concat(*values: np.ndarray, axis: int = 0) -> np.ndarray:
    return np.concatenate(values, axis=axis)


def _check_broadcast(values: Values, *, shape: tuple[int, ...]) -> None:
    (x,) = values
    if one_sided_shape("broadcast", tuple(shape), x.shape) != tuple(shape):
        raise ShapeMismatchError(primitive="broadcast", shapes=[x.shape, tuple(shape)])


def _broadcast_backward(
    grad: np.ndarray, values: Values, output: np.ndarray, *, shape: tuple[int, ...]
) -> tuple[np.ndarray, ...]:
    (x,) = values
    return (unbroadcast(grad, x.shape),)


@_register("broadcast", backward=_broadcast_backward, check=_check_broadcast)
def _broadcast(x: np.ndarray, *, shape: tuple[int, ...]) -> np.ndarray:
    return np.ascontiguousarray(np.broadcast_to(x, shape))


# ---------------------------------------------------------------------
# Image-layout primitives (…, H, W, C)
# ---------------------------------------------------------------------


def _check_image(name: str) -> Callable[..., None]:
    def check(values: Values, **params: Any) -> None:
        (x,) = values
        if x.ndim < 3:
            raise ShapeMismatchError(primitive=name, shapes=[x.shape])

    return check


def _upsample_backward(
    grad: np.ndarray, values: Values, output: np.ndarray, *, factor: int = 2
) -> tuple[np.ndarray, ...]:
    (x,) = values
    *lead, height, width, channels = x.shape
    blocks = grad.reshape(*lead, height, factor, width, factor, channels)
    return (blocks.sum(axis=(-4, -2)),)


@_register("upsample_nearest", backward=_upsample_backward, check=_check_image("upsample_nearest"))
def _upsample_nearest(x: np.ndarray, *, factor: int = 2) -> np.ndarray:
    return np.repeat(np.repeat(x, factor, axis=-3), factor, axis=-2)


@lru_cache(maxsize=16)
def pool_matrix(height: int, width: int) -> np.ndarray:
    """Dense operator for 3x3 average pooling with stride 2 and zero padding 1."""
    out_h, out_w = (height - 1) // 2 + 1, (width - 1) // 2 + 1
    matrix = np.zeros((out_h * out_w, height * width), dtype=np.float64)
    for i in range(out_h):
        for j in range(out_w):
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    row, col = 2 * i + di, 2 * j + dj
                    if 0 <= row < height and 0 <= col < width:
                        matrix[i * out_w + j, row * width + col] = 1.0 / 9.0
    matrix.setflags(write=False)
    return matrix


def _avg_pool_backward(grad: np.ndarray, values: Values, output: np.ndarray) -> tuple[np.ndarray, ...]:
    (x,) = values
    *_, height, width, channels = x.shape
    matrix = pool_matrix(height, width)
    flat_grad = grad.reshape(-1, matrix.shape[0], channels)
    return ((matrix.T @ flat_grad).reshape(x.shape),)


@_register("avg_pool", backward=_avg_pool_backward, check=_check_image("avg_pool"))
def _avg_pool(x: np.ndarray) -> np.ndarray:
    *lead, height, width, channels = x.shape
    matrix = pool_matrix(height, width)
    pooled = matrix @ x.reshape(-1, height * width, channels)
    return pooled.reshape(*lead, (height - 1) // 2 + 1, (width - 1) // 2 + 1, channels)


def _check_masked(values: Values, **params: Any) -> None:
    diff, mask = values
    if one_sided_shape("masked_sum_of_squares", diff.shape, mask.shape) != diff.shape:
        raise ShapeMismatchError(primitive="masked_sum_of_squares", shapes=[diff.shape, mask.shape])


def _masked_backward(grad: np.ndarray, values: Values, output: np.ndarray) -> tuple[np.ndarray, ...]:
    diff, mask = values
    return 2.0 * grad * mask * diff, unbroadcast(grad * diff * diff, mask.shape)


@_register("masked_sum_of_squares", backward=_masked_backward, check=_check_masked)
def _masked_sum_of_squares(diff: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.sum(mask * diff * diff)


# ---------------------------------------------------------------------
# Functional shorthands
# ---------------------------------------------------------------------


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    return apply_primitive("matmul", (a, b))


def affine(x: TensorLike, weight: TensorLike, bias: TensorLike) -> Tensor:
    return apply_primitive("affine", (x, weight, bias))


def leaky_relu(x: TensorLike, slope: float = 0.2) -> Tensor:
    return apply_primitive("leaky_relu", (x,), slope=slope)


def tanh(x: TensorLike) -> Tensor:
    return apply_primitive("tanh", (x,))


def softplus(x: TensorLike) -> Tensor:
    return apply_primitive("softplus", (x,))


def square(x: TensorLike) -> Tensor:
    return apply_primitive("square", (x,))


def reduce_sum(x: TensorLike, axis: int | tuple[int, ...] | None = None) -> Tensor:
    return apply_primitive("sum", (x,), axis=axis)


def reduce_mean(x: TensorLike, axis: int | tuple[int, ...] | None = None) -> Tensor:
    return apply_primitive("mean", (x,), axis=axis)


def reshape(x: TensorLike, shape: Sequence[int]) -> Tensor:
    return apply_primitive("reshape", (x,), shape=tuple(int(e) for e in shape))


def take_slice(x: TensorLike, key: Any) -> Tensor:
    index = key if isinstance(key, tuple) else (key,)
    return apply_primitive("slice", (x,), index=index)


def concat(items: Sequence[TensorLike], axis: int = 0) -> Tensor:
    return apply_primitive("concat", tuple(items), axis=axis)


def broadcast(x: TensorLike, shape: Sequence[int]) -> Tensor:
    return apply_primitive("broadcast", (x,), shape=tuple(int(e) for e in shape))


def upsample_nearest(x: TensorLike, factor: int = 2) -> Tensor:
    return apply_primitive("upsample_nearest", (x,), factor=factor)


def avg_pool(x: TensorLike) -> Tensor:
    return apply_primitive("avg_pool", (x,))


def masked_sum_of_squares(diff: TensorLike, mask: TensorLike) -> Tensor:
    return apply_primitive("masked_sum_of_squares", (diff, mask))


# ---------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------


def _evaluate_scalar(function: Callable[[list[Tensor]], Tensor], arrays: list[np.ndarray]) -> float:
    value = as_tensor(function([Tensor(array) for array in arrays]))
    if value.size != 1:
        raise NonScalarLossError(value.shape)
    result = value.item()
    if not np.isfinite(result):
        raise NonFiniteError(where="finite_diff_check")
    return result


def finite_diff_check(
    function: Callable[[list[Tensor]], Tensor],
    params: Sequence[TensorLike],
    step: float = 1e-5,
    *,
    max_coordinates: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    Error per coordinate is |analytic - numeric| / max(1, |analytic|).
    `max_coordinates` subsamples each parameter's coordinates.
    """
    if step <= 0:
        raise ValueError("step must be > 0")
    arrays = [as_tensor(param).numpy() for param in params]

    with GradientTape() as tape:
        tracked = [tape.watch(array) for array in arrays]
        loss = as_tensor(function(tracked))
    analytic = tape.gradient(loss, tracked)
    _evaluate_scalar(function, arrays)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, base in enumerate(arrays):
        coordinates = np.arange(base.size)
        if max_coordinates is not None and base.size > max_coordinates:
            coordinates = np.sort(rng.choice(base.size, size=max_coordinates, replace=False))
        for flat_index in coordinates:
            shifted = [array.copy() for array in arrays]
            shifted[k].flat[flat_index] = base.flat[flat_index] + step
            f_plus = _evaluate_scalar(function, shifted)
            shifted[k].flat[flat_index] = base.flat[flat_index] - step
            f_minus = _evaluate_scalar(function, shifted)
            numeric = (f_plus - f_minus) / (2.0 * step)
            exact = float(analytic[k].flat[flat_index])
            worst = max(worst, abs(exact - numeric) / max(1.0, abs(exact)))
    return worst
