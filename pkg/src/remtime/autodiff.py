"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every `Tensor` produced by a primitive remembers the `Op` that made it and
its parent tensors, but only when one of the parents takes part in a
gradient computation. A `Graph` is the topologically ordered set of tensors
an output depends on; it can be re-evaluated with new leaf values and
differentiated with `backward`.
"""
import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy
from pydantic import BaseModel

from remtime.utils import ContractError, RemtimeError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

ArrayLike = Union[numpy.ndarray, float, int, Sequence]


class DimensionError(RemtimeError, ValueError):
    """Error thrown when the shapes of a primitive's inputs are incompatible."""


class CheckpointError(RemtimeError):
    """Error thrown when a weight checkpoint cannot be read."""


def unbroadcast(grad: numpy.ndarray, shape: Tuple[int, ...]) -> numpy.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Op:
    """A differentiable primitive.

    `forward` maps input arrays to an output array; `backward` maps the
    gradient of the output to one gradient per input.
    """

    name = "op"

    def forward(self, *values: numpy.ndarray) -> numpy.ndarray:  # noqa: D102
        raise NotImplementedError

    def backward(  # noqa: D102
        self, grad: numpy.ndarray, values: List[numpy.ndarray], out: numpy.ndarray
    ) -> List[numpy.ndarray]:
        raise NotImplementedError

    def __call__(self, *parents: "Tensor") -> "Tensor":
        """Apply the primitive and record it if a parent is tracked."""
        out = Tensor(self.forward(*[p.data for p in parents]))
        if any(p.tracked for p in parents):
            out._op = self
            out._parents = tuple(parents)
        return out


class _Broadcasting(Op):
    def _check(self, a: numpy.ndarray, b: numpy.ndarray):
        try:
            numpy.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise DimensionError(
                f"{self.name}: shapes {a.shape} and {b.shape} do not broadcast."
            )


class Add(_Broadcasting):  # noqa: D101
    name = "add"

    def forward(self, a, b):  # noqa: D102
        self._check(a, b)
        return a + b

    def backward(self, grad, values, out):  # noqa: D102
        a, b = values
        return [unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)]


class Sub(_Broadcasting):  # noqa: D101
    name = "sub"

    def forward(self, a, b):  # noqa: D102
        self._check(a, b)
        return a - b

    def backward(self, grad, values, out):  # noqa: D102
        a, b = values
        return [unbroadcast(grad, a.shape), unbroadcast(-grad, b.shape)]


class Mul(_Broadcasting):  # noqa: D101
    name = "multiply"

    def forward(self, a, b):  # noqa: D102
        self._check(a, b)
        return a * b

    def backward(self, grad, values, out):  # noqa: D102
        a, b = values
        return [unbroadcast(grad * b, a.shape), unbroadcast(grad * a, b.shape)]


class Div(_Broadcasting):  # noqa: D101
    name = "divide"

    def forward(self, a, b):  # noqa: D102
        self._check(a, b)
        return a / b

    def backward(self, grad, values, out):  # noqa: D102
        a, b = values
        return [unbroadcast(grad / b, a.shape), unbroadcast(-grad * a / b**2, b.shape)]


class Pow(Op):
    """Power with a constant exponent."""

    name = "power"

    def __init__(self, exponent: float):
        self.exponent = exponent

    def forward(self, a):  # noqa: D102
        return a**self.exponent

    def backward(self, grad, values, out):  # noqa: D102
        (a,) = values
        return [grad * self.exponent * a ** (self.exponent - 1)]


class Neg(Op):  # noqa: D101
    name = "negate"

    def forward(self, a):  # noqa: D102
        return -a

    def backward(self, grad, values, out):  # noqa: D102
        return [-grad]


class MatMul(Op):
    """Product of two 2-D arrays."""

    name = "matmul"

    def forward(self, a, b):  # noqa: D102
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(
                f"{self.name}: cannot multiply {a.shape} by {b.shape}."
            )
        return a @ b

    def backward(self, grad, values, out):  # noqa: D102
        a, b = values
        return [grad @ b.T, a.T @ grad]


class Exp(Op):  # noqa: D101
    name = "exp"

    def forward(self, a):  # noqa: D102
        return numpy.exp(a)

    def backward(self, grad, values, out):  # noqa: D102
        return [grad * out]


class Log(Op):  # noqa: D101
    name = "log"

    def forward(self, a):  # noqa: D102
        return numpy.log(a)

    def backward(self, grad, values, out):  # noqa: D102
        return [grad / values[0]]


class Sigmoid(Op):  # noqa: D101
    name = "sigmoid"

    def forward(self, a):  # noqa: D102
        # exp of a non-positive argument only
        e = numpy.exp(-numpy.abs(a))
        return numpy.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(self, grad, values, out):  # noqa: D102
        return [grad * out * (1.0 - out)]


class Softplus(Op):
    """log(1 + exp(a))."""

    name = "softplus"

    def forward(self, a):  # noqa: D102
        return numpy.logaddexp(0.0, a)

    def backward(self, grad, values, out):  # noqa: D102
        return [grad * Sigmoid().forward(values[0])]


class Tanh(Op):  # noqa: D101
    name = "tanh"

    def forward(self, a):  # noqa: D102
        return numpy.tanh(a)

    def backward(self, grad, values, out):  # noqa: D102
        return [grad * (1.0 - out**2)]


class Relu(Op):  # noqa: D101
    name = "relu"

    def forward(self, a):  # noqa: D102
        return numpy.maximum(a, 0.0)

    def backward(self, grad, values, out):  # noqa: D102
        return [grad * (values[0] > 0)]


class Sum(Op):  # noqa: D101
    name = "sum"

    def __init__(self, axis=None, keepdims: bool = False):
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, a):  # noqa: D102
        return numpy.asarray(a.sum(axis=self.axis, keepdims=self.keepdims))

    def backward(self, grad, values, out):  # noqa: D102
        (a,) = values
        if self.axis is not None and not self.keepdims:
            grad = numpy.expand_dims(grad, self.axis)
        return [numpy.broadcast_to(grad, a.shape).copy()]


class Mean(Sum):  # noqa: D101
    name = "mean"

    def forward(self, a):  # noqa: D102
        if a.size == 0:
            raise DimensionError(f"{self.name}: empty input.")
        return numpy.asarray(a.mean(axis=self.axis, keepdims=self.keepdims))

    def backward(self, grad, values, out):  # noqa: D102
        (a,) = values
        count = a.size / max(out.size, 1)
        return [g / count for g in super().backward(grad, values, out)]


class Reshape(Op):  # noqa: D101
    name = "reshape"

    def __init__(self, shape: Tuple[int, ...]):
        self.shape = shape

    def forward(self, a):  # noqa: D102
        try:
            return a.reshape(self.shape)
        except ValueError:
            raise DimensionError(f"{self.name}: cannot reshape {a.shape} to {self.shape}.")

    def backward(self, grad, values, out):  # noqa: D102
        return [grad.reshape(values[0].shape)]


class Slice(Op):  # noqa: D101
    name = "slice"

    def __init__(self, index):
        self.index = index

    def forward(self, a):  # noqa: D102
        try:
            return numpy.array(a[self.index])
        except IndexError as error:
            raise DimensionError(f"{self.name}: {error}")

    def backward(self, grad, values, out):  # noqa: D102
        full = numpy.zeros_like(values[0])
        numpy.add.at(full, self.index, grad)
        return [full]


class Concat(Op):  # noqa: D101
    name = "concat"

    def __init__(self, axis: int = -1):
        self.axis = axis

    def forward(self, *values):  # noqa: D102
        try:
            return numpy.concatenate(values, axis=self.axis)
        except ValueError as error:
            raise DimensionError(f"{self.name}: {error}")

    def backward(self, grad, values, out):  # noqa: D102
        sizes = [v.shape[self.axis] for v in values]
        return numpy.split(grad, numpy.cumsum(sizes)[:-1], axis=self.axis)


class Conv1d(Op):
    """Valid 1-D cross-correlation.

    Input `[batch, length, in_channels]`, kernel `[width, in_channels,
    out_channels]`, output `[batch, length - width + 1, out_channels]`.
    """

    name = "conv1d"

    def forward(self, x, w):  # noqa: D102
        if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
            raise DimensionError(
                f"{self.name}: input {x.shape} does not fit kernel {w.shape}."
            )
        if w.shape[0] > x.shape[1]:
            raise DimensionError(
                f"{self.name}: kernel width {w.shape[0]} exceeds length {x.shape[1]}."
            )
        windows = numpy.lib.stride_tricks.sliding_window_view(x, w.shape[0], axis=1)
        return numpy.einsum("blck,kco->blo", windows, w)

    def backward(self, grad, values, out):  # noqa: D102
        x, w = values
        width = w.shape[0]
        windows = numpy.lib.stride_tricks.sliding_window_view(x, width, axis=1)
        dw = numpy.einsum("blck,blo->kco", windows, grad)
        dx = numpy.zeros_like(x)
        steps = grad.shape[1]
        for k in range(width):
            dx[:, k : k + steps, :] += grad @ w[k].T
        return [dx, dw]


class GatherRows(Op):
    """Rows of a `[rows, columns]` table selected by an integer array."""

    name = "gather_rows"

    def __init__(self, indices: numpy.ndarray):
        self.indices = numpy.asarray(indices, dtype=numpy.int64)

    def forward(self, table):  # noqa: D102
        if table.ndim != 2:
            raise DimensionError(f"{self.name}: table must be 2-D, got {table.shape}.")
        if self.indices.size and (
            self.indices.min() < 0 or self.indices.max() >= table.shape[0]
        ):
            raise DimensionError(
                f"{self.name}: index out of range for {table.shape[0]} rows."
            )
        return table[self.indices]

    def backward(self, grad, values, out):  # noqa: D102
        full = numpy.zeros_like(values[0])
        numpy.add.at(full, self.indices, grad)
        return [full]


class Tensor:
    """A float64 array that can take part in gradient computations."""

    def __init__(
        self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None
    ):
        self.data = numpy.array(data, dtype=numpy.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[numpy.ndarray] = None
        self._op: Optional[Op] = None
        self._parents: Tuple["Tensor", ...] = ()

    def __repr__(self):  # noqa
        label = f"{self.name}, " if self.name else ""
        return f"Tensor({label}shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        """Array shape."""
        return self.data.shape

    @property
    def ndim(self) -> int:
        """Number of dimensions."""
        return self.data.ndim

    @property
    def size(self) -> int:
        """Number of elements."""
        return self.data.size

    @property
    def tracked(self) -> bool:
        """Whether gradients flow through this tensor."""
        return self.requires_grad or self._op is not None

    def item(self) -> float:
        """Value of a one-element tensor."""
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> numpy.ndarray:
        """Copy of the values."""
        return self.data.copy()

    def __add__(self, other):  # noqa
        return Add()(self, lift(other))

    def __radd__(self, other):  # noqa
        return Add()(lift(other), self)

    def __sub__(self, other):  # noqa
        return Sub()(self, lift(other))

    def __rsub__(self, other):  # noqa
        return Sub()(lift(other), self)

    def __mul__(self, other):  # noqa
        return Mul()(self, lift(other))

    def __rmul__(self, other):  # noqa
        return Mul()(lift(other), self)

    def __truediv__(self, other):  # noqa
        return Div()(self, lift(other))

    def __rtruediv__(self, other):  # noqa
        return Div()(lift(other), self)

    def __neg__(self):  # noqa
        return Neg()(self)

    def __pow__(self, exponent: float):  # noqa
        return Pow(exponent)(self)

    def __matmul__(self, other):  # noqa
        return MatMul()(self, lift(other))

    def __getitem__(self, index):  # noqa
        return Slice(index)(self)

    def exp(self) -> "Tensor":  # noqa: D102
        return Exp()(self)

    def log(self) -> "Tensor":  # noqa: D102
        return Log()(self)

    def sigmoid(self) -> "Tensor":  # noqa: D102
        return Sigmoid()(self)

    def softplus(self) -> "Tensor":  # noqa: D102
        return Softplus()(self)

    def tanh(self) -> "Tensor":  # noqa: D102
        return Tanh()(self)

    def relu(self) -> "Tensor":  # noqa: D102
        return Relu()(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":  # noqa: D102
        return Sum(axis, keepdims)(self)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":  # noqa: D102
        return Mean(axis, keepdims)(self)

    def reshape(self, *shape: int) -> "Tensor":  # noqa: D102
        return Reshape(tuple(shape))(self)


def lift(value: Union[Tensor, ArrayLike]) -> Tensor:
    """Wrap a constant as an untracked tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join tensors along `axis`."""
    return Concat(axis)(*tensors)


def conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Valid 1-D cross-correlation, see `Conv1d`."""
    return Conv1d()(x, kernel)


def gather_rows(table: Tensor, indices: numpy.ndarray) -> Tensor:
    """Select rows of `table`; the output has shape `indices.shape + (columns,)`."""
    return GatherRows(indices)(table)


def _topological(output: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(output, False)]
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


class Graph:
    """The recorded computation behind an output tensor.

    `nodes` lists every tensor the output depends on, each after all of its
    inputs. Untracked constants are included as leaves.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = _topological(output)

    def __len__(self):  # noqa
        return len(self.nodes)

    @property
    def leaves(self) -> List[Tensor]:
        """Tensors without a recorded primitive."""
        return [n for n in self.nodes if n._op is None]

    @property
    def parameters(self) -> List[Tensor]:
        """Leaves that require gradients."""
        return [n for n in self.leaves if n.requires_grad]

    def forward(
        self, inputs: Optional[Mapping[Union[Tensor, str], ArrayLike]] = None
    ) -> Tensor:
        """Re-evaluate the graph after replacing leaf values.

        Args:
            inputs: New values keyed by leaf tensor or leaf name.

        Returns:
            The output tensor with updated values.
        """
        by_name = {n.name: n for n in self.leaves if n.name is not None}
        for key, value in (inputs or {}).items():
            leaf = by_name[key] if isinstance(key, str) else key
            leaf.data = numpy.array(value, dtype=numpy.float64)
        for node in self.nodes:
            if node._op is not None:
                node.data = node._op.forward(*[p.data for p in node._parents])
        return self.output


def forward(
    graph: Graph, inputs: Optional[Mapping[Union[Tensor, str], ArrayLike]] = None
) -> Tensor:
    """Evaluate `graph` with optional new leaf values."""
    return graph.forward(inputs)


def backward(output: Tensor, params: Optional[Sequence[Tensor]] = None) -> Graph:
    """Accumulate d(output)/d(leaf) into `.grad` of every leaf requiring it.

    Args:
        output: A tensor of shape `[]` or `[1]`.
        params: Tensors that must hold a gradient afterwards; those not
            reached from `output` get a zero gradient.

    Raises:
        ContractError: The output is not a scalar.

    Returns:
        The differentiated graph.
    """
    if output.size != 1 or output.ndim > 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}.")

    graph = Graph(output)
    grads: Dict[int, numpy.ndarray] = {id(output): numpy.ones_like(output.data)}
    for node in reversed(graph.nodes):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._op is None:
            if node.requires_grad:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        values = [p.data for p in node._parents]
        for parent, parent_grad in zip(
            node._parents, node._op.backward(grad, values, node.data)
        ):
            if not parent.tracked:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad

    for param in params or []:
        if param.grad is None:
            param.grad = numpy.zeros_like(param.data)

    return graph


def zero_grad(params: Sequence[Tensor]):
    """Reset the gradients of `params` to zero."""
    for param in params:
        param.grad = numpy.zeros_like(param.data)


class GradCheckReport(BaseModel):
    """Largest relative gradient error per parameter."""

    errors: Dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        """Largest error over all parameters."""
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        """Whether every error is below the tolerance."""
        return self.max_error < self.tolerance


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-6,
    tolerance: float = 1e-4,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    `f` must rebuild the scalar output from the current values of `params`
    and must be deterministic, so stochastic nodes have to reuse their
    random draws.

    Args:
        f: Builds the scalar output.
        params: Leaf tensors to check.
        step: Finite difference step.
        tolerance: Relative error reported as acceptable.
        floor: Lower bound of the relative error denominator.

    Returns:
        The largest relative error per parameter.
    """
    zero_grad(params)
    backward(f(), params)
    analytic = [p.grad.copy() for p in params]

    errors = {}
    for i, (param, exact) in enumerate(zip(params, analytic)):
        flat = param.data.reshape(-1)
        worst = 0.0
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + step
            plus = f().item()
            flat[j] = original - step
            minus = f().item()
            flat[j] = original
            numeric = (plus - minus) / (2 * step)
            a = exact.reshape(-1)[j]
            error = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, error)
        errors[param.name or f"param{i}"] = worst

    report = GradCheckReport(errors=errors, tolerance=tolerance)
    logger.debug(f"Gradient check: max relative error {report.max_error:.3e}.")
    return report


def save_checkpoint(
    path: Union[str, Path], tensors: Mapping[str, Union[Tensor, numpy.ndarray]], header: dict
):
    """Write named arrays plus a JSON header to an npz file."""
    payload = {"version": CHECKPOINT_VERSION, **header}
    payload["shapes"] = {
        k: list(v.shape) for k, v in tensors.items()
    }
    arrays = {
        k: (v.data if isinstance(v, Tensor) else numpy.asarray(v))
        for k, v in tensors.items()
    }
    with open(path, "wb") as fw:
        numpy.savez(fw, __header__=numpy.array(json.dumps(payload)), **arrays)


def load_checkpoint(path: Union[str, Path]) -> Tuple[dict, Dict[str, numpy.ndarray]]:
    """Read a checkpoint written by `save_checkpoint`.

    Raises:
        CheckpointError: Missing file, missing header, unknown version or a
            shape differing from the header.

    Returns:
        The header and the named arrays.
    """
    try:
        with numpy.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as error:
        raise CheckpointError(f"Cannot read checkpoint {path}: {error}")

    if "__header__" not in arrays:
        raise CheckpointError(f"{path} has no checkpoint header.")
    header = json.loads(str(arrays.pop("__header__")))
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"Unsupported checkpoint version {header.get('version')} in {path}."
        )
    for key, shape in header.get("shapes", {}).items():
        if key not in arrays or list(arrays[key].shape) != shape:
            raise CheckpointError(f"Tensor '{key}' is missing or has the wrong shape.")

    return header, arrays
