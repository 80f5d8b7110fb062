import numpy
import pytest

from remtime import autodiff
from remtime.autodiff import (
    CheckpointError,
    DimensionError,
    Graph,
    Tensor,
    backward,
    concat,
    conv1d,
    gather_rows,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    zero_grad,
)
from remtime.utils import ContractError


def param(shape, seed: int = 0, name: str = "w", positive: bool = False) -> Tensor:
    rng = numpy.random.default_rng(seed)
    data = rng.uniform(0.5, 1.5, size=shape) if positive else rng.normal(size=shape)
    return Tensor(data, requires_grad=True, name=name)


def test_quadratic_gradient():
    w = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    loss = (w * w).sum()
    backward(loss)

    numpy.testing.assert_allclose(w.grad, [2.0, -4.0, 6.0])


def test_shared_node_accumulates():
    x = Tensor(3.0, requires_grad=True)
    y = x * x
    z = y + y * x
    backward(z)

    # z = x^2 + x^3
    assert x.grad == pytest.approx(2 * 3 + 3 * 9)


def test_backward_accumulates_until_zero_grad():
    x = Tensor(2.0, requires_grad=True)
    backward(x * 3.0)
    backward(x * 3.0)
    assert x.grad == pytest.approx(6.0)

    zero_grad([x])
    assert x.grad == pytest.approx(0.0)


def test_constants_are_not_recorded():
    a = Tensor([1.0, 2.0])
    out = a * 2.0 + 1.0

    assert out._op is None
    assert not out.tracked


def test_unreached_params_get_zero_gradient():
    used = Tensor(1.0, requires_grad=True)
    unused = Tensor([1.0, 2.0], requires_grad=True)
    backward(used * 2.0, [used, unused])

    numpy.testing.assert_array_equal(unused.grad, [0.0, 0.0])


def test_backward_requires_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)

    with pytest.raises(ContractError):
        backward(w * 2.0)


@pytest.mark.parametrize(
    ("a", "b"),
    [((2, 3), (3,)), ((2, 1), (1, 4)), ((3,), ())],
)
def test_broadcast_gradients_keep_shapes(a, b):
    x = param(a, 1, "x")
    y = param(b, 2, "y")
    backward((x * y + x / (y * y + 1.0) - y).sum())

    assert x.grad.shape == x.shape
    assert y.grad.shape == y.shape


@pytest.mark.parametrize(
    ("op", "a", "b"),
    [
        ("add", (2, 3), (4,)),
        ("multiply", (2, 3), (2,)),
        ("matmul", (2, 3), (2, 3)),
    ],
)
def test_dimension_errors_name_the_primitive(op, a, b):
    x, y = Tensor(numpy.ones(a)), Tensor(numpy.ones(b))

    with pytest.raises(DimensionError, match=op):
        if op == "add":
            x + y
        elif op == "multiply":
            x * y
        else:
            x @ y


UNARY = {
    "exp": lambda t: t.exp(),
    "log": lambda t: t.log(),
    "sigmoid": lambda t: t.sigmoid(),
    "softplus": lambda t: t.softplus(),
    "tanh": lambda t: t.tanh(),
    "power": lambda t: t**3,
    "divide": lambda t: 1.0 / t,
    "mean_axis": lambda t: t.mean(axis=0),
    "sum_keepdims": lambda t: t.sum(axis=1, keepdims=True) * t,
    "reshape": lambda t: t.reshape(6),
    "slice": lambda t: t[:, 1:],
}


@pytest.mark.parametrize("name", list(UNARY))
def test_unary_gradients(name):
    w = param((2, 3), name=name, positive=True)
    weights = Tensor(numpy.linspace(-1, 1, 6))

    def f():
        out = UNARY[name](w)
        return (out.reshape(out.size) * weights[: out.size]).sum()

    assert grad_check(f, [w]).passed


def test_relu_gradient_away_from_kink():
    w = Tensor([-1.0, 0.5, 2.0], requires_grad=True)
    backward(w.relu().sum())

    numpy.testing.assert_array_equal(w.grad, [0.0, 1.0, 1.0])


def test_matmul_concat_gradients():
    a = param((3, 4), 1, "a")
    b = param((4, 2), 2, "b")
    c = param((3, 1), 3, "c")

    def f():
        return (concat([a @ b, c], axis=1).tanh() ** 2).sum()

    assert grad_check(f, [a, b, c]).passed


def test_conv1d_matches_loop():
    x = param((2, 6, 3), 1, "x")
    k = param((3, 3, 4), 2, "k")
    out = conv1d(x, k).data

    expected = numpy.zeros((2, 4, 4))
    for t in range(4):
        expected[:, t] = numpy.einsum("bkc,kco->bo", x.data[:, t : t + 3], k.data)
    numpy.testing.assert_allclose(out, expected)


def test_conv1d_gradient():
    x = param((2, 5, 2), 1, "x")
    k = param((2, 2, 3), 2, "k")

    def f():
        return (conv1d(x, k).sigmoid()).sum()

    assert grad_check(f, [x, k]).passed


def test_conv1d_kernel_too_wide():
    with pytest.raises(DimensionError, match="conv1d"):
        conv1d(Tensor(numpy.ones((1, 2, 1))), Tensor(numpy.ones((3, 1, 1))))


def test_gather_rows_gradient():
    table = param((5, 2), 1, "table")
    indices = numpy.array([[0, 3], [3, 4]])

    def f():
        return (gather_rows(table, indices) ** 2).sum()

    assert grad_check(f, [table]).passed
    backward(f())
    numpy.testing.assert_array_equal(table.grad[1], [0.0, 0.0])


def test_gather_rows_out_of_range():
    with pytest.raises(DimensionError):
        gather_rows(Tensor(numpy.ones((3, 2))), numpy.array([3]))


def test_graph_forward_reuses_structure():
    x = Tensor(2.0, requires_grad=True, name="x")
    y = x * x + 1.0
    graph = Graph(y)

    assert graph.forward({"x": 3.0}).item() == pytest.approx(10.0)
    assert autodiff.forward(graph, {x: 4.0}).item() == pytest.approx(17.0)
    assert graph.parameters == [x]


def test_graph_order_is_topological():
    x = Tensor(1.0, requires_grad=True)
    out = ((x * 2.0).exp() + x).log()
    graph = Graph(out)
    position = {id(n): i for i, n in enumerate(graph.nodes)}

    for node in graph.nodes:
        for parent in node._parents:
            assert position[id(parent)] < position[id(node)]


def test_deep_chain_does_not_recurse():
    x = Tensor(1.0, requires_grad=True)
    out = x
    for _ in range(5000):
        out = out * 1.0
    backward(out)

    assert x.grad == pytest.approx(1.0)


def test_checkpoint_round_trip(tmp_path):
    w = param((2, 3))
    save_checkpoint(tmp_path / "ckpt.npz", {"w": w}, {"kind": "test"})
    header, arrays = load_checkpoint(tmp_path / "ckpt.npz")

    assert header["kind"] == "test"
    numpy.testing.assert_array_equal(arrays["w"], w.data)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.npz")

    numpy.savez(tmp_path / "plain.npz", w=numpy.ones(2))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "plain.npz")
