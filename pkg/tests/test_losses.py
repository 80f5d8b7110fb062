import math

import numpy
import pytest

from remtime.autodiff import Tensor, backward, grad_check
from remtime.layers import HeteroHeadOutput, LayerParams, Network
from remtime.losses import dropout_regularizer, hetero_nll, mae, objective, regularizer_terms
from remtime.utils import ContractError

from .test_layers import make_batch, small_spec


def test_mae():
    assert mae([1.0, 2.0, 4.0], [2.0, 2.0, 1.0]) == pytest.approx(4.0 / 3.0)
    assert mae(Tensor([1.0]), numpy.array([1.0])) == 0.0


@pytest.mark.parametrize(("pred", "target"), [([], []), ([1.0, 2.0], [1.0])])
def test_mae_rejects(pred, target):
    with pytest.raises(ContractError):
        mae(pred, target)


def test_hetero_nll_without_variance_is_half_mse():
    mean = numpy.array([1.0, 2.5, -0.5])
    target = numpy.array([0.0, 3.0, 1.0])
    loss = hetero_nll(HeteroHeadOutput(mean=Tensor(mean)), target)

    assert loss.item() == numpy.mean(((mean - target) ** 2) * 0.5)


def test_hetero_nll_value():
    out = HeteroHeadOutput(mean=Tensor([1.0, 2.0]), log_variance=Tensor([0.0, math.log(4.0)]))
    loss = hetero_nll(out, numpy.array([3.0, 2.0]))
    expected = (0.5 * 4.0 + 0.0 + 0.0 + 0.5 * math.log(4.0)) / 2

    assert loss.item() == pytest.approx(expected)


@pytest.mark.parametrize("residual", [0.1, 1.0, 3.7])
def test_hetero_nll_minimized_at_squared_residual(residual):
    optimum = math.log(residual**2)

    def slope(s: float) -> float:
        log_variance = Tensor([s], requires_grad=True)
        out = HeteroHeadOutput(mean=Tensor([residual]), log_variance=log_variance)
        backward(hetero_nll(out, numpy.array([0.0])))
        return float(log_variance.grad[0])

    assert abs(slope(optimum)) < 1e-12
    assert slope(optimum - 1e-6) < 0 < slope(optimum + 1e-6)


def concrete_layer(p: float, fan_in: int = 6) -> LayerParams:
    return LayerParams(
        weights={"w": Tensor(numpy.arange(6.0).reshape(2, 3) / 10, requires_grad=True)},
        p_logit=Tensor(math.log(p / (1 - p)), requires_grad=True),
        fan_in=fan_in,
    )


def test_regularizer_terms_concrete():
    layer = concrete_layer(0.2)
    weight, entropy = regularizer_terms([layer], n=50, length_scale=0.1)
    squared = float((layer.weights["w"].data ** 2).sum())

    assert weight.item() == pytest.approx(0.01 / 50 * squared / 0.8)
    assert entropy.item() == pytest.approx(
        6 / 50 * (0.2 * math.log(0.2) + 0.8 * math.log(0.8))
    )


@pytest.mark.parametrize("p", [0.0, 0.05])
def test_regularizer_terms_fixed(p):
    layer = LayerParams(
        weights={"w": Tensor(numpy.ones((2, 2)), requires_grad=True)}, fixed_p=p, fan_in=2
    )
    weight, entropy = regularizer_terms([layer], n=10, length_scale=1.0)

    assert weight.item() == pytest.approx(4.0 / 10 / (1 - p))
    expected = 0.0 if p == 0 else 2 / 10 * (p * math.log(p) + (1 - p) * math.log(1 - p))
    assert entropy.item() == pytest.approx(expected)


def test_dropout_regularizer_sums_layers():
    layers = [concrete_layer(0.1), concrete_layer(0.3, fan_in=12)]
    total = dropout_regularizer(layers, n=20, length_scale=0.5)
    parts = [sum(t.item() for t in regularizer_terms([l], 20, 0.5)) for l in layers]

    assert total.item() == pytest.approx(sum(parts))


def test_entropy_gradient_pushes_towards_half():
    layer = concrete_layer(0.1)
    _, entropy = regularizer_terms([layer], n=1, length_scale=1.0)
    backward(entropy)

    # Minimizing p log p + (1 - p) log(1 - p) raises p below 0.5
    assert layer.p_logit.grad < 0


@pytest.mark.parametrize(("n", "length_scale"), [(0, 1.0), (10, 0.0)])
def test_regularizer_rejects(n, length_scale):
    with pytest.raises(ContractError):
        regularizer_terms([concrete_layer(0.2)], n, length_scale)


def test_objective_breakdown_adds_up():
    network = Network.build(small_spec(), [6], 2, seed=3)
    batch = make_batch()
    out = network.forward(batch, True, numpy.random.default_rng(0))
    total, breakdown = objective(network, out, batch.targets, n=100)

    assert breakdown.total == pytest.approx(total.item())
    assert breakdown.data_term == pytest.approx(hetero_nll(out, batch.targets).item())
    assert breakdown.weight_reg_term > 0
    assert breakdown.dropout_entropy_term < 0


def test_objective_homoscedastic_is_half_mse_plus_regularizer():
    network = Network.build(small_spec(heteroscedastic=False), [6], 2, seed=3)
    batch = make_batch()
    out = network.forward(batch, True, numpy.random.default_rng(0))
    total, _ = objective(network, out, batch.targets, n=100)

    half_mse = numpy.mean(((out.mean.data - batch.targets) ** 2) * 0.5)
    weight, entropy = regularizer_terms(network.dropout_layers().values(), 100, 1e-2)
    assert total.item() == ((Tensor(half_mse) + weight) + entropy).item()


def test_objective_without_dropout_has_no_regularizer():
    network = Network.build(small_spec(dropout="none"), [6], 2, seed=3)
    batch = make_batch()
    out = network.forward(batch)
    total, breakdown = objective(network, out, batch.targets, n=100)

    assert breakdown.weight_reg_term == 0.0
    assert total.item() == hetero_nll(out, batch.targets).item()


@pytest.mark.parametrize(
    ("architecture", "dropout"),
    [("cnn", "concrete"), ("lstm", "concrete"), ("cnn", "fixed"), ("lstm", "none")],
)
def test_objective_gradients(architecture, dropout):
    spec = small_spec(architecture=architecture, dropout=dropout, dropout_p=0.2)
    network = Network.build(spec, [6], 2, seed=5, target_mean=2.0)
    batch = make_batch(size=3)
    assert network.size <= 500

    def f():
        # Same seed, same masks
        out = network.forward(batch, True, numpy.random.default_rng(7))
        return objective(network, out, batch.targets, n=30)[0]

    report = grad_check(f, network.parameters(), tolerance=1e-3)
    assert report.passed
    strict = {k: v for k, v in report.errors.items() if not k.endswith("p_logit")}
    assert max(strict.values()) < 1e-4
