import numpy
import pandas
import pytest

from remtime.autodiff import Tensor, backward, zero_grad
from remtime.layers import Network, variant_spec
from remtime.losses import mae, objective
from remtime.models import ModelSpec, SynthSpec, TrainConfig
from remtime.synthdata import gen_regression1d, regression_log
from remtime.training import (
    TRAINING_LOG_COLUMNS,
    AdamState,
    DivergedTrainingError,
    EarlyStopping,
    adam_step,
    predict_means,
    train,
)
from remtime.utils import ContractError

REGRESSION_SPEC = ModelSpec(
    conv_channels=[], sequence_length=1, dense_width=16, length_scale=1e-2
)


def regression_split(n: int = 200, seed: int = 0, noise: str = "heteroscedastic"):
    sample = gen_regression1d(SynthSpec(kind="regression1d", n=n, seed=seed, noise=noise))
    split = int(0.8 * n)
    train_log = regression_log(sample.x[:split], sample.y[:split])
    val_log = regression_log(sample.x[split:], sample.y[split:], train_log.standardization)
    return train_log, val_log


def build(spec: ModelSpec = REGRESSION_SPEC, seed: int = 0, train_log=None) -> Network:
    mean = float(train_log.targets.mean()) if train_log is not None else 0.0
    return Network.build(spec, [], 1, seed=seed, target_mean=mean)


def test_adam_converges_on_quadratic():
    x = Tensor([0.0], requires_grad=True)
    state = AdamState()
    for _ in range(500):
        grad = 2 * (x.data - 3.0)
        adam_step([x], [grad], state, lr=0.05)

    assert x.data[0] == pytest.approx(3.0, abs=1e-6)
    assert state.step == 500


def test_adam_zero_gradient_keeps_parameters():
    x = Tensor([1.0, -2.0], requires_grad=True)
    state = AdamState()
    for _ in range(3):
        adam_step([x], [numpy.zeros(2)], state, lr=0.1)

    numpy.testing.assert_array_equal(x.data, [1.0, -2.0])


def test_adam_first_step_has_learning_rate_size():
    x = Tensor([1.0, 1.0], requires_grad=True)
    adam_step([x], [numpy.array([5.0, -0.01])], AdamState(), lr=0.1)

    numpy.testing.assert_allclose(x.data, [0.9, 1.1], atol=1e-5)


def test_adam_rejects_shape_mismatch():
    x = Tensor([1.0, 2.0], requires_grad=True)

    with pytest.raises(ContractError):
        adam_step([x], [numpy.ones(3)], AdamState(), lr=0.1)


def test_early_stopping():
    stopper = EarlyStopping(patience=2)
    improved = [stopper.update(e, v) for e, v in enumerate([5.0, 4.0, 4.5, 4.2], start=1)]

    assert improved == [True, True, False, False]
    assert stopper.best_epoch == 2
    assert not stopper.should_stop(3)
    assert stopper.should_stop(4)


def test_early_stopping_disabled():
    stopper = EarlyStopping(patience=None)
    stopper.update(1, 1.0)

    assert not stopper.should_stop(1000)


def batch_gradients(network: Network, batch, n: int):
    params = network.parameters()
    zero_grad(params)
    loss, _ = objective(network, network.forward(batch), batch.targets, n)
    backward(loss, params)
    return [p.grad.copy() for p in params]


def test_identical_batches_give_identical_updates():
    train_log, _ = regression_split(n=40)
    spec = REGRESSION_SPEC.copy(update={"dropout": "none"})
    network = build(spec, train_log=train_log)
    batch = train_log.batch(numpy.arange(16))

    first = batch_gradients(network, batch, len(train_log))
    second = batch_gradients(network, batch, len(train_log))

    for a, b in zip(first, second):
        numpy.testing.assert_array_equal(a, b)

    params = network.parameters()
    loss, _ = objective(network, network.forward(batch), batch.targets, len(train_log))
    backward(loss, params)
    for param, grad in zip(params, second):
        numpy.testing.assert_allclose(param.grad, 2 * grad)

    updates = []
    for grads in (first, second):
        params = [Tensor(p.data.copy(), requires_grad=True) for p in network.parameters()]
        adam_step(params, grads, AdamState(), lr=1e-2)
        updates.append([p.data for p in params])
    for a, b in zip(*updates):
        numpy.testing.assert_array_equal(a, b)


@pytest.mark.parametrize(("dropout", "changes"), [("concrete", True), ("fixed", False)])
def test_train_dropout_probabilities(dropout, changes):
    train_log, val_log = regression_split(n=100)
    network = build(REGRESSION_SPEC.copy(update={"dropout": dropout}), train_log=train_log)
    before = network.dropout_probabilities()
    report = train(
        network, train_log, val_log, TrainConfig(batch_size=16, max_epochs=3, patience=None)
    )

    assert set(before) == {"dense"}
    assert report.dropout_probabilities == network.dropout_probabilities()
    if changes:
        assert report.dropout_probabilities["dense"] != before["dense"]
    else:
        assert report.dropout_probabilities == before


def test_train_fits_noiseless_linear_target():
    x = numpy.random.default_rng(4).uniform(0.0, 1.0, size=250)
    y = 2.0 * x + 1.0
    train_log = regression_log(x[:200], y[:200])
    val_log = regression_log(x[200:], y[200:], train_log.standardization)
    spec = variant_spec("plain", REGRESSION_SPEC.copy(update={"dense_width": 0}))
    network = build(spec, train_log=train_log)
    cfg = TrainConfig(batch_size=20, max_epochs=200, learning_rate=1e-2, patience=None)
    train(network, train_log, val_log, cfg)

    assert mae(predict_means(network, train_log), train_log.targets) < 0.01


def test_train_learns_and_restores_best_epoch(tmp_path):
    train_log, val_log = regression_split()
    network = build(train_log=train_log)
    cfg = TrainConfig(batch_size=32, max_epochs=40, learning_rate=1e-2, patience=10)
    report = train(network, train_log, val_log, cfg, log_path=tmp_path / "log.csv")

    constant = mae(numpy.full(len(val_log), train_log.targets.mean()), val_log.targets)
    assert report.best_val_mae < constant
    assert mae(predict_means(network, val_log), val_log.targets) == report.best_val_mae
    assert set(report.dropout_probabilities) == {"dense"}

    frame = pandas.read_csv(tmp_path / "log.csv")
    assert list(frame.columns) == TRAINING_LOG_COLUMNS
    assert len(frame) == 2 * len(report.epochs)
    assert set(frame["split"]) == {"train", "validation"}


def test_train_is_deterministic():
    train_log, val_log = regression_split(n=100)
    cfg = TrainConfig(batch_size=16, max_epochs=5, learning_rate=1e-2)
    reports, predictions = [], []
    for _ in range(2):
        network = build(seed=1, train_log=train_log)
        reports.append(train(network, train_log, val_log, cfg))
        predictions.append(predict_means(network, val_log))

    numpy.testing.assert_array_equal(predictions[0], predictions[1])
    first, second = (
        [e.dict(exclude={"seconds"}) for e in r.epochs] for r in reports
    )
    assert first == second


def test_train_patience_zero_stops_after_first_epoch():
    train_log, val_log = regression_split(n=50)
    report = train(
        build(train_log=train_log), train_log, val_log, TrainConfig(patience=0, max_epochs=5)
    )

    assert report.stopped_early
    assert len(report.epochs) == 1
    assert report.best_epoch == 1


def test_train_homoscedastic_estimates_noise():
    train_log, val_log = regression_split(n=100, noise="homoscedastic")
    spec = REGRESSION_SPEC.copy(update={"heteroscedastic": False})
    network = build(spec, train_log=train_log)
    train(network, train_log, val_log, TrainConfig(batch_size=16, max_epochs=3))

    residuals = predict_means(network, val_log) - val_log.targets
    assert network.noise_var == pytest.approx(float(numpy.mean(residuals**2)))


@pytest.mark.parametrize("heteroscedastic", [True, False])
def test_train_writes_checkpoint(tmp_path, heteroscedastic):
    train_log, val_log = regression_split(n=50)
    spec = REGRESSION_SPEC.copy(update={"heteroscedastic": heteroscedastic})
    network = build(spec, train_log=train_log)
    cfg = TrainConfig(max_epochs=2, checkpoint_path=tmp_path / "best.npz")
    train(network, train_log, val_log, cfg)

    restored = Network.load(tmp_path / "best.npz")
    assert restored.spec == network.spec
    assert restored.noise_var == network.noise_var
    numpy.testing.assert_array_equal(
        predict_means(restored, val_log), predict_means(network, val_log)
    )


def test_train_detects_divergence():
    train_log, val_log = regression_split(n=50)
    huge = train_log.copy(update={"targets": numpy.full(len(train_log), 1e200)})

    with pytest.raises(DivergedTrainingError) as error:
        train(build(), huge, val_log, TrainConfig(max_epochs=2))

    assert (error.value.epoch, error.value.batch) == (1, 0)


def test_train_rejects_empty_split():
    train_log, val_log = regression_split(n=50)

    with pytest.raises(ContractError):
        train(build(), train_log, val_log.subset([]), TrainConfig(max_epochs=1))
