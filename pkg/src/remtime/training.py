"""Mini-batch training with Adam and early stopping on validation MAE."""
import logging
import time
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy
import pandas
from pydantic import BaseModel
from tqdm import trange
from tqdm.contrib.logging import logging_redirect_tqdm

from remtime.autodiff import Tensor, backward, zero_grad
from remtime.eventlog import EncodedLog
from remtime.layers import Network
from remtime.losses import mae, objective
from remtime.models import EpochRecord, LossBreakdown, TrainConfig, TrainReport
from remtime.utils import ContractError, RemtimeError, spawn_generators

logger = logging.getLogger(__name__)

TRAINING_LOG_COLUMNS = [
    "epoch",
    "split",
    "data_term",
    "weight_reg_term",
    "dropout_entropy_term",
    "total",
    "mae",
]


class DivergedTrainingError(RemtimeError):
    """Error thrown when the training loss stops being finite."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class AdamState(BaseModel):
    """First and second moment estimates, one array per parameter."""

    step: int = 0
    m: List[numpy.ndarray] = []
    v: List[numpy.ndarray] = []
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    class Config:  # noqa: D106
        arbitrary_types_allowed = True


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[numpy.ndarray],
    state: AdamState,
    lr: float,
) -> AdamState:
    """Apply one bias-corrected Adam update to `params` in place.

    Raises:
        ContractError: A gradient does not match its parameter.

    Returns:
        The updated state (the same object).
    """
    if not state.m:
        state.m = [numpy.zeros_like(p.data) for p in params]
        state.v = [numpy.zeros_like(p.data) for p in params]

    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad.shape != param.shape:
            raise ContractError(
                f"Gradient shape {grad.shape} does not match parameter {param.shape}."
            )
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad**2
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        param.data -= lr * m_hat / (numpy.sqrt(v_hat) + state.eps)

    return state


class EarlyStopping:
    """Track the best validation score and decide when to stop.

    Training stops once `patience` epochs have passed without improving on
    the best epoch. A patience of None never stops.
    """

    def __init__(self, patience: Optional[int]):
        self.patience = patience
        self.best = numpy.inf
        self.best_epoch = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record an epoch score; True if it is a new best."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            return True
        return False

    def should_stop(self, epoch: int) -> bool:
        """Whether training should end after `epoch`."""
        if self.patience is None:
            return False
        return epoch - self.best_epoch >= self.patience


def predict_means(
    network: Network, log: EncodedLog, batch_size: int = 1024
) -> numpy.ndarray:
    """Deterministic mean predictions of a whole encoded log, in chunks."""
    means = [
        network.forward(log.batch(numpy.arange(lo, min(lo + batch_size, len(log))))).mean.data
        for lo in range(0, len(log), batch_size)
    ]
    return numpy.concatenate(means) if means else numpy.zeros(0)


def train(
    network: Network,
    train_log: EncodedLog,
    val_log: EncodedLog,
    cfg: TrainConfig,
    log_path: Optional[Union[str, Path]] = None,
) -> TrainReport:
    """Fit `network` in place and keep the weights of the best validation epoch.

    Dropout masks are drawn in every training pass; validation uses
    deterministic passes. Homoscedastic networks store the validation mean
    squared error as their noise variance.

    Args:
        network: Network to fit.
        train_log: Encoded training prefixes.
        val_log: Encoded validation prefixes.
        cfg: Training settings.
        log_path: Optional CSV file receiving one row per epoch and split.

    Raises:
        ContractError: An empty split.
        DivergedTrainingError: The loss became non-finite.

    Returns:
        Per-epoch losses and the best epoch.
    """
    if len(train_log) == 0 or len(val_log) == 0:
        raise ContractError("Training needs non-empty training and validation splits.")

    shuffle_rng, mask_rng = spawn_generators(cfg.seed, 2)
    params = network.parameters()
    state = AdamState()
    stopper = EarlyStopping(cfg.patience)
    n = len(train_log)

    epochs: List[EpochRecord] = []
    rows: List[dict] = []
    best_snapshot = network.snapshot()
    stopped_early = False

    with logging_redirect_tqdm():
        for epoch in trange(
            1, cfg.max_epochs + 1, desc="epochs", disable=not cfg.progress
        ):
            started = time.perf_counter()
            order = shuffle_rng.permutation(n)
            totals = numpy.zeros(3)
            abs_error = 0.0
            for b, lo in enumerate(range(0, n, cfg.batch_size)):
                batch = train_log.batch(order[lo : lo + cfg.batch_size])
                zero_grad(params)
                out = network.forward(batch, stochastic=True, rng=mask_rng)
                loss, breakdown = objective(network, out, batch.targets, n)
                if not numpy.isfinite(loss.item()):
                    raise DivergedTrainingError(
                        f"Loss is {loss.item()} at epoch {epoch}, batch {b}.",
                        epoch=epoch,
                        batch=b,
                    )
                backward(loss, params)
                adam_step(params, [p.grad for p in params], state, cfg.learning_rate)

                totals += len(batch) * numpy.array(
                    [
                        breakdown.data_term,
                        breakdown.weight_reg_term,
                        breakdown.dropout_entropy_term,
                    ]
                )
                abs_error += float(numpy.abs(out.mean.data - batch.targets).sum())

            totals /= n
            train_loss = LossBreakdown(
                data_term=totals[0],
                weight_reg_term=totals[1],
                dropout_entropy_term=totals[2],
            )
            val_mae = mae(predict_means(network, val_log), val_log.targets)
            record = EpochRecord(
                epoch=epoch,
                train=train_loss,
                train_mae=abs_error / n,
                val_mae=val_mae,
                seconds=time.perf_counter() - started,
            )
            epochs.append(record)
            logger.info(
                f"Epoch {epoch}: loss {train_loss.total:.4f}, "
                + f"train MAE {record.train_mae:.4f}, validation MAE {val_mae:.4f}"
            )

            rows.append({"epoch": epoch, "split": "train", **train_loss.dict(), "mae": record.train_mae})
            rows.append({"epoch": epoch, "split": "validation", "mae": val_mae})
            if log_path is not None:
                pandas.DataFrame(rows, columns=TRAINING_LOG_COLUMNS).to_csv(
                    log_path, index=False
                )

            if stopper.update(epoch, val_mae):
                best_snapshot = network.snapshot()
                if cfg.checkpoint_path is not None:
                    network.save(cfg.checkpoint_path)
            if stopper.should_stop(epoch):
                stopped_early = True
                logger.info(
                    f"Stopping after epoch {epoch}, best epoch was {stopper.best_epoch}."
                )
                break

    network.restore(best_snapshot)
    if not network.spec.heteroscedastic:
        residuals = predict_means(network, val_log) - val_log.targets
        network.noise_var = float(numpy.mean(residuals**2))
        if cfg.checkpoint_path is not None:
            network.save(cfg.checkpoint_path)

    return TrainReport(
        epochs=epochs,
        best_epoch=stopper.best_epoch,
        best_val_mae=stopper.best,
        dropout_probabilities=network.dropout_probabilities(),
        stopped_early=stopped_early,
    )
