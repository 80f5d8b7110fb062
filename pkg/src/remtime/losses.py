"""Training objectives.

The data term is the Gaussian negative log-likelihood with a learned
log-variance; the dropout regularizer adds the weight decay and dropout
entropy terms that turn it into a variational objective.
"""
from typing import Iterable, Tuple, Union

import numpy

from remtime.autodiff import Tensor
from remtime.layers import HeteroHeadOutput, LayerParams, Network
from remtime.models import LossBreakdown
from remtime.utils import ContractError


def _values(x: Union[Tensor, numpy.ndarray, list]) -> numpy.ndarray:
    return x.data if isinstance(x, Tensor) else numpy.asarray(x, dtype=float)


def mae(pred, target) -> float:
    """Mean absolute error.

    Raises:
        ContractError: Empty or differently sized inputs.
    """
    pred, target = _values(pred).reshape(-1), _values(target).reshape(-1)
    if pred.size == 0 or pred.size != target.size:
        raise ContractError(
            f"mae needs equal non-empty inputs, got {pred.size} and {target.size}."
        )
    return float(numpy.abs(pred - target).mean())


def hetero_nll(out: HeteroHeadOutput, target: numpy.ndarray) -> Tensor:
    """Mean of 0.5 * exp(-s) * (y - mu)^2 + 0.5 * s with s = log variance.

    Without a log-variance output this is half the mean squared error.
    """
    squared = (out.mean - numpy.asarray(target, dtype=float)) ** 2
    if out.log_variance is None:
        return (squared * 0.5).mean()
    s = out.log_variance
    return ((-s).exp() * squared * 0.5 + s * 0.5).mean()


def regularizer_terms(
    layers: Iterable[LayerParams], n: int, length_scale: float
) -> Tuple[Tensor, Tensor]:
    """Weight and dropout entropy terms summed over dropout layers.

    Per layer with masked weights W, dropout probability p and summed fan-in
    K the terms are (l^2 / N) * |W|^2 / (1 - p) and
    (K / N) * (p log p + (1 - p) log(1 - p)).

    Raises:
        ContractError: `n` < 1 or `length_scale` <= 0.
    """
    if n < 1 or length_scale <= 0:
        raise ContractError(f"Need N >= 1 and length scale > 0, got {n}, {length_scale}.")

    weight_term = Tensor(0.0)
    entropy_term = Tensor(0.0)
    for params in layers:
        squared = sum(((w**2).sum() for w in params.weights.values()), Tensor(0.0))
        if params.p_logit is not None:
            logit = params.p_logit
            p = logit.sigmoid()
            # log p = -softplus(-l), log(1 - p) = -softplus(l)
            entropy = -(p * (-logit).softplus() + (1.0 - p) * logit.softplus())
            keep_scale = 1.0 + logit.exp()
        else:
            p = params.fixed_p
            entropy = Tensor(p * numpy.log(p) + (1 - p) * numpy.log1p(-p) if p > 0 else 0.0)
            keep_scale = 1.0 / (1.0 - p)
        weight_term = weight_term + squared * keep_scale * (length_scale**2 / n)
        entropy_term = entropy_term + entropy * (params.fan_in / n)

    return weight_term, entropy_term


def dropout_regularizer(
    layers: Iterable[LayerParams], n: int, length_scale: float
) -> Tensor:
    """Sum of the weight and entropy terms of `regularizer_terms`."""
    weight_term, entropy_term = regularizer_terms(layers, n, length_scale)
    return weight_term + entropy_term


def objective(
    network: Network, out: HeteroHeadOutput, target: numpy.ndarray, n: int
) -> Tuple[Tensor, LossBreakdown]:
    """Full training loss of a network output and its breakdown.

    Args:
        network: Source of the dropout layers and regularizer settings.
        out: Network output for a batch.
        target: Remaining times of the batch.
        n: Number of training samples.
    """
    data = hetero_nll(out, target)
    weight_term, entropy_term = regularizer_terms(
        network.dropout_layers().values(), n, network.spec.length_scale
    )
    total = data + weight_term + entropy_term
    breakdown = LossBreakdown(
        data_term=data.item(),
        weight_reg_term=weight_term.item(),
        dropout_entropy_term=entropy_term.item(),
    )
    return total, breakdown
