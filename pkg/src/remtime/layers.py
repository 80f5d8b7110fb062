"""Network building blocks and the remaining-time networks built from them.

Dropout is applied to weights: each convolution kernel, the dense matrix and
all eight LSTM matrices are multiplied by a mask drawn once per forward pass,
so one pass corresponds to one sampled network shared by the whole batch and
every timestep.
"""
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy
from pydantic import BaseModel

from remtime.autodiff import (
    CheckpointError,
    Tensor,
    concat,
    conv1d,
    gather_rows,
    lift,
    load_checkpoint,
    save_checkpoint,
)
from remtime.eventlog import EncodingError
from remtime.models import PAD_INDEX, ModelSpec, PrefixBatch
from remtime.utils import ContractError, RemtimeError

logger = logging.getLogger(__name__)

LSTM_WEIGHTS = ["w_xi", "w_xf", "w_xg", "w_xo", "w_hi", "w_hf", "w_hg", "w_ho"]
GATES = ["i", "f", "g", "o"]

# Keeps log(u) and log(1 - u) finite
UNIFORM_EPS = 1e-7

VARIANTS = ["plain", "hs", "do5", "cdo", "bnn"]
MC_VARIANTS = {"bnn"}


class ParameterError(RemtimeError, ValueError):
    """Error thrown when a layer setting is out of range."""


class ShapeError(RemtimeError, ValueError):
    """Error thrown when an architecture does not fit the input shape."""


class LayerParams(BaseModel):
    """Weights, biases and dropout state of one layer.

    `weights` holds every matrix the dropout mask applies to. `fan_in` is the
    summed input dimensionality of those matrices.
    """

    weights: Dict[str, Tensor]
    biases: Dict[str, Tensor] = {}
    p_logit: Optional[Tensor] = None
    fixed_p: float = 0.0
    fan_in: int

    class Config:  # noqa: D106
        arbitrary_types_allowed = True

    @property
    def p(self) -> float:
        """Current dropout probability."""
        if self.p_logit is not None:
            return float(self.p_logit.sigmoid().item())
        return self.fixed_p

    def named_tensors(self) -> Dict[str, Tensor]:
        """All trainable tensors of the layer, keyed by local name."""
        named = dict(self.weights)
        named.update({f"bias.{k}": v for k, v in self.biases.items()})
        if self.p_logit is not None:
            named["p_logit"] = self.p_logit
        return named


class HeteroHeadOutput(BaseModel):
    """Predicted mean and log-variance per sample.

    `log_variance` is None for homoscedastic networks.
    """

    mean: Tensor
    log_variance: Optional[Tensor] = None

    class Config:  # noqa: D106
        arbitrary_types_allowed = True


def bernoulli_dropout(
    x: Tensor,
    p: float,
    training: bool,
    rng: Optional[numpy.random.Generator] = None,
) -> Tensor:
    """Zero each unit with probability `p` and scale survivors by 1/(1-p).

    Raises:
        ParameterError: `p` outside [0, 1).
    """
    if not 0 <= p < 1:
        raise ParameterError(f"Dropout probability must lie in [0, 1), got {p}.")
    if not training or p == 0:
        return x
    if rng is None:
        raise ContractError("Training-mode dropout needs a random generator.")
    keep = rng.random(x.shape) >= p
    return x * (keep / (1.0 - p))


def concrete_mask(
    p_logit: Tensor,
    temperature: float,
    shape: Tuple[int, ...],
    rng: Optional[numpy.random.Generator] = None,
    u: Optional[numpy.ndarray] = None,
) -> Tensor:
    """Relaxed drop indicator z in (0, 1), one per unit.

    Pass `u` to reuse uniform draws; otherwise they come from `rng`.
    """
    if temperature <= 0:
        raise ParameterError(f"Temperature must be > 0, got {temperature}.")
    if u is None:
        if rng is None:
            raise ContractError("Concrete dropout needs a random generator or u.")
        u = rng.uniform(UNIFORM_EPS, 1.0 - UNIFORM_EPS, size=shape)
    noise = numpy.log(u) - numpy.log1p(-u)
    # logit(p) is p_logit itself
    return ((p_logit + noise) * (1.0 / temperature)).sigmoid()


def concrete_dropout(
    x: Tensor,
    p_logit: Tensor,
    temperature: float,
    rng: Optional[numpy.random.Generator] = None,
    u: Optional[numpy.ndarray] = None,
) -> Tensor:
    """Continuous relaxation of dropout, differentiable in `x` and `p_logit`.

    Returns x * (1 - z) / (1 - p) with p = sigmoid(p_logit).
    """
    z = concrete_mask(p_logit, temperature, x.shape, rng=rng, u=u)
    # 1 / (1 - sigmoid(l)) == 1 + exp(l)
    return x * (1.0 - z) * (1.0 + p_logit.exp())


def masked_weight(
    params: LayerParams,
    name: str,
    dropout_mode: str,
    rng: Optional[numpy.random.Generator] = None,
    temperature: float = 0.1,
) -> Tensor:
    """Weight `name` of a layer with a freshly drawn dropout mask."""
    weight = params.weights[name]
    if dropout_mode == "none":
        return weight
    elif dropout_mode == "fixed":
        return bernoulli_dropout(weight, params.fixed_p, True, rng)
    elif dropout_mode == "concrete":
        return concrete_dropout(weight, params.p_logit, temperature, rng)
    raise ParameterError(f"Unknown dropout mode '{dropout_mode}'.")


def embed_and_stack(
    categorical: numpy.ndarray,
    numeric: numpy.ndarray,
    embeddings: Sequence[Tensor],
) -> Tensor:
    """Concatenate embedded categorical slots and numeric slots per timestep.

    Args:
        categorical: Integer indices `[batch, length, categorical slots]`.
        numeric: Standardized values `[batch, length, numeric slots]`.
        embeddings: One `[vocabulary size, dim]` table per categorical slot.

    Raises:
        EncodingError: An index is outside its vocabulary.

    Returns:
        A `[batch, length, sum(dims) + numeric slots]` tensor. The padding
        index maps to a zero vector.
    """
    if categorical.shape[2] != len(embeddings):
        raise ShapeError(
            f"Window has {categorical.shape[2]} categorical slots, "
            + f"the network embeds {len(embeddings)}."
        )
    parts = []
    for j, table in enumerate(embeddings):
        indices = categorical[:, :, j]
        rows = table.shape[0]
        if indices.size and (indices.min() < 0 or indices.max() >= rows):
            raise EncodingError(
                f"Categorical slot {j} has index {int(indices.max())} outside "
                + f"a vocabulary of {rows}."
            )
        not_padding = (indices != PAD_INDEX)[..., None].astype(float)
        parts.append(gather_rows(table, indices) * not_padding)
    parts.append(lift(numeric))
    return concat(parts, axis=2)


def dense(
    x: Tensor,
    params: LayerParams,
    dropout_mode: str = "none",
    rng: Optional[numpy.random.Generator] = None,
    temperature: float = 0.1,
) -> Tensor:
    """Affine map `x @ W + b` with an optional weight mask."""
    w = masked_weight(params, "w", dropout_mode, rng, temperature)
    return x @ w + params.biases["b"]


def conv1d_block(
    x: Tensor,
    params: LayerParams,
    dropout_mode: str = "none",
    rng: Optional[numpy.random.Generator] = None,
    temperature: float = 0.1,
) -> Tensor:
    """Masked-kernel cross-correlation followed by a rectifier.

    Raises:
        ShapeError: The kernel is wider than the input sequence.
    """
    width = params.weights["kernel"].shape[0]
    if width > x.shape[1]:
        raise ShapeError(f"Kernel width {width} exceeds sequence length {x.shape[1]}.")
    kernel = masked_weight(params, "kernel", dropout_mode, rng, temperature)
    return (conv1d(x, kernel) + params.biases["b"]).relu()


def sample_lstm_masks(
    params: LayerParams,
    dropout_mode: str,
    rng: Optional[numpy.random.Generator] = None,
    temperature: float = 0.1,
) -> Optional[Dict[str, Tensor]]:
    """Draw one scaled mask per LSTM matrix for a whole sequence."""
    if dropout_mode == "none":
        return None
    ones = {k: Tensor(numpy.ones(params.weights[k].shape)) for k in LSTM_WEIGHTS}
    if dropout_mode == "fixed":
        return {k: bernoulli_dropout(v, params.fixed_p, True, rng) for k, v in ones.items()}
    return {
        k: concrete_dropout(v, params.p_logit, temperature, rng) for k, v in ones.items()
    }


def lstm_cell_variational(
    x_t: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    params: LayerParams,
    masks: Optional[Dict[str, Tensor]] = None,
) -> Tuple[Tensor, Tensor]:
    """One LSTM step with every weight matrix multiplied by its mask.

    Raises:
        ContractError: A mask is missing or does not match its matrix.
    """
    if masks is not None:
        if set(masks) != set(LSTM_WEIGHTS):
            raise ContractError(f"Expected masks for {LSTM_WEIGHTS}, got {sorted(masks)}.")
        for key in LSTM_WEIGHTS:
            if masks[key].shape != params.weights[key].shape:
                raise ContractError(
                    f"Mask {key} has shape {masks[key].shape}, "
                    + f"weight has {params.weights[key].shape}."
                )

    def weight(key: str) -> Tensor:
        w = params.weights[key]
        return w if masks is None else w * masks[key]

    pre = {
        gate: x_t @ weight(f"w_x{gate}") + h_prev @ weight(f"w_h{gate}") + params.biases[gate]
        for gate in GATES
    }
    i = pre["i"].sigmoid()
    f = pre["f"].sigmoid()
    g = pre["g"].tanh()
    o = pre["o"].sigmoid()
    c_t = f * c_prev + i * g
    h_t = o * c_t.tanh()
    return h_t, c_t


def lstm_sequence(
    x: Tensor, params: LayerParams, masks: Optional[Dict[str, Tensor]] = None
) -> Tensor:
    """Run the cell over `[batch, length, channels]` and return the last state."""
    batch, length = x.shape[0], x.shape[1]
    hidden = params.weights["w_hi"].shape[0]
    h = Tensor(numpy.zeros((batch, hidden)))
    c = Tensor(numpy.zeros((batch, hidden)))
    for t in range(length):
        h, c = lstm_cell_variational(x[:, t, :], h, c, params, masks)
    return h


def hetero_head(features: Tensor, params: LayerParams) -> HeteroHeadOutput:
    """Two parallel projections to a mean and a log-variance per sample."""
    batch = features.shape[0]
    mean = (features @ params.weights["mean"] + params.biases["mean"]).reshape(batch)
    log_variance = None
    if "log_variance" in params.weights:
        log_variance = (
            features @ params.weights["log_variance"] + params.biases["log_variance"]
        ).reshape(batch)
    return HeteroHeadOutput(mean=mean, log_variance=log_variance)


def variant_spec(name: str, base: Optional[ModelSpec] = None) -> ModelSpec:
    """Model settings of a named variant.

    `plain` has neither dropout nor a variance head, `hs` adds the variance
    head, `do5` adds fixed 5% dropout, `cdo` and `bnn` learn the dropout
    probability. `bnn` is meant to be used with Monte-Carlo sampling.
    """
    base = base or ModelSpec()
    if name == "plain":
        update = {"dropout": "none", "heteroscedastic": False}
    elif name == "hs":
        update = {"dropout": "none", "heteroscedastic": True}
    elif name == "do5":
        update = {"dropout": "fixed", "dropout_p": 0.05, "heteroscedastic": True}
    elif name in ("cdo", "bnn"):
        update = {"dropout": "concrete", "heteroscedastic": True}
    else:
        raise ParameterError(f"Unknown variant '{name}', choose from {VARIANTS}.")
    return base.copy(update=update)


def _uniform(rng: numpy.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape: Tuple[int, ...]) -> Tensor:
    return Tensor(numpy.zeros(shape), requires_grad=True)


class Network(BaseModel):
    """A CNN or LSTM remaining-time regressor over encoded prefix windows."""

    spec: ModelSpec
    vocab_sizes: List[int]
    n_numeric: int
    embeddings: List[Tensor]
    layers: Dict[str, LayerParams]
    noise_var: float = 1.0

    class Config:  # noqa: D106
        arbitrary_types_allowed = True

    @classmethod
    def build(
        cls,
        spec: ModelSpec,
        vocab_sizes: Sequence[int],
        n_numeric: int,
        seed: int = 0,
        target_mean: float = 0.0,
        target_var: float = 1.0,
    ) -> "Network":
        """Initialize a network for windows with the given slots.

        Weights are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases
        start at zero except the head, which starts at the target mean and
        log target variance.

        Raises:
            ParameterError: Embedding dimensions do not match the slots.
            ShapeError: The convolutions do not fit into the sequence length.
        """
        rng = numpy.random.default_rng(seed)

        dims = spec.embedding_dim
        if isinstance(dims, int):
            dims = [dims] * len(vocab_sizes)
        if len(dims) != len(vocab_sizes):
            raise ParameterError(
                f"{len(dims)} embedding dimensions for {len(vocab_sizes)} features."
            )

        embeddings = []
        for j, (rows, dim) in enumerate(zip(vocab_sizes, dims)):
            table = rng.uniform(-1.0, 1.0, size=(rows, dim)) / math.sqrt(dim)
            table[PAD_INDEX] = 0.0
            embeddings.append(Tensor(table, requires_grad=True, name=f"embedding.{j}"))

        def dropout_state(fan_in: int) -> dict:
            if spec.dropout == "concrete":
                logit = math.log(spec.init_p / (1.0 - spec.init_p))
                return {"p_logit": Tensor(logit, requires_grad=True), "fan_in": fan_in}
            elif spec.dropout == "fixed":
                return {"fixed_p": spec.dropout_p, "fan_in": fan_in}
            return {"fan_in": fan_in}

        channels = sum(dims) + n_numeric
        layers: Dict[str, LayerParams] = {}
        if spec.architecture == "cnn":
            length = spec.sequence_length
            for i, out_channels in enumerate(spec.conv_channels):
                if spec.kernel_size > length:
                    raise ShapeError(
                        f"Kernel width {spec.kernel_size} exceeds the length {length} "
                        + f"left before convolution block {i}."
                    )
                fan_in = spec.kernel_size * channels
                layers[f"conv{i}"] = LayerParams(
                    weights={
                        "kernel": _uniform(
                            rng, (spec.kernel_size, channels, out_channels), fan_in
                        )
                    },
                    biases={"b": _zeros((out_channels,))},
                    **dropout_state(fan_in),
                )
                length -= spec.kernel_size - 1
                channels = out_channels
            features = length * channels
            if spec.dense_width > 0:
                layers["dense"] = LayerParams(
                    weights={"w": _uniform(rng, (features, spec.dense_width), features)},
                    biases={"b": _zeros((spec.dense_width,))},
                    **dropout_state(features),
                )
                features = spec.dense_width
        else:
            hidden = spec.lstm_hidden
            weights = {}
            for key in LSTM_WEIGHTS:
                rows = channels if key.startswith("w_x") else hidden
                weights[key] = _uniform(rng, (rows, hidden), rows)
            layers["lstm"] = LayerParams(
                weights=weights,
                biases={gate: _zeros((hidden,)) for gate in GATES},
                **dropout_state(4 * (channels + hidden)),
            )
            features = hidden

        head_weights = {"mean": _uniform(rng, (features, 1), features)}
        head_biases = {"mean": Tensor([target_mean], requires_grad=True)}
        if spec.heteroscedastic:
            head_weights["log_variance"] = _uniform(rng, (features, 1), features)
            head_biases["log_variance"] = Tensor(
                [math.log(max(target_var, 1e-6))], requires_grad=True
            )
        layers["head"] = LayerParams(
            weights=head_weights, biases=head_biases, fan_in=features
        )

        network = cls(
            spec=spec,
            vocab_sizes=list(vocab_sizes),
            n_numeric=n_numeric,
            embeddings=embeddings,
            layers=layers,
        )
        for name, tensor in network.named_parameters().items():
            tensor.name = name
        logger.debug(f"Built a {spec.architecture} network with {network.size} weights.")
        return network

    @property
    def size(self) -> int:
        """Number of trainable scalars."""
        return sum(t.size for t in self.parameters())

    def dropout_layers(self) -> Dict[str, LayerParams]:
        """Layers whose weights are masked."""
        if self.spec.dropout == "none":
            return {}
        return {k: v for k, v in self.layers.items() if k != "head"}

    def dropout_probabilities(self) -> Dict[str, float]:
        """Current dropout probability per masked layer."""
        return {k: v.p for k, v in self.dropout_layers().items()}

    def named_parameters(self) -> Dict[str, Tensor]:
        """Every trainable tensor keyed by a dotted name."""
        named = {f"embedding.{j}": t for j, t in enumerate(self.embeddings)}
        for layer, params in self.layers.items():
            named.update({f"{layer}.{k}": v for k, v in params.named_tensors().items()})
        return named

    def parameters(self) -> List[Tensor]:
        """Every trainable tensor."""
        return list(self.named_parameters().values())

    def forward(
        self,
        batch: PrefixBatch,
        stochastic: bool = False,
        rng: Optional[numpy.random.Generator] = None,
    ) -> HeteroHeadOutput:
        """Predict mean and log-variance for a batch.

        Args:
            batch: Encoded prefix windows.
            stochastic: Draw new dropout masks for this pass.
            rng: Source of the masks; required when `stochastic` is set and
                the network has dropout.

        Raises:
            ContractError: The batch does not match the network's input shape.
        """
        if (
            batch.sequence_length != self.spec.sequence_length
            or batch.categorical.shape[2] != len(self.embeddings)
            or batch.numeric.shape[2] != self.n_numeric
        ):
            raise ContractError(
                f"Batch windows {batch.categorical.shape} + {batch.numeric.shape} do "
                + f"not match length {self.spec.sequence_length}, "
                + f"{len(self.embeddings)} categorical and {self.n_numeric} numeric slots."
            )
        mode = self.spec.dropout if stochastic else "none"
        t = self.spec.temperature

        x = embed_and_stack(batch.categorical, batch.numeric, self.embeddings)
        if self.spec.architecture == "cnn":
            for i in range(len(self.spec.conv_channels)):
                x = conv1d_block(x, self.layers[f"conv{i}"], mode, rng, t)
            x = x.reshape(len(batch), -1)
            if "dense" in self.layers:
                x = dense(x, self.layers["dense"], mode, rng, t).relu()
        else:
            masks = sample_lstm_masks(self.layers["lstm"], mode, rng, t)
            x = lstm_sequence(x, self.layers["lstm"], masks)

        return hetero_head(x, self.layers["head"])

    def snapshot(self) -> Dict[str, numpy.ndarray]:
        """Copy of every parameter value."""
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def restore(self, values: Dict[str, numpy.ndarray]):
        """Overwrite parameters in place from `snapshot` output.

        Raises:
            CheckpointError: Names or shapes differ.
        """
        named = self.named_parameters()
        if set(named) != set(values):
            raise CheckpointError(
                f"Parameter names differ: {sorted(set(named) ^ set(values))}."
            )
        for key, tensor in named.items():
            if tensor.shape != values[key].shape:
                raise CheckpointError(
                    f"'{key}' has shape {values[key].shape}, expected {tensor.shape}."
                )
            tensor.data[...] = values[key]

    def save(self, path: Union[str, Path]):
        """Write a checkpoint with the model settings in its header."""
        header = {
            "model": self.spec.dict(),
            "vocab_sizes": self.vocab_sizes,
            "n_numeric": self.n_numeric,
            "noise_var": self.noise_var,
        }
        save_checkpoint(path, self.named_parameters(), header)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Network":
        """Rebuild a network from a checkpoint written by `save`."""
        header, arrays = load_checkpoint(path)
        try:
            spec = ModelSpec.parse_obj(header["model"])
            network = cls.build(spec, header["vocab_sizes"], header["n_numeric"])
        except KeyError as error:
            raise CheckpointError(f"Checkpoint header of {path} lacks {error}.")
        network.restore(arrays)
        network.noise_var = float(header.get("noise_var", 1.0))
        return network
