"""
Comparator classifiers: feed-forward NN, vanilla recurrent NN and LSTM,
plus the registry that builds any (model kind, dataset) pairing.
"""
import logging
from typing import Optional, Sequence, Union

import numpy as np

from app.core.tensor import ShapeError, Tensor, add, concat, mul, sigmoid, tanh
from app.schemas.models import DatasetKind, FinalActivation, ModelKind
from app.services.nn import (
    LinearLayer,
    MLPBlock,
    Module,
    ModelConfigError,
    SequenceClassifier,
    as_steps,
)
from app.services.smrnn import SMRNNModel, spatial_config, temporal_config

logger = logging.getLogger(__name__)

IMAGE_SIDE = 28
NUM_CLASSES = 10


class FFNNModel(SequenceClassifier):
    """Static classifier over the full flattened bitmap."""

    kind = "ff-nn"

    def __init__(self, n_in: int = IMAGE_SIDE * IMAGE_SIDE, hidden: int = 413,
                 num_classes: int = NUM_CLASSES, seed: Optional[int] = 0):
        self.n_in = n_in
        self.stages = MLPBlock(n_in, hidden, num_classes, FinalActivation.PRELU)
        if seed is not None:
            self.init_params(seed)

    def _children(self):
        return [("stages", self.stages)]

    def config_dict(self) -> dict:
        return {"n_in": self.n_in, "hidden": self.stages.n_hidden, "num_classes": self.stages.n_out}

    def forward(self, inputs: Union[np.ndarray, Tensor]) -> Tensor:
        """
        Args:
            inputs: One image ([784] or [28, 28]) or a batch ([B, 784] or [B, 28, 28])
        """
        data = inputs.data if isinstance(inputs, Tensor) else np.asarray(inputs, dtype=np.float64)
        if data.ndim == 3:
            data = data.reshape(data.shape[0], -1)
        elif data.ndim == 2 and data.shape[1] != self.n_in:
            data = data.reshape(-1)
        if data.shape[-1] != self.n_in:
            raise ShapeError(f"ff-nn expects {self.n_in} inputs, got {data.shape}")
        return self.stages(Tensor(data))


class VanillaRNNModel(SequenceClassifier):
    """
    Recurrent MLP whose outputs loop back to its inputs, read by a
    classification MLP after the last step.
    """

    kind = "rnn"

    def __init__(self, stimulus_dim: int, state_dim: int, hidden: int, head_hidden: int,
                 num_classes: int = NUM_CLASSES, seed: Optional[int] = 0):
        self.stimulus_dim = stimulus_dim
        self.state_dim = state_dim
        self.core = MLPBlock(stimulus_dim + state_dim, hidden, state_dim, FinalActivation.PRELU)
        self.head = MLPBlock(state_dim, head_hidden, num_classes, FinalActivation.PRELU)
        if seed is not None:
            self.init_params(seed)

    def _children(self):
        return [("core", self.core), ("head", self.head)]

    def config_dict(self) -> dict:
        return {
            "stimulus_dim": self.stimulus_dim,
            "state_dim": self.state_dim,
            "hidden": self.core.n_hidden,
            "head_hidden": self.head.n_hidden,
            "num_classes": self.head.n_out,
        }

    def init_state(self, batch_size: Optional[int] = None) -> Tensor:
        shape = (self.state_dim,) if batch_size is None else (batch_size, self.state_dim)
        return Tensor(np.zeros(shape))

    def step(self, state: Tensor, stimulus: Tensor) -> Tensor:
        if stimulus.shape[-1] != self.stimulus_dim:
            raise ShapeError(f"stimulus has {stimulus.shape[-1]} values, model expects {self.stimulus_dim}")
        return self.core(concat(stimulus, state))

    def forward(self, inputs: Union[np.ndarray, Sequence[Tensor]]) -> Tensor:
        steps = as_steps(inputs)
        state = self.init_state(steps[0].shape[0] if steps[0].ndim == 2 else None)
        for stimulus in steps:
            state = self.step(state, stimulus)
        return self.head(state)


class LSTMCell(Module):
    """
    Gated cell without peepholes: 4·o·(i + o + 1) parameters.

    Each gate reads concat(x, h) through its own linear layer.
    """

    def __init__(self, n_in: int, n_out: int):
        self.n_in = n_in
        self.n_out = n_out
        self.input_gate = LinearLayer(n_in + n_out, n_out)
        self.forget_gate = LinearLayer(n_in + n_out, n_out)
        self.candidate = LinearLayer(n_in + n_out, n_out)
        self.output_gate = LinearLayer(n_in + n_out, n_out)

    def _children(self):
        return [
            ("input_gate", self.input_gate),
            ("forget_gate", self.forget_gate),
            ("candidate", self.candidate),
            ("output_gate", self.output_gate),
        ]

    def init_state(self, batch_size: Optional[int] = None) -> tuple[Tensor, Tensor]:
        shape = (self.n_out,) if batch_size is None else (batch_size, self.n_out)
        return Tensor(np.zeros(shape)), Tensor(np.zeros(shape))

    def step(self, state: tuple[Tensor, Tensor], x: Tensor) -> tuple[Tensor, Tensor]:
        """c' = f*c + i*g, h' = o*tanh(c')."""
        h, c = state
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"LSTM cell expects {self.n_in} inputs, got {x.shape[-1]}")
        joined = concat(x, h)
        i = sigmoid(self.input_gate(joined))
        f = sigmoid(self.forget_gate(joined))
        g = tanh(self.candidate(joined))
        o = sigmoid(self.output_gate(joined))
        c_next = add(mul(f, c), mul(i, g))
        h_next = mul(o, tanh(c_next))
        return h_next, c_next


class LSTMModel(SequenceClassifier):
    """Stacked LSTM cells with a linear output layer on the last hidden state."""

    kind = "lstm"

    def __init__(self, stimulus_dim: int, hidden_sizes: Sequence[int],
                 num_classes: int = NUM_CLASSES, seed: Optional[int] = 0):
        if not hidden_sizes:
            raise ModelConfigError("an LSTM model needs at least one cell")
        self.stimulus_dim = stimulus_dim
        sizes = [stimulus_dim, *hidden_sizes]
        self.layers = [LSTMCell(n_in, n_out) for n_in, n_out in zip(sizes, sizes[1:])]
        self.head = LinearLayer(sizes[-1], num_classes)
        if seed is not None:
            self.init_params(seed)

    def _children(self):
        children = [(f"layers.{index}", cell) for index, cell in enumerate(self.layers)]
        children.append(("head", self.head))
        return children

    def config_dict(self) -> dict:
        return {
            "stimulus_dim": self.stimulus_dim,
            "hidden_sizes": [cell.n_out for cell in self.layers],
            "num_classes": self.head.n_out,
        }

    def forward(self, inputs: Union[np.ndarray, Sequence[Tensor]]) -> Tensor:
        steps = as_steps(inputs)
        batch = steps[0].shape[0] if steps[0].ndim == 2 else None
        states = [cell.init_state(batch) for cell in self.layers]
        for x in steps:
            for index, cell in enumerate(self.layers):
                states[index] = cell.step(states[index], x)
                x = states[index][0]
        return self.head(states[-1][0])


def lstm_cell_count(n_in: int, n_out: int) -> int:
    return 4 * n_out * (n_in + n_out + 1)


# Spatial recurrent and feed-forward topologies are parameter-matched
# stand-ins; temporal ones reproduce the published arithmetic exactly.
TOPOLOGIES: dict[tuple[ModelKind, DatasetKind], dict] = {
    (ModelKind.FF_NN, DatasetKind.SPATIAL): {"n_in": 784, "hidden": 413},
    (ModelKind.RNN, DatasetKind.SPATIAL): {"stimulus_dim": 28, "state_dim": 20, "hidden": 35, "head_hidden": 30},
    (ModelKind.RNN, DatasetKind.TEMPORAL): {"stimulus_dim": 4, "state_dim": 30, "hidden": 50, "head_hidden": 50},
    (ModelKind.LSTM, DatasetKind.SPATIAL): {"stimulus_dim": 28, "hidden_sizes": [17]},
    (ModelKind.LSTM, DatasetKind.TEMPORAL): {"stimulus_dim": 4, "hidden_sizes": [20, 20]},
}


def build_model(kind: ModelKind, dataset: DatasetKind, seed: Optional[int] = 0) -> SequenceClassifier:
    """
    Instantiate the benchmark topology of a (model kind, dataset) pairing.

    Raises:
        ModelConfigError: ff-nn paired with the temporal dataset
    """
    kind, dataset = ModelKind(kind), DatasetKind(dataset)
    if kind == ModelKind.SM_RNN:
        config = spatial_config() if dataset == DatasetKind.SPATIAL else temporal_config()
        return SMRNNModel(config, seed=seed)
    if (kind, dataset) not in TOPOLOGIES:
        raise ModelConfigError(f"{kind.value} does not pair with the {dataset.value} dataset")

    topology = TOPOLOGIES[(kind, dataset)]
    if kind == ModelKind.FF_NN:
        model = FFNNModel(seed=seed, **topology)
    elif kind == ModelKind.RNN:
        model = VanillaRNNModel(seed=seed, **topology)
    else:
        model = LSTMModel(seed=seed, **topology)
    logger.debug(f"Built {kind.value}/{dataset.value} with {model.param_count():,} parameters")
    return model
