"""
Layers and blocks: linear layers, per-channel PReLU and the three-stage
MLP block shared by the Deposit, Removal and Classification networks.
Parameters serialize to a flat, named JSON document.
"""
import logging
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from app.core.tensor import Parameter, ShapeError, Tensor, affine, prelu, relu
from app.schemas.models import FinalActivation, ModelDocument, ParameterEntry

logger = logging.getLogger(__name__)

DEFAULT_SLOPE = 0.25


class ModelConfigError(ValueError):
    """Invalid layer or model configuration."""
    pass


class Module:
    """
    Base class for parameter containers.

    Subclasses list their parameters and sub-modules in _children(), in a
    fixed order; that order defines names, initialization and serialization.
    """

    def _children(self) -> list[tuple[str, "Module | Parameter"]]:
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, child in self._children():
            full_name = f"{prefix}{name}"
            if isinstance(child, Module):
                yield from child.named_parameters(f"{full_name}.")
            else:
                yield full_name, child

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        """Exact number of scalar learnable parameters."""
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def init_params(self, seed: int) -> None:
        """Initialize every layer from one seeded stream, in declaration order."""
        rng = np.random.default_rng(seed)
        self._init(rng)

    def _init(self, rng: np.random.Generator) -> None:
        for _, child in self._children():
            if isinstance(child, Module):
                child._init(rng)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise ModelConfigError(f"missing parameter {name}")
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != p.shape:
                raise ModelConfigError(f"parameter {name}: expected shape {p.shape}, got {values.shape}")
            p.data[...] = values


class LinearLayer(Module):
    """W·x + b with W of shape [n_out, n_in]."""

    def __init__(self, n_in: int, n_out: int):
        if n_in < 1 or n_out < 1:
            raise ModelConfigError(f"linear layer sizes must be positive, got {n_in}->{n_out}")
        self.n_in = n_in
        self.n_out = n_out
        self.weights = Parameter(np.zeros((n_out, n_in)), name="weights")
        self.bias = Parameter(np.zeros(n_out), name="bias")

    def _children(self):
        return [("weights", self.weights), ("bias", self.bias)]

    def _init(self, rng: np.random.Generator) -> None:
        bound = np.sqrt(1.0 / self.n_in)
        self.weights.data[...] = rng.uniform(-bound, bound, size=self.weights.shape)
        self.bias.data[...] = 0.0

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.weights, self.bias)


class PReLULayer(Module):
    """One learned negative-side slope per channel."""

    def __init__(self, channels: int):
        if channels < 1:
            raise ModelConfigError(f"PReLU needs at least one channel, got {channels}")
        self.channels = channels
        self.slopes = Parameter(np.full(channels, DEFAULT_SLOPE), name="slopes")

    def _children(self):
        return [("slopes", self.slopes)]

    def _init(self, rng: np.random.Generator) -> None:
        self.slopes.data[...] = DEFAULT_SLOPE

    def __call__(self, x: Tensor) -> Tensor:
        return prelu(x, self.slopes)


class MLPBlock(Module):
    """
    Input Linear Layer -> PReLU -> Output Linear Layer -> final activation.

    The final activation is ReLU for the Deposit/Removal networks, PReLU
    for classification heads, or nothing.
    """

    def __init__(
        self,
        n_in: int,
        n_hidden: int,
        n_out: int,
        final: FinalActivation = FinalActivation.PRELU,
    ):
        self.n_in = n_in
        self.n_hidden = n_hidden
        self.n_out = n_out
        self.final = FinalActivation(final)
        self.input_linear = LinearLayer(n_in, n_hidden)
        self.mid_activation = PReLULayer(n_hidden)
        self.output_linear = LinearLayer(n_hidden, n_out)
        self.final_activation: Optional[PReLULayer] = (
            PReLULayer(n_out) if self.final == FinalActivation.PRELU else None
        )

    def _children(self):
        children = [
            ("input_linear", self.input_linear),
            ("mid_activation", self.mid_activation),
            ("output_linear", self.output_linear),
        ]
        if self.final_activation is not None:
            children.append(("final_activation", self.final_activation))
        return children

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"MLP block expects {self.n_in} inputs, got {x.shape[-1]}")
        hidden = self.mid_activation(self.input_linear(x))
        out = self.output_linear(hidden)
        if self.final == FinalActivation.RELU:
            return relu(out)
        if self.final == FinalActivation.PRELU:
            return self.final_activation(out)
        return out


class SequenceClassifier(Module):
    """Shared contract: a batch of equal-length sequences in, class logits out."""

    kind: str = "sequence-classifier"

    def forward(self, inputs: np.ndarray) -> Tensor:
        """
        Args:
            inputs: Stimuli of shape [B, T, S] (or [T, S] for a single sequence)

        Returns:
            Logits [B, C] (or [C])
        """
        raise NotImplementedError

    def config_dict(self) -> Optional[dict]:
        return None


def as_steps(inputs: Union[np.ndarray, Sequence[Tensor]]) -> list[Tensor]:
    """
    Split a sequence into per-step stimulus tensors.

    Accepts a list of tensors, an array [T, S] or a batch [B, T, S].
    """
    if isinstance(inputs, np.ndarray):
        if inputs.ndim == 2:
            steps = [Tensor(row) for row in inputs]
        elif inputs.ndim == 3:
            steps = [Tensor(inputs[:, t, :]) for t in range(inputs.shape[1])]
        else:
            raise ShapeError(f"sequence input must be [T, S] or [B, T, S], got {inputs.shape}")
    else:
        steps = list(inputs)
    if not steps:
        raise ModelConfigError("cannot run a model over an empty sequence")
    return steps


def linear_count(n_in: int, n_out: int) -> int:
    """Parameters of an n_in -> n_out linear layer."""
    return n_in * n_out + n_out


def to_document(module: Module, kind: str, config: Optional[dict] = None) -> ModelDocument:
    return ModelDocument(
        kind=kind,
        config=config,
        parameters=[
            ParameterEntry(name=name, shape=list(p.shape), values=p.data.reshape(-1).tolist())
            for name, p in module.named_parameters()
        ],
    )


def apply_document(module: Module, document: ModelDocument) -> None:
    state = {
        entry.name: np.asarray(entry.values, dtype=np.float64).reshape(entry.shape)
        for entry in document.parameters
    }
    module.load_state_dict(state)


def save_params(module: Module, path: Path, kind: str, config: Optional[dict] = None) -> Path:
    """Write a module's parameters as a JSON ModelDocument."""
    document = to_document(module, kind, config)
    path.write_text(document.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Saved {module.param_count():,} parameters to {path}")
    return path


def read_document(path: Path) -> ModelDocument:
    return ModelDocument.model_validate_json(path.read_text(encoding="utf-8"))


def load_params(module: Module, path: Path) -> ModelDocument:
    """Load parameters saved by save_params into an already-built module."""
    document = read_document(path)
    apply_document(module, document)
    logger.info(f"Loaded {len(document.parameters)} parameter tensors from {path}")
    return document


def jitter_params(module: Module, seed: int, scale: float = 0.1) -> None:
    """Add seeded Gaussian noise to every parameter (biases and slopes included)."""
    rng = np.random.default_rng(seed)
    for p in module.parameters():
        p.data += rng.normal(0.0, scale, size=p.shape)
