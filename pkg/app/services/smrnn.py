"""
Stigmergic Memory RNN.

The recurrent state is a vector of M bounded marks. At every step a
Deposit network and a Removal network, each fed with the stimulus and a
linear projection of the current marks, produce nonnegative increments;
the marks move by deposit minus removal and are clamped between the
finishing and saturation levels. A classification MLP reads the marks
after the last step.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from app.core.config import get_settings
from app.core.tensor import ShapeError, Tensor, add, clamp, concat, sub
from app.schemas.models import FinalActivation, SMConfig
from app.services.nn import (
    LinearLayer,
    MLPBlock,
    SequenceClassifier,
    apply_document,
    as_steps,
    read_document,
    save_params,
)

logger = logging.getLogger(__name__)


def _mark_bounds() -> dict:
    settings = get_settings()
    return dict(mark_lo=settings.mark_lo, mark_hi=settings.mark_hi, mark_init=settings.mark_lo)


def spatial_config(**overrides) -> SMConfig:
    """Row-sequence MNIST: 15 marks fed by 28-pixel rows."""
    values = dict(marks=15, stimulus_dim=28, hidden_dim=20, class_hidden_dim=10, num_classes=10, **_mark_bounds())
    values.update(overrides)
    return SMConfig(**values)


def temporal_config(**overrides) -> SMConfig:
    """Pen-stroke MNIST: 30 marks fed by (dx, dy, eos, eod) tuples."""
    values = dict(marks=30, stimulus_dim=4, hidden_dim=20, class_hidden_dim=20, num_classes=10, **_mark_bounds())
    values.update(overrides)
    return SMConfig(**values)


@dataclass
class MarkState:
    """The mark vector m(t), [M] or [B, M]."""
    marks: Tensor

    def numpy(self) -> np.ndarray:
        return self.marks.numpy()


class SMRNNModel(SequenceClassifier):
    """
    Stigmergic memory classification unit.

    Deposit and Removal each own their mark-projection layer; the two
    MLPs share a shape but not their parameters.
    """

    kind = "sm-rnn"

    def __init__(self, config: SMConfig, seed: Optional[int] = 0):
        self.config = config
        marks, stimulus, hidden = config.marks, config.stimulus_dim, config.hidden_dim
        self.proj_deposit = LinearLayer(marks, marks)
        self.proj_removal = LinearLayer(marks, marks)
        self.deposit_mlp = MLPBlock(stimulus + marks, hidden, marks, FinalActivation.RELU)
        self.removal_mlp = MLPBlock(stimulus + marks, hidden, marks, FinalActivation.RELU)
        self.classify_mlp = MLPBlock(
            marks, config.class_hidden_dim, config.num_classes, FinalActivation.PRELU
        )
        if seed is not None:
            self.init_params(seed)

    def _children(self):
        return [
            ("proj_deposit", self.proj_deposit),
            ("proj_removal", self.proj_removal),
            ("deposit_mlp", self.deposit_mlp),
            ("removal_mlp", self.removal_mlp),
            ("classify_mlp", self.classify_mlp),
        ]

    def config_dict(self) -> dict:
        return self.config.model_dump()

    def init_state(self, batch_size: Optional[int] = None) -> MarkState:
        """All marks start at mark_init."""
        shape = (self.config.marks,) if batch_size is None else (batch_size, self.config.marks)
        return MarkState(Tensor(np.full(shape, self.config.mark_init)))

    def deposit(self, state: MarkState, stimulus: Tensor) -> Tensor:
        return self.deposit_mlp(concat(stimulus, self.proj_deposit(state.marks)))

    def removal(self, state: MarkState, stimulus: Tensor) -> Tensor:
        return self.removal_mlp(concat(stimulus, self.proj_removal(state.marks)))

    def step(self, state: MarkState, stimulus: Tensor) -> MarkState:
        """m' = clamp(m + deposit - removal, finishing level, saturation level)."""
        if stimulus.shape[-1] != self.config.stimulus_dim:
            raise ShapeError(
                f"stimulus has {stimulus.shape[-1]} values, model expects {self.config.stimulus_dim}"
            )
        increment = self.deposit(state, stimulus)
        decrement = self.removal(state, stimulus)
        marks = sub(add(state.marks, increment), decrement)
        return MarkState(clamp(marks, self.config.mark_lo, self.config.mark_hi))

    def classify(self, state: MarkState) -> Tensor:
        return self.classify_mlp(state.marks)

    def trace(self, inputs: Union[np.ndarray, Sequence[Tensor]]) -> list[MarkState]:
        """Mark states m(1..T) over a sequence."""
        steps = as_steps(inputs)
        batch = steps[0].shape[0] if steps[0].ndim == 2 else None
        state = self.init_state(batch)
        states = []
        for stimulus in steps:
            state = self.step(state, stimulus)
            states.append(state)
        return states

    def forward(self, inputs: Union[np.ndarray, Sequence[Tensor]]) -> Tensor:
        """Fold the step over the sequence and classify the final marks only."""
        return self.classify(self.trace(inputs)[-1])


def save_model(model: SMRNNModel, path: Path) -> Path:
    return save_params(model, path, kind=model.kind, config=model.config_dict())


def load_model(path: Path) -> SMRNNModel:
    """Rebuild a model from a document written by save_model."""
    document = read_document(path)
    if document.kind != SMRNNModel.kind or document.config is None:
        raise ValueError(f"{path} does not hold an {SMRNNModel.kind} model")
    model = SMRNNModel(SMConfig(**document.config), seed=None)
    apply_document(model, document)
    logger.info(f"Loaded {model.kind} model ({model.param_count():,} parameters) from {path}")
    return model
