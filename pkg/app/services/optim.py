"""
Adam, global-norm gradient clipping and the supervised training loop
over unrolled sequences.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from app.core.tensor import NonFiniteError, Parameter, backward, no_grad, softmax_nll
from app.schemas.models import CurveRecord, EpochMetrics, TrainConfig
from app.services.data import SequenceSample, iter_batches
from app.services.nn import SequenceClassifier

logger = logging.getLogger(__name__)


class NonFiniteGradientError(RuntimeError):
    """A gradient holds NaN or Inf; the optimizer step was aborted."""
    pass


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite during training."""

    def __init__(self, iteration: int, detail: str):
        super().__init__(f"training diverged at iteration {iteration}: {detail}")
        self.iteration = iteration


@dataclass
class AdamState:
    """Per-parameter moment estimates and hyperparameters."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)
    timestep: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Parameter], **hyper) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            **hyper,
        )


def adam_step(state: AdamState, params: Sequence[Parameter], grads: Sequence[Optional[np.ndarray]]) -> None:
    """
    One bias-corrected Adam update, in place.

    Raises:
        NonFiniteGradientError: Any gradient is NaN/Inf (nothing is updated)
    """
    if len(state.first_moment) != len(params):
        raise ValueError(f"optimizer tracks {len(state.first_moment)} tensors, got {len(params)}")
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {p.name or 'parameter'}")

    state.timestep += 1
    correction1 = 1.0 - state.beta1 ** state.timestep
    correction2 = 1.0 - state.beta2 ** state.timestep
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    """Adam over a fixed list of parameters."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.state, self.params, [p.grad for p in self.params])


def clip_global_norm(grads: Sequence[Optional[np.ndarray]], threshold: float) -> float:
    """
    Scale gradients in place so their joint L2 norm is at most threshold.

    Returns:
        The factor applied (1.0 when no clipping was needed)
    """
    if threshold <= 0:
        raise ValueError(f"clipping threshold must be positive, got {threshold}")
    present = [g for g in grads if g is not None]
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in present)))
    if norm <= threshold:
        return 1.0
    factor = threshold / norm
    for g in present:
        g *= factor
    logger.debug(f"Clipped gradient norm {norm:.4f} -> {threshold}")
    return factor


def train_epoch(
    model: SequenceClassifier,
    dataset: Sequence[SequenceSample],
    adam: Adam,
    cfg: TrainConfig,
    epoch: int = 0,
    start_iteration: int = 0,
) -> EpochMetrics:
    """
    One pass over the training set in shuffled, length-bucketed mini-batches.

    Batch order is seeded by cfg.seed + epoch. A curve snapshot (batch loss,
    batch accuracy) is taken at the first iteration and every cfg.eval_every
    iterations after it.

    Raises:
        TrainingDivergedError: The loss or a gradient became non-finite
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")

    batch_size = None if cfg.full_batch else cfg.batch_size
    iteration = start_iteration
    loss_sum = 0.0
    correct = 0
    seen = 0
    curve: list[CurveRecord] = []

    for batch in iter_batches(dataset, batch_size, seed=cfg.seed + epoch):
        iteration += 1
        adam.zero_grad()
        try:
            logits = model.forward(batch.inputs)
            loss = softmax_nll(logits, batch.labels)
            backward(loss)
            if cfg.clip_norm is not None:
                clip_global_norm([p.grad for p in adam.params], cfg.clip_norm)
            adam.step()
        except (NonFiniteError, NonFiniteGradientError) as e:
            raise TrainingDivergedError(iteration, str(e)) from e

        loss_value = loss.item()
        batch_correct = int(np.sum(np.argmax(logits.data, axis=-1) == batch.labels))
        loss_sum += loss_value * len(batch.labels)
        correct += batch_correct
        seen += len(batch.labels)

        if iteration == 1 or iteration % cfg.eval_every == 0:
            curve.append(CurveRecord(
                iteration=iteration,
                loss=loss_value,
                train_accuracy=batch_correct / len(batch.labels),
            ))
            logger.debug(f"Iteration {iteration}: loss {loss_value:.4f}")

    return EpochMetrics(
        epoch=epoch,
        mean_loss=loss_sum / seen,
        classification_rate=correct / seen,
        iterations=iteration - start_iteration,
        curve=curve,
    )


def predict(model: SequenceClassifier, dataset: Sequence[SequenceSample], batch_size: int = 512) -> np.ndarray:
    """Predicted class per sample, in dataset order (argmax, lowest index on ties)."""
    predictions = np.empty(len(dataset), dtype=np.int64)
    with no_grad():
        for batch in iter_batches(dataset, batch_size, seed=None):
            logits = model.forward(batch.inputs)
            predictions[batch.indices] = np.argmax(logits.data, axis=-1)
    return predictions


def evaluate(model: SequenceClassifier, dataset: Sequence[SequenceSample], batch_size: int = 512) -> float:
    """Classification rate: correctly classified samples over all samples."""
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    labels = np.array([s.label for s in dataset])
    correct = int(np.sum(predict(model, dataset, batch_size) == labels))
    return correct / len(dataset)


def fit(model: SequenceClassifier, dataset: Sequence[SequenceSample], cfg: TrainConfig) -> list[EpochMetrics]:
    """Train for cfg.epochs epochs with a fresh Adam optimizer."""
    adam = Adam(model.parameters(), lr=cfg.lr)
    history: list[EpochMetrics] = []
    iterations = 0
    for epoch in range(cfg.epochs):
        metrics = train_epoch(model, dataset, adam, cfg, epoch=epoch, start_iteration=iterations)
        iterations += metrics.iterations
        history.append(metrics)
        logger.info(
            f"Epoch {epoch + 1}/{cfg.epochs}: loss {metrics.mean_loss:.4f}, "
            f"train rate {metrics.classification_rate:.4f}"
        )
    return history
