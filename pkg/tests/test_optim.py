"""
Tests for Adam, gradient clipping and the training loop.
"""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from app.core.tensor import Parameter, mul, total
from app.schemas.models import DatasetKind, ModelKind, TrainConfig
from app.services.baselines import build_model
from app.services.nn import jitter_params
from app.services.optim import (
    Adam,
    AdamState,
    NonFiniteGradientError,
    TrainingDivergedError,
    adam_step,
    clip_global_norm,
    evaluate,
    fit,
    predict,
    train_epoch,
)

gradients = arrays(
    np.float64, 5,
    elements=st.floats(min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False),
)


class TestAdam:

    def test_first_step_moves_by_lr(self):
        p = Parameter([1.0, -1.0])
        state = AdamState.for_params([p], lr=0.1)
        adam_step(state, [p], [np.array([2.0, -3.0])])
        # bias-corrected first step is lr * sign(g)
        np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-7)

    def test_non_finite_gradient_aborts(self):
        p = Parameter([1.0])
        state = AdamState.for_params([p])
        with pytest.raises(NonFiniteGradientError):
            adam_step(state, [p], [np.array([np.inf])])
        np.testing.assert_array_equal(p.data, [1.0])
        assert state.timestep == 0

    def test_zero_gradient_is_a_no_op(self):
        p = Parameter([1.0, 2.0])
        state = AdamState.for_params([p])
        adam_step(state, [p], [np.zeros(2)])
        np.testing.assert_array_equal(p.data, [1.0, 2.0])
        assert state.timestep == 1

    def test_missing_gradient_is_zero(self):
        p = Parameter([1.0])
        adam_step(AdamState.for_params([p]), [p], [None])
        np.testing.assert_array_equal(p.data, [1.0])

    def test_minimizes_quadratic(self):
        p = Parameter([3.0, -2.0])
        adam = Adam([p], lr=0.1)
        for _ in range(500):
            adam.zero_grad()
            total(mul(p, p)).backward()
            adam.step()
        assert np.all(np.abs(p.data) < 0.1)


class TestClipping:

    def test_no_clip_below_threshold(self):
        grads = [np.array([0.3, 0.4])]
        assert clip_global_norm(grads, 1.0) == 1.0
        np.testing.assert_array_equal(grads[0], [0.3, 0.4])

    def test_clip_to_threshold(self):
        grads = [np.array([3.0]), np.array([4.0])]
        factor = clip_global_norm(grads, 1.0)
        assert factor == pytest.approx(0.2)
        assert np.sqrt(grads[0][0] ** 2 + grads[1][0] ** 2) == pytest.approx(1.0)

    def test_threshold_must_be_positive(self):
        with pytest.raises(ValueError):
            clip_global_norm([np.ones(2)], 0.0)

    @given(gradients, st.floats(min_value=1e-3, max_value=100.0))
    @settings(max_examples=60, deadline=None)
    def test_norm_bounded_and_direction_kept(self, values, threshold):
        grads = [values.copy()]
        clip_global_norm(grads, threshold)
        assert np.linalg.norm(grads[0]) <= threshold * (1 + 1e-9) or np.allclose(grads[0], values)
        if np.linalg.norm(values) > 1e-6:
            cosine = grads[0] @ values / (np.linalg.norm(grads[0]) * np.linalg.norm(values))
            assert cosine == pytest.approx(1.0)


class TestTraining:

    def test_epoch_metrics_and_curve(self, spatial_corpus):
        model = build_model(ModelKind.SM_RNN, DatasetKind.SPATIAL, seed=0)
        cfg = TrainConfig(epochs=1, batch_size=16, eval_every=2)
        metrics = train_epoch(model, spatial_corpus, Adam(model.parameters()), cfg)
        assert metrics.iterations == 5
        assert [r.iteration for r in metrics.curve] == [1, 2, 4]
        assert 0.0 <= metrics.classification_rate <= 1.0

    def test_fit_continues_iterations(self, temporal_corpus):
        model = build_model(ModelKind.LSTM, DatasetKind.TEMPORAL, seed=0)
        history = fit(model, temporal_corpus[:40], TrainConfig(epochs=2, batch_size=8, eval_every=1))
        assert len(history) == 2
        iterations = [r.iteration for m in history for r in m.curve]
        assert iterations == sorted(iterations) and len(set(iterations)) == len(iterations)

    def test_fit_is_deterministic(self, spatial_corpus):
        runs = []
        for _ in range(2):
            model = build_model(ModelKind.RNN, DatasetKind.SPATIAL, seed=2)
            history = fit(model, spatial_corpus[:32], TrainConfig(epochs=1, batch_size=8, seed=5))
            runs.append([r.loss for r in history[0].curve])
        assert runs[0] == runs[1]

    def test_training_lowers_loss(self, spatial_corpus):
        model = build_model(ModelKind.SM_RNN, DatasetKind.SPATIAL, seed=0)
        history = fit(model, spatial_corpus, TrainConfig(epochs=8, batch_size=16, lr=1e-2))
        assert history[-1].mean_loss < history[0].mean_loss

    def test_divergence_is_reported(self, spatial_corpus):
        model = build_model(ModelKind.FF_NN, DatasetKind.SPATIAL, seed=0)
        jitter_params(model, seed=0, scale=1e200)
        with pytest.raises(TrainingDivergedError) as excinfo:
            fit(model, spatial_corpus[:16], TrainConfig(epochs=1, batch_size=16))
        assert excinfo.value.iteration == 1

    def test_zero_learning_rate_keeps_parameters(self, temporal_corpus):
        model = build_model(ModelKind.SM_RNN, DatasetKind.TEMPORAL, seed=0)
        before = model.state_dict()
        cfg = TrainConfig(epochs=1, batch_size=8, lr=0.0)
        train_epoch(model, temporal_corpus[:24], Adam(model.parameters(), lr=cfg.lr), cfg)
        after = model.state_dict()
        assert all(np.array_equal(before[name], after[name]) for name in before)

    @pytest.mark.parametrize("kind, dataset", [
        (ModelKind.SM_RNN, DatasetKind.SPATIAL),
        (ModelKind.SM_RNN, DatasetKind.TEMPORAL),
        (ModelKind.LSTM, DatasetKind.TEMPORAL),
        (ModelKind.RNN, DatasetKind.TEMPORAL),
    ])
    def test_one_step_updates_param_count_scalars(self, kind, dataset):
        model = build_model(kind, dataset, seed=0)
        before = np.concatenate([p.data.reshape(-1) for p in model.parameters()])
        adam = Adam(model.parameters())
        for p in model.parameters():
            p.grad = np.ones_like(p.data)
        adam.step()
        after = np.concatenate([p.data.reshape(-1) for p in model.parameters()])
        assert int(np.sum(before != after)) == model.param_count()

    def test_empty_dataset(self):
        model = build_model(ModelKind.SM_RNN, DatasetKind.SPATIAL)
        with pytest.raises(ValueError):
            train_epoch(model, [], Adam(model.parameters()), TrainConfig())


class TestEvaluation:

    def test_predictions_follow_dataset_order(self, temporal_corpus):
        model = build_model(ModelKind.SM_RNN, DatasetKind.TEMPORAL, seed=0)
        predictions = predict(model, temporal_corpus, batch_size=7)
        singles = [int(np.argmax(model.forward(s.steps).data)) for s in temporal_corpus[:10]]
        assert list(predictions[:10]) == singles

    def test_rate_in_unit_interval(self, spatial_corpus):
        rate = evaluate(build_model(ModelKind.SM_RNN, DatasetKind.SPATIAL), spatial_corpus)
        assert 0.0 <= rate <= 1.0
