"""
Tests for the stigmergic memory classifier.
"""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from app.core.tensor import ShapeError, Tensor, grad_check_report, softmax_nll
from app.schemas.models import SMConfig
from app.services.nn import MLPBlock, jitter_params, save_params
from app.services.smrnn import SMRNNModel, load_model, save_model, spatial_config, temporal_config

stimuli = arrays(
    np.float64, (6, 3),
    elements=st.floats(min_value=-20, max_value=20, allow_nan=False, allow_infinity=False),
)


def jittered(config: SMConfig, seed: int = 0, scale: float = 0.5) -> SMRNNModel:
    model = SMRNNModel(config, seed=seed)
    jitter_params(model, seed=seed + 100, scale=scale)
    return model


def zero_model(config: SMConfig) -> SMRNNModel:
    model = SMRNNModel(config, seed=None)
    for p in model.parameters():
        p.data[...] = 0.0
    return model


class TestParameterCounts:

    def test_spatial(self):
        # 240·2 + (880 + 20 + 315)·2 + (160 + 10 + 110 + 10)
        assert SMRNNModel(spatial_config()).param_count() == 3200

    def test_temporal(self):
        # 930·2 + (700 + 20 + 630)·2 + (620 + 20 + 210 + 10)
        assert SMRNNModel(temporal_config()).param_count() == 5420


class TestConfig:

    def test_mark_init_outside_bounds(self):
        with pytest.raises(ValueError):
            SMConfig(marks=2, stimulus_dim=2, class_hidden_dim=2, mark_lo=0.0, mark_hi=1.0, mark_init=2.0)

    def test_overrides(self):
        assert spatial_config(marks=8).marks == 8


class TestDynamics:

    def test_initial_marks(self, tiny_model):
        np.testing.assert_array_equal(tiny_model.init_state().numpy(), np.zeros(4))
        assert tiny_model.init_state(batch_size=3).marks.shape == (3, 4)

    @given(stimuli)
    @settings(max_examples=40, deadline=None)
    def test_marks_stay_within_bounds(self, sequence):
        model = jittered(SMConfig(marks=4, stimulus_dim=3, hidden_dim=5, class_hidden_dim=4,
                                  mark_lo=-0.5, mark_hi=0.75, mark_init=0.25), scale=2.0)
        for state in model.trace(sequence):
            assert np.all(state.marks.data >= -0.5) and np.all(state.marks.data <= 0.75)

    @given(stimuli)
    @settings(max_examples=40, deadline=None)
    def test_deposit_and_removal_nonnegative(self, sequence):
        model = jittered(SMConfig(marks=4, stimulus_dim=3, hidden_dim=5, class_hidden_dim=4), scale=2.0)
        state = model.init_state()
        for row in sequence:
            stimulus = Tensor(row)
            assert np.all(model.deposit(state, stimulus).data >= 0.0)
            assert np.all(model.removal(state, stimulus).data >= 0.0)
            state = model.step(state, stimulus)

    def test_zero_networks_keep_marks_fixed(self, rng):
        config = SMConfig(marks=4, stimulus_dim=3, hidden_dim=5, class_hidden_dim=4, mark_init=0.5)
        model = zero_model(config)
        for state in model.trace(rng.normal(size=(7, 3))):
            np.testing.assert_array_equal(state.numpy(), np.full(4, 0.5))

    def test_shared_deposit_and_removal_cancel(self, rng):
        model = jittered(SMConfig(marks=4, stimulus_dim=3, hidden_dim=5, class_hidden_dim=4, mark_init=0.5))
        model.proj_removal.load_state_dict(model.proj_deposit.state_dict())
        model.removal_mlp.load_state_dict(model.deposit_mlp.state_dict())
        for state in model.trace(rng.normal(size=(5, 3))):
            np.testing.assert_allclose(state.numpy(), np.full(4, 0.5), atol=1e-12)

    def test_zero_classifier_gives_uniform_loss(self, rng):
        model = jittered(spatial_config())
        for p in model.classify_mlp.parameters():
            p.data[...] = 0.0
        loss = softmax_nll(model.forward(rng.uniform(size=(28, 28))), 4)
        assert loss.item() == pytest.approx(np.log(10), abs=1e-12)

    def test_saturation_holds(self):
        model = zero_model(SMConfig(marks=2, stimulus_dim=1, hidden_dim=2, class_hidden_dim=2))
        # deposit output bias pushes every mark up by 5 each step
        model.deposit_mlp.output_linear.bias.data[...] = 5.0
        states = model.trace(np.ones((3, 1)))
        np.testing.assert_array_equal(states[-1].numpy(), [1.0, 1.0])

    def test_finishing_level_holds(self):
        config = SMConfig(marks=2, stimulus_dim=1, hidden_dim=2, class_hidden_dim=2, mark_init=0.4)
        model = zero_model(config)
        model.removal_mlp.output_linear.bias.data[...] = 3.0
        np.testing.assert_array_equal(model.trace(np.ones((2, 1)))[0].numpy(), [0.0, 0.0])

    def test_causality(self, rng):
        model = jittered(SMConfig(marks=4, stimulus_dim=3, hidden_dim=5, class_hidden_dim=4))
        sequence = rng.normal(size=(8, 3))
        altered = sequence.copy()
        altered[5:] = rng.normal(size=(3, 3))
        before = model.trace(sequence)
        after = model.trace(altered)
        for t in range(5):
            np.testing.assert_array_equal(before[t].numpy(), after[t].numpy())

    def test_batch_rows_match_single_sequences(self, rng):
        model = jittered(SMConfig(marks=4, stimulus_dim=3, hidden_dim=5, class_hidden_dim=4, num_classes=3))
        batch = rng.normal(size=(3, 6, 3))
        logits = model.forward(batch).data
        for row in range(3):
            np.testing.assert_allclose(logits[row], model.forward(batch[row]).data, atol=1e-12)

    def test_stimulus_mismatch(self, tiny_model):
        with pytest.raises(ShapeError):
            tiny_model.forward(np.zeros((4, 5)))

    def test_logits_shape(self, tiny_model):
        assert tiny_model.forward(np.zeros((2, 4, 3))).shape == (2, 3)


class TestGradients:

    def test_unrolled_spatial_loss(self, rng):
        model = jittered(spatial_config(), seed=4, scale=0.1)
        image = rng.uniform(0.0, 1.0, size=(28, 28))

        def loss():
            return softmax_nll(model.forward(image), 7)

        report = grad_check_report(loss, model.parameters(), floor=1e-6, samples_per_param=4, seed=0)
        assert report.checked > 0
        assert report.max_rel_error <= 1e-4

    def test_unrolled_loss_small_model(self, rng):
        model = jittered(SMConfig(marks=3, stimulus_dim=2, hidden_dim=4, class_hidden_dim=3, num_classes=4),
                         seed=2, scale=0.3)
        sequence = rng.normal(size=(6, 2))

        def loss():
            return softmax_nll(model.forward(sequence), 1)

        report = grad_check_report(loss, model.parameters(), floor=1e-6)
        assert report.checked > 0
        assert report.max_rel_error <= 1e-4


class TestPersistence:

    def test_save_and_load_model(self, tmp_path, rng):
        model = jittered(temporal_config())
        path = save_model(model, tmp_path / "smrnn.json")
        restored = load_model(path)
        assert restored.config == model.config
        sequence = rng.normal(size=(9, 4))
        np.testing.assert_array_equal(restored.forward(sequence).data, model.forward(sequence).data)

    def test_load_rejects_other_kinds(self, tmp_path):
        path = save_params(MLPBlock(2, 2, 2), tmp_path / "mlp.json", kind="mlp")
        with pytest.raises(ValueError):
            load_model(path)
