"""
Tests for parameter reports, confidence intervals, curves and the experiment runner.
"""
import json
import math

import pytest

from app.schemas.models import (
    CurveRecord,
    DatasetKind,
    ExperimentConfig,
    IntervalMethod,
    ModelKind,
    RunReport,
    RunResult,
    RunStatus,
    TrainConfig,
)
from app.services import bench
from app.services.baselines import TOPOLOGIES, build_model
from app.services.bench import (
    ExperimentError,
    aggregate,
    confidence_interval,
    curve_path,
    emit_curves,
    gradient_report,
    read_curves,
    report_params,
    run_experiment,
)
from app.services.nn import ModelConfigError
from app.services.optim import TrainingDivergedError

PAIRINGS = [(ModelKind.SM_RNN, DatasetKind.SPATIAL), (ModelKind.SM_RNN, DatasetKind.TEMPORAL), *TOPOLOGIES]


class TestParamReport:

    def test_spatial_sm_rnn_terms(self):
        report = report_params(ModelKind.SM_RNN, DatasetKind.SPATIAL)
        assert [t.render() for t in report.terms] == ["240 · 2", "(880 + 20 + 315) · 2", "(160 + 10 + 110)", "10"]
        assert report.terms[-1].label == "final PReLU"
        assert report.expression == "240 · 2 + (880 + 20 + 315) · 2 + (160 + 10 + 110) + 10 = 3,200"
        assert report.total == 3200
        assert abs(report.total - report.published_total) == 10
        assert report.note

    def test_temporal_sm_rnn_expression(self):
        report = report_params(ModelKind.SM_RNN, DatasetKind.TEMPORAL)
        assert report.expression == "930 · 2 + (700 + 20 + 630) · 2 + (620 + 20 + 210 + 10) = 5,420"
        assert report.total == report.published_total == 5420

    def test_temporal_lstm(self):
        report = report_params(ModelKind.LSTM, DatasetKind.TEMPORAL)
        assert [t.subtotal for t in report.terms] == [2000, 3280, 210]
        assert report.total == 5490

    def test_temporal_rnn(self):
        report = report_params(ModelKind.RNN, DatasetKind.TEMPORAL)
        assert [t.subtotal for t in report.terms] == [3360, 2120]
        assert report.terms[1].parts == [1550, 50, 510, 10]
        assert report.total == 5480

    @pytest.mark.parametrize("kind, dataset", PAIRINGS)
    def test_arithmetic_matches_instantiated_model(self, kind, dataset):
        assert report_params(kind, dataset).total == build_model(kind, dataset, seed=None).param_count()

    def test_invalid_pairing(self):
        with pytest.raises(ModelConfigError):
            report_params(ModelKind.FF_NN, DatasetKind.TEMPORAL)


class TestConfidenceInterval:

    def test_two_rates_student_t(self):
        mean, half_width = confidence_interval([0.9, 0.95])
        assert mean == pytest.approx(0.925)
        assert half_width == pytest.approx(63.657 * 0.0353553 / math.sqrt(2), rel=1e-4)

    def test_normal_z(self):
        _, half_width = confidence_interval([0.9, 0.95], method=IntervalMethod.NORMAL_Z)
        assert half_width == pytest.approx(2.5758 * 0.0353553 / math.sqrt(2), rel=1e-4)

    def test_equal_rates(self):
        assert confidence_interval([0.8] * 5) == (pytest.approx(0.8), 0.0)

    def test_translation_invariance(self):
        rates = [0.81, 0.84, 0.9, 0.86]
        mean, half_width = confidence_interval(rates)
        shifted_mean, shifted_half = confidence_interval([r + 0.05 for r in rates])
        assert shifted_mean == pytest.approx(mean + 0.05)
        assert shifted_half == pytest.approx(half_width)

    def test_needs_two_rates(self):
        with pytest.raises(ExperimentError):
            confidence_interval([0.9])


class TestAggregate:

    def test_failed_runs_are_excluded(self):
        results = [
            RunResult(run=2, seed=2, status=RunStatus.COMPLETED, test_rate=0.8),
            RunResult(run=0, seed=0, status=RunStatus.COMPLETED, test_rate=0.9),
            RunResult(run=1, seed=1, status=RunStatus.FAILED, error="diverged"),
        ]
        summary = aggregate(results)
        assert summary["rates"] == [0.9, 0.8]
        assert summary["failed_runs"] == [1]
        assert (summary["mean"], summary["half_width"]) == confidence_interval([0.9, 0.8])

    def test_single_rate_has_no_interval(self):
        summary = aggregate([RunResult(run=0, seed=0, status=RunStatus.COMPLETED, test_rate=0.7)])
        assert summary["mean"] == 0.7 and summary["half_width"] is None


class TestCurves:

    def _report(self, curves):
        runs = [RunResult(run=r, seed=r, status=RunStatus.COMPLETED, test_rate=0.5, curve=c)
                for r, c in enumerate(curves)]
        return RunReport(model=ModelKind.SM_RNN, dataset=DatasetKind.SPATIAL, parameter_count=3200,
                         runs=runs, config=ExperimentConfig())

    def test_empty_curve_is_header_only(self, tmp_path):
        paths = emit_curves(self._report([[]]), tmp_path / "report.json")
        assert paths[0].read_text() == "iteration,loss,train_accuracy\n"

    def test_parse_back_is_exact(self, tmp_path):
        records = [
            CurveRecord(iteration=1, loss=2.302585092994046, train_accuracy=0.1015625),
            CurveRecord(iteration=10, loss=1.0 / 3.0, train_accuracy=0.7),
        ]
        paths = emit_curves(self._report([records, records[:1]]), tmp_path / "out" / "report.json")
        assert paths[0] == curve_path(tmp_path / "out" / "report.json", 0)
        assert read_curves(paths[0]) == records
        assert len(read_curves(paths[1])) == 1


class TestExperiment:

    def _config(self, out, **overrides):
        values = dict(
            model=ModelKind.SM_RNN,
            dataset=DatasetKind.SPATIAL,
            runs=3,
            train=TrainConfig(epochs=1, batch_size=16, seed=11),
            train_size=60,
            test_size=30,
            synthetic=100,
            out=out,
        )
        values.update(overrides)
        return ExperimentConfig(**values)

    def test_three_runs(self, tmp_path, app_settings):
        report = run_experiment(self._config(tmp_path / "smrnn.json"), app_settings)
        assert len(report.rates) == 3
        assert [r.seed for r in report.runs] == [11, 12, 13]
        assert report.half_width is not None and report.half_width >= 0
        assert report.parameter_count == 3200 and report.published_complexity == 3190
        assert all(row.source == "paper" for row in report.literature)
        assert report.preprocessing["pixel_scale"] == "value / 255"
        assert (tmp_path / "smrnn.json").exists()
        assert all(curve_path(tmp_path / "smrnn.json", r).exists() for r in range(3))

    def test_untrained_runs(self, tmp_path, app_settings):
        cfg = self._config(tmp_path / "untrained.json", runs=1, train=TrainConfig(epochs=0))
        report = run_experiment(cfg, app_settings)
        assert report.runs[0].curve == []
        assert report.half_width is None
        assert 0.0 <= report.mean <= 0.5

    def test_output_is_deterministic(self, tmp_path, app_settings):
        cfg = self._config(tmp_path / "det.json", model=ModelKind.LSTM, dataset=DatasetKind.TEMPORAL, workers=2)
        outputs = []
        for _ in range(2):
            run_experiment(cfg, app_settings)
            document = json.loads((tmp_path / "det.json").read_text())
            document.pop("wall_clock_s")
            curves = [curve_path(tmp_path / "det.json", r).read_bytes() for r in range(3)]
            outputs.append((document, curves))
        assert outputs[0] == outputs[1]

    def test_failed_run_is_flagged(self, tmp_path, app_settings, monkeypatch):
        original_fit = bench.fit

        def flaky_fit(model, dataset, cfg):
            if cfg.seed == 12:
                raise TrainingDivergedError(4, "loss became non-finite")
            return original_fit(model, dataset, cfg)

        monkeypatch.setattr(bench, "fit", flaky_fit)
        report = run_experiment(self._config(tmp_path / "flaky.json"), app_settings)
        assert report.failed_runs == [1]
        assert len(report.rates) == 2
        assert report.runs[1].status == RunStatus.FAILED and "iteration 4" in report.runs[1].error

    def test_default_output_path(self, app_settings):
        run_experiment(self._config(None, runs=2), app_settings)
        assert (app_settings.results_dir / "sm-rnn_spatial.json").exists()

    def test_missing_dataset(self, tmp_path, app_settings):
        with pytest.raises(ExperimentError):
            run_experiment(self._config(tmp_path / "x.json", synthetic=None), app_settings)

    def test_ff_nn_temporal_is_invalid(self):
        with pytest.raises(ValueError):
            ExperimentConfig(model=ModelKind.FF_NN, dataset=DatasetKind.TEMPORAL)


class TestGradientReport:

    @pytest.mark.parametrize("kind, dataset", [
        (ModelKind.SM_RNN, DatasetKind.SPATIAL),
        (ModelKind.LSTM, DatasetKind.TEMPORAL),
    ])
    def test_full_unrolled_loss(self, kind, dataset, app_settings):
        report = gradient_report(kind, dataset, seed=0, settings=app_settings)
        assert report.checked > 0
        assert report.max_rel_error <= 1e-4
