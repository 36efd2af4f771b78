import csv
import math
from dataclasses import dataclass
from typing import Dict

import numpy as np
import pytest
from PIL import Image

from src.distill import DistillConfig
from src.errors import OracleError, ShapeError
from src.flow import init_flow
from src.harness import (
    ConjugatePosterior,
    DPSReconstructor,
    EvalConfig,
    EvaluationReport,
    FlowReconstructor,
    MetricReport,
    averaging_experiment,
    blind_level_sweep,
    conjugate_check,
    conjugate_posterior,
    emit_image,
    energy_distance,
    energy_test,
    evaluate,
    mse,
    posterior_stats,
    psnr,
    resolve_workers,
    speed_comparison,
    ssim,
)
from src.operators import IdentityOperator, Measurement, MeasurementSet, gen_toy_dataset, measure_dataset
from src.samplers import SamplerConfig
from src.tensorcore import make_rng


@dataclass
class TruthLookup:
    """Cheats by returning the ground truth; pins the metrics at their best values."""

    truth: Dict[str, np.ndarray]
    nfe: int = 0
    n_samples: int = 1

    def __call__(self, measurement, rng):
        if measurement.id == "broken":
            raise RuntimeError("reconstruction exploded")
        return self.truth[measurement.id]


def eval_set(rng, n=4, kind="blobs8x8", spec="mask:p=0.3", sigma_y=0.05):
    data = gen_toy_dataset(kind, n, rng)
    measurements = measure_dataset(spec, data, sigma_y, rng)
    truth = {m.id: x for m, x in zip(measurements, data)}
    return MeasurementSet(measurements, spec, None, truth)


class TestMetrics:
    def test_psnr(self):
        x = np.zeros(4)
        assert psnr(x, x) == math.inf
        assert psnr(np.full(4, 0.1), x) == pytest.approx(20.0)
        assert psnr(np.full(4, 0.5), x, peak=0.5) == pytest.approx(0.0)
        with pytest.raises(ValueError):
            psnr(x, x, peak=0.0)

    def test_mse_shape_check(self):
        assert mse([1.0, 3.0], [1.0, 1.0]) == pytest.approx(2.0)
        with pytest.raises(ShapeError):
            mse(np.zeros(3), np.zeros(4))

    def test_ssim_extremes(self, rng):
        image = rng.uniform(size=(8, 8))
        assert ssim(image, image) == pytest.approx(1.0)
        assert ssim(np.full(16, 0.3), np.full(16, 0.3), window=4) == pytest.approx(1.0)
        ramp = np.linspace(0.0, 1.0, 16)
        assert ssim(ramp, 1.0 - ramp, window=4) < 0.0

    def test_ssim_reshapes_vectors(self, rng):
        image = rng.uniform(size=64)
        noisy = np.clip(image + 0.2 * rng.standard_normal(64), 0.0, 1.0)
        value = ssim(noisy, image, shape=(8, 8))
        assert 0.0 < value < 1.0
        with pytest.raises(ShapeError):
            ssim(image, image, window=9, shape=(8, 8))

    def test_energy_distance(self, rng):
        a = rng.standard_normal((200, 2))
        assert abs(energy_distance(a, a)) < 1e-12
        assert energy_distance(a, a + 1.0) > 0.5
        assert energy_test(a, rng.standard_normal((200, 2)) + 1.0, rng, n_permutations=100) < 0.05

    def test_resolve_workers(self):
        assert resolve_workers(3) == 3
        assert resolve_workers(0) >= 1


class TestConjugateOracle:
    def test_scalar_posterior(self):
        post = conjugate_posterior([0.0], [[1.0]], [[1.0]], 1.0, [2.0])
        np.testing.assert_allclose(post.mean, [1.0])
        np.testing.assert_allclose(post.cov, [[0.5]])

    def test_masked_coordinate_keeps_the_prior(self):
        post = conjugate_posterior([0.0, 0.0], np.diag([1.0, 0.25]), np.diag([1.0, 0.0]), 0.5, [1.0, 0.0])
        np.testing.assert_allclose(post.mean, [0.8, 0.0])
        np.testing.assert_allclose(post.cov, np.diag([0.2, 0.25]))

    def test_singular_prior(self):
        with pytest.raises(OracleError):
            conjugate_posterior([0.0, 0.0], np.diag([1.0, 0.0]), np.eye(2), 0.5, [0.0, 0.0])

    def test_invalid_covariance(self):
        with pytest.raises(OracleError):
            ConjugatePosterior(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
        with pytest.raises(OracleError):
            ConjugatePosterior(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_posterior_stats(self, rng):
        flow = init_flow(2, 2, rng, steps=1, hidden_width=4)
        single = posterior_stats(flow, np.zeros(2), 1, rng)
        assert single.cov is None and single.samples.shape == (1, 2)
        many = posterior_stats(flow, np.zeros(2), 20000, rng)
        np.testing.assert_allclose(many.mean, 0.0, atol=0.05)
        np.testing.assert_allclose(many.cov, np.eye(2), atol=0.05)

    @pytest.mark.slow
    def test_distilled_flow_matches_conjugate_posterior(self):
        cfg = DistillConfig(sigma_y=0.5, lr=1e-3, batch=256, iterations=20000, lr_schedule="cosine",
                            lr_final=1e-5, log_every=2000)
        report = conjugate_check(make_rng(0), cfg, n_draws=20000)
        assert [case.seen for case in report.cases] == [True] + [False] * 5
        for case in report.cases:
            assert case.mean_error < 0.05, case
            assert case.cov_error < 0.15, case
        assert report.passed


class TestEvaluate:
    def test_perfect_reconstructions(self, rng, tmp_path):
        mset = eval_set(rng)
        cfg = EvalConfig(image_shape=(8, 8), workers=2)
        report = evaluate(TruthLookup(mset.truth), mset, cfg, rng, csv_path=tmp_path / "metrics.csv")
        assert [r.id for r in report.reports] == [m.id for m in mset]
        for r in report.reports:
            assert r.psnr == math.inf
            assert r.ssim == pytest.approx(1.0)
            assert r.mse == 0.0 and r.error is None
        with open(tmp_path / "metrics.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 5
        assert rows[-1]["id"] == "mean"

    def test_failures_become_error_rows(self, rng):
        mset = eval_set(rng, n=3)
        mset.measurements[1].id = "broken"
        mset.truth["broken"] = mset.truth.pop("000001")
        report = evaluate(TruthLookup(mset.truth), mset, EvalConfig(image_shape=(8, 8), workers=1), rng)
        errors = [r.error for r in report.reports]
        assert errors[0] is None and errors[2] is None
        assert "exploded" in errors[1]
        assert len(report.succeeded) == 2
        assert report.aggregate().psnr == math.inf

    def test_needs_ground_truth(self, rng):
        mset = eval_set(rng, n=2)
        mset.truth = None
        with pytest.raises(ShapeError):
            evaluate(TruthLookup({}), mset, EvalConfig(), rng)

    def test_results_do_not_depend_on_worker_count(self, rng):
        mset = eval_set(rng, n=4)
        flow = init_flow(64, 128, make_rng(0), steps=1, hidden_width=8)
        method = FlowReconstructor(flow, n_samples=4)
        one = evaluate(method, mset, EvalConfig(image_shape=(8, 8), workers=1), make_rng(5))
        four = evaluate(method, mset, EvalConfig(image_shape=(8, 8), workers=4), make_rng(5))
        assert [r.mse for r in one.reports] == [r.mse for r in four.reports]
        assert all(r.nfe == 1 for r in one.reports)

    def test_dps_reconstructor(self, gauss_oracle, sched, rng):
        data = gen_toy_dataset("gauss2d", 2, rng)
        measurements = measure_dataset("id", data, 0.1, rng)
        mset = MeasurementSet(measurements, "id", None, {m.id: x for m, x in zip(measurements, data)})
        method = DPSReconstructor(gauss_oracle, sched, SamplerConfig(steps=20, zeta=0.0))
        report = evaluate(method, mset, EvalConfig(peak=4.0), rng)
        assert all(r.error is None and r.nfe == 20 for r in report.reports)

    def test_empty_aggregate(self):
        failed = MetricReport("a", math.nan, math.nan, math.nan, math.nan, 1, error="boom")
        assert EvaluationReport([failed]).aggregate().error == "no successful reconstructions"


class TestImages:
    def test_gray_image(self, tmp_path):
        path = emit_image(np.array([0.0, 1.0, 0.5, 2.0]), (2, 2), tmp_path / "img.pgm")
        assert path.read_bytes().startswith(b"P5")
        np.testing.assert_array_equal(np.asarray(Image.open(path)), [[0, 255], [128, 255]])

    def test_zero_image(self, tmp_path):
        path = emit_image(np.zeros(4), (2, 2), tmp_path / "zeros.pgm")
        np.testing.assert_array_equal(np.asarray(Image.open(path)), np.zeros((2, 2)))

    def test_color_image(self, tmp_path):
        path = emit_image(np.full(12, 1.0), (2, 2, 3), tmp_path / "img.ppm")
        assert path.read_bytes().startswith(b"P6")

    def test_bad_shapes(self, tmp_path):
        with pytest.raises(ShapeError):
            emit_image(np.zeros(5), (2, 2), tmp_path / "a.pgm")
        with pytest.raises(ShapeError):
            emit_image(np.zeros(8), (2, 2, 2), tmp_path / "b.ppm")


class TestExperiments:
    def test_speed_comparison(self, gauss_oracle, sched, rng):
        flow = init_flow(2, 2, rng, steps=1, hidden_width=8)
        m = Measurement("a", np.array([0.5, 0.1]), 0.1, IdentityOperator(2))
        report = speed_comparison(flow, gauss_oracle, sched, m, SamplerConfig(steps=50), rng, warmup=1, repeats=3)
        assert report.flow_nfe == 1 and report.dps_nfe == 50
        assert report.speedup > 0.0

    def test_averaging_beats_single_draws(self, rng):
        mset = eval_set(rng, n=3)
        flow = init_flow(64, 128, rng, steps=1, hidden_width=8)
        report = averaging_experiment(flow, mset, rng, n_samples=64)
        assert report.win_rate == 1.0

    def test_blind_level_sweep(self, rng):
        data = gen_toy_dataset("blobs8x8", 4, rng)
        flow = init_flow(64, 64, rng, steps=1, hidden_width=8, condition_mode="masked_signal")
        reports = blind_level_sweep(flow, data, [0.2, 0.6], 0.0, rng, n_samples=2)
        assert [r.level for r in reports] == [0.2, 0.6]
        assert reports[0].psnr_masked_input > reports[1].psnr_masked_input

    def test_level_sweep_conditions_in_the_flows_mode(self, rng):
        data = gen_toy_dataset("blobs8x8", 2, rng)
        flow = init_flow(64, 128, rng, steps=1, hidden_width=8)
        reports = blind_level_sweep(flow, data, [0.5], 0.0, rng, n_samples=2)
        assert len(reports) == 1 and np.isfinite(reports[0].psnr_reconstruction)


@pytest.fixture(scope="module")
def blobs_score():
    from src.diffusion import NoiseSchedule
    from src.score import ScoreTrainConfig, train_score

    rng = make_rng(31)
    cfg = ScoreTrainConfig(lr=1e-3, batch=128, iterations=4000, holdout=256, log_every=1000)
    data = gen_toy_dataset("blobs8x8", 4096, rng)
    return train_score(data, cfg, NoiseSchedule(), rng, hidden_width=128, hidden_layers=3).net


def distill_on_blobs(score, spec, condition_mode, rng, sigma_y):
    from src.diffusion import NoiseSchedule
    from src.distill import distill_train

    measurements = measure_dataset(spec, gen_toy_dataset("blobs8x8", 512, rng), sigma_y, rng)
    cond_dim = 128 if condition_mode == "masked_signal_plus_mask" else 64
    flow = init_flow(64, cond_dim, rng, steps=4, hidden_width=64, condition_mode=condition_mode)
    cfg = DistillConfig(sigma_y=sigma_y, lr=5e-4, batch=32, iterations=3000, lr_schedule="cosine",
                        lr_final=1e-5, log_every=500)
    return distill_train(flow, score, measurements, cfg, NoiseSchedule(), rng).flow


@pytest.mark.slow
def test_averaged_draws_beat_single_draws_after_distillation(blobs_score):
    rng = make_rng(32)
    flow = distill_on_blobs(blobs_score, "mask:p=0.3", "masked_signal_plus_mask", rng, 0.1)
    held_out = eval_set(rng, n=100, spec="mask:p=0.3", sigma_y=0.1)
    report = averaging_experiment(flow, held_out, rng, n_samples=128)
    assert len(report.psnr_single) == 100
    assert report.win_rate >= 0.9


@pytest.mark.slow
def test_blind_flow_improves_on_the_masked_input_at_every_level(blobs_score):
    rng = make_rng(33)
    flow = distill_on_blobs(blobs_score, "mask:p=0.3-0.6", "masked_signal", rng, 0.05)
    held_out = gen_toy_dataset("blobs8x8", 32, rng)
    reports = blind_level_sweep(flow, held_out, [0.3, 0.45, 0.6], 0.05, rng, n_samples=32)
    for report in reports:
        assert report.psnr_reconstruction > report.psnr_masked_input, report


def test_psnr_falls_as_noise_grows(rng):
    clean = rng.uniform(size=256)
    noise = rng.standard_normal(256)
    values = [psnr(clean + level * noise, clean) for level in (0.01, 0.05, 0.1, 0.2)]
    assert values == sorted(values, reverse=True)
    assert len(set(values)) == 4


@pytest.mark.slow
def test_flow_is_much_faster_than_dps(sched):
    from src.score import init_score_network

    rng = make_rng(21)
    score = init_score_network(64, sched, rng, hidden_width=64, hidden_layers=3)
    flow = init_flow(64, 128, rng, steps=4, hidden_width=32)
    mset = eval_set(rng, n=1)
    report = speed_comparison(flow, score, sched, mset.measurements[0], SamplerConfig(steps=1000), rng,
                              warmup=2, repeats=5)
    assert report.speedup >= 50.0
