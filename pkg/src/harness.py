"""
ampost - Evaluation Harness

Metrics, the conjugate-Gaussian posterior oracle, reconstruction
evaluation over measurement sets, image export and the experiment drivers
(posterior averaging, blind mask-level sweep, flow vs DPS timing and the
end-to-end conjugate check).
"""

import asyncio
import csv
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import psutil
from PIL import Image
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.distance import cdist

from .diffusion import NoiseSchedule
from .distill import DistillConfig, distill_train
from .errors import OracleError, ShapeError
from .flow import ConditionalFlow, condition_vector, init_flow, sample_posterior
from .operators import MaskOperator, Measurement, MeasurementSet, measure, parse_operator_spec, random_mask
from .samplers import SamplerConfig, dps_sample
from .score import AnalyticGaussianScore, ScoreModel
from .tensorcore import TensorLike, as_tensor, spawn_rngs

logger = logging.getLogger(__name__)


def resolve_workers(workers: int) -> int:
    """Worker count; 0 means one per physical core."""
    if workers > 0:
        return workers
    return max(psutil.cpu_count(logical=False) or 1, 1)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _pair(x: TensorLike, ref: TensorLike) -> Tuple[np.ndarray, np.ndarray]:
    x = as_tensor(x).data
    ref = as_tensor(ref).data
    if x.shape != ref.shape:
        raise ShapeError(f"shape {x.shape} != reference shape {ref.shape}")
    return x, ref


def mse(x: TensorLike, ref: TensorLike) -> float:
    x, ref = _pair(x, ref)
    return float(np.mean((x - ref) ** 2))


def psnr(x: TensorLike, ref: TensorLike, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) in dB; +inf when the inputs are identical."""
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    err = mse(x, ref)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def ssim(x: TensorLike, ref: TensorLike, window: int = 7, peak: float = 1.0,
         shape: Optional[Tuple[int, ...]] = None, k1: float = 0.01, k2: float = 0.03) -> float:
    """
    Mean structural similarity over all uniform windows.

    Args:
        x: Signal
        ref: Reference of the same shape
        window: Window side length (1-D windows for vectors)
        peak: Dynamic range
        shape: Reshape both inputs to this image shape first

    Raises:
        ShapeError: If the window does not fit in the signal.
    """
    x, ref = _pair(x, ref)
    if shape is not None:
        x, ref = x.reshape(shape), ref.reshape(shape)
    window_shape = (window,) * x.ndim
    if any(window > n for n in x.shape):
        raise ShapeError(f"window {window} larger than signal {x.shape}")
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    axes = tuple(range(-x.ndim, 0))
    px = np.lib.stride_tricks.sliding_window_view(x, window_shape)
    pr = np.lib.stride_tricks.sliding_window_view(ref, window_shape)
    mu_x, mu_r = px.mean(axis=axes), pr.mean(axis=axes)
    var_x = px.var(axis=axes)
    var_r = pr.var(axis=axes)
    cov = (px * pr).mean(axis=axes) - mu_x * mu_r
    num = (2.0 * mu_x * mu_r + c1) * (2.0 * cov + c2)
    den = (mu_x ** 2 + mu_r ** 2 + c1) * (var_x + var_r + c2)
    return float(np.mean(num / den))


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sample energy distance 2 E|a-b| - E|a-a'| - E|b-b'|."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    return float(2.0 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean())


def energy_test(a: np.ndarray, b: np.ndarray, rng: np.random.Generator, n_permutations: int = 200) -> float:
    """Permutation p-value of the energy distance between two samples."""
    observed = energy_distance(a, b)
    pooled = np.concatenate([np.atleast_2d(a), np.atleast_2d(b)])
    n_a = len(a)
    exceed = 0
    for _ in range(n_permutations):
        order = rng.permutation(len(pooled))
        if energy_distance(pooled[order[:n_a]], pooled[order[n_a:]]) >= observed:
            exceed += 1
    return (exceed + 1) / (n_permutations + 1)


# ---------------------------------------------------------------------------
# Conjugate oracle
# ---------------------------------------------------------------------------

@dataclass
class ConjugatePosterior:
    """Gaussian posterior N(mean, cov)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        if not np.allclose(self.cov, self.cov.T, atol=1e-12):
            raise OracleError("posterior covariance is not symmetric")
        try:
            cho_factor(self.cov)
        except LinAlgError:
            raise OracleError("posterior covariance is not positive definite") from None


def conjugate_posterior(mu0: np.ndarray, cov0: np.ndarray, A: np.ndarray, sigma_y: float,
                        y: np.ndarray) -> ConjugatePosterior:
    """
    Posterior of x ~ N(mu0, cov0) given y = A x + sigma_y n.

        cov = (cov0^-1 + A^T A / sigma_y^2)^-1
        mean = cov (cov0^-1 mu0 + A^T y / sigma_y^2)

    Raises:
        OracleError: If cov0 is singular or not positive definite.
    """
    mu0 = np.atleast_1d(np.asarray(mu0, dtype=np.float64))
    cov0 = np.atleast_2d(np.asarray(cov0, dtype=np.float64))
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    try:
        prior_factor = cho_factor(cov0)
    except LinAlgError:
        raise OracleError("prior covariance is singular or not positive definite") from None
    eye = np.eye(mu0.size)
    precision = cho_solve(prior_factor, eye) + A.T @ A / (sigma_y * sigma_y)
    cov = cho_solve(cho_factor(precision), eye)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (cho_solve(prior_factor, mu0) + A.T @ y / (sigma_y * sigma_y))
    return ConjugatePosterior(mean=mean, cov=cov)


@dataclass
class PosteriorStats:
    """Moments of N flow draws; ``cov`` is None for a single draw."""

    mean: np.ndarray
    cov: Optional[np.ndarray]
    samples: np.ndarray


def posterior_stats(flow: ConditionalFlow, y: TensorLike, n: int, rng: np.random.Generator) -> PosteriorStats:
    """Sample mean (the N-averaged reconstruction) and covariance of ``n`` flow draws."""
    samples = sample_posterior(flow, y, n, rng)
    cov = np.atleast_2d(np.cov(samples, rowvar=False)) if n > 1 else None
    return PosteriorStats(mean=samples.mean(axis=0), cov=cov, samples=samples)


# ---------------------------------------------------------------------------
# Reconstruction and evaluation
# ---------------------------------------------------------------------------

class Reconstructor(Protocol):
    """Maps a measurement to a reconstruction; ``nfe`` is per sample."""

    nfe: int
    n_samples: int

    def __call__(self, measurement: Measurement, rng: np.random.Generator) -> np.ndarray: ...


@dataclass
class FlowReconstructor:
    """Mean of ``n_samples`` flow draws (N = 1 gives a single posterior sample)."""

    flow: ConditionalFlow
    n_samples: int = 1
    nfe: int = 1

    def __call__(self, measurement: Measurement, rng: np.random.Generator) -> np.ndarray:
        y = condition_vector(measurement, self.flow.condition_mode)
        return sample_posterior(self.flow, y, self.n_samples, rng).mean(axis=0)


@dataclass
class DPSReconstructor:
    """Mean of ``n_samples`` DPS chains."""

    score: ScoreModel
    sched: NoiseSchedule
    cfg: SamplerConfig
    n_samples: int = 1

    @property
    def nfe(self) -> int:
        return self.cfg.steps

    def __call__(self, measurement: Measurement, rng: np.random.Generator) -> np.ndarray:
        return dps_sample(self.score, self.sched, measurement, self.cfg, rng, n=self.n_samples).samples.mean(axis=0)


@dataclass
class MetricReport:
    """
    Metrics of one reconstruction.

    Attributes:
        id: Measurement id (``mean`` for the aggregate row)
        psnr: dB, +inf for a perfect reconstruction
        ssim: Structural similarity
        mse: Mean squared error
        wall_time: Seconds per sample
        nfe: Network evaluations per sample
        error: Failure message if the reconstruction raised
    """

    id: str
    psnr: float
    ssim: float
    mse: float
    wall_time: float
    nfe: int
    error: Optional[str] = None


@dataclass
class EvalConfig:
    n_samples: int = 128
    peak: float = 1.0
    ssim_window: int = 7
    image_shape: Optional[Tuple[int, ...]] = None
    timing_warmup: int = 10
    timing_repeats: int = 100
    workers: int = 0

    @classmethod
    def from_config(cls, config: Mapping[str, Any]) -> "EvalConfig":
        raw_shape = str(config["eval.image_shape"]).strip()
        shape = tuple(int(s) for s in raw_shape.lower().split("x")) if raw_shape else None
        return cls(
            n_samples=int(config["eval.n_samples"]),
            peak=float(config["eval.peak"]),
            ssim_window=int(config["eval.ssim_window"]),
            image_shape=shape,
            timing_warmup=int(config["eval.timing_warmup"]),
            timing_repeats=int(config["eval.timing_repeats"]),
            workers=int(config["workers"]),
        )


def score_reconstruction(mid: str, x: np.ndarray, truth: np.ndarray, cfg: EvalConfig,
                         wall_time: float = 0.0, nfe: int = 1) -> MetricReport:
    window = min(cfg.ssim_window, *(cfg.image_shape or truth.shape))
    return MetricReport(
        id=mid,
        psnr=psnr(x, truth, cfg.peak),
        ssim=ssim(x, truth, window, cfg.peak, cfg.image_shape),
        mse=mse(x, truth),
        wall_time=wall_time,
        nfe=nfe,
    )


@dataclass
class EvaluationReport:
    reports: List[MetricReport] = field(default_factory=list)

    @property
    def succeeded(self) -> List[MetricReport]:
        return [r for r in self.reports if r.error is None]

    def aggregate(self) -> MetricReport:
        ok = self.succeeded
        if not ok:
            return MetricReport("mean", math.nan, math.nan, math.nan, math.nan, 0, error="no successful reconstructions")
        return MetricReport(
            id="mean",
            psnr=float(np.mean([r.psnr for r in ok])),
            ssim=float(np.mean([r.ssim for r in ok])),
            mse=float(np.mean([r.mse for r in ok])),
            wall_time=float(np.mean([r.wall_time for r in ok])),
            nfe=ok[0].nfe,
        )


async def _evaluate_async(method: Reconstructor, measurements: Sequence[Measurement], truth: Mapping[str, np.ndarray],
                          cfg: EvalConfig, rngs: Sequence[np.random.Generator]) -> List[Any]:
    semaphore = asyncio.Semaphore(resolve_workers(cfg.workers))

    async def run_one(measurement: Measurement, rng: np.random.Generator) -> MetricReport:
        async with semaphore:
            start = time.perf_counter()
            x = await asyncio.to_thread(method, measurement, rng)
            elapsed = (time.perf_counter() - start) / max(method.n_samples, 1)
            return score_reconstruction(measurement.id, x, truth[measurement.id], cfg, elapsed, method.nfe)

    tasks = [run_one(m, rng) for m, rng in zip(measurements, rngs)]
    return await asyncio.gather(*tasks, return_exceptions=True)


def evaluate(method: Reconstructor, measurement_set: MeasurementSet, cfg: EvalConfig, rng: np.random.Generator,
             csv_path: Optional[Union[str, Path]] = None) -> EvaluationReport:
    """
    Reconstruct every measurement and score it against held-out ground truth.

    Measurements run on ``cfg.workers`` threads (0 = physical cores), each
    with its own pre-spawned generator, so results do not depend on the
    worker count. Ground truth is only read here, never by the method.

    Returns:
        EvaluationReport with one MetricReport per measurement.
    """
    if measurement_set.truth is None:
        raise ShapeError("evaluation needs a measurement set with ground truth")
    truth = measurement_set.truth
    measurements = list(measurement_set.measurements)
    rngs = spawn_rngs(rng, len(measurements))
    logger.info("evaluating %d measurements on %d workers", len(measurements), resolve_workers(cfg.workers))
    results = asyncio.run(_evaluate_async(method, measurements, truth, cfg, rngs))

    report = EvaluationReport()
    for measurement, result in zip(measurements, results):
        if isinstance(result, Exception):
            logger.error("reconstruction of %s failed: %s", measurement.id, result)
            report.reports.append(MetricReport(measurement.id, math.nan, math.nan, math.nan, math.nan,
                                               method.nfe, error=str(result)))
        else:
            logger.debug("%s: psnr=%.2f ssim=%.3f", result.id, result.psnr, result.ssim)
            report.reports.append(result)
    if csv_path is not None:
        write_metrics_csv(csv_path, report.reports + [report.aggregate()])
    return report


METRIC_FIELDS = ("id", "psnr", "ssim", "mse", "wall_time", "nfe", "error")


def write_metrics_csv(path: Union[str, Path], reports: Sequence[MetricReport]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        for report in reports:
            row = asdict(report)
            row["error"] = row["error"] or ""
            writer.writerow(row)
    logger.info("wrote %d metric rows to %s", len(reports), path)


# ---------------------------------------------------------------------------
# Images and timing
# ---------------------------------------------------------------------------

def emit_image(signal: TensorLike, shape: Tuple[int, ...], path: Union[str, Path]) -> Path:
    """
    Write a signal as an 8-bit binary PGM (h, w) or PPM (h, w, 3).

    Values are clamped to [0, 1] and scaled to 0..255.
    """
    values = as_tensor(signal).data
    if values.size != int(np.prod(shape)):
        raise ShapeError(f"{values.size} values do not fill image shape {shape}")
    if len(shape) not in (2, 3) or (len(shape) == 3 and shape[2] != 3):
        raise ShapeError(f"image shape must be (h, w) or (h, w, 3), got {shape}")
    pixels = np.rint(np.clip(values.reshape(shape), 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path, format="PPM")
    return path


def median_time(fn: Callable[[], Any], warmup: int = 10, repeats: int = 100) -> float:
    """Median wall time of ``fn`` over ``repeats`` calls after ``warmup`` calls."""
    for _ in range(warmup):
        fn()
    timings = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        timings.append(time.perf_counter() - start)
    return statistics.median(timings)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

@dataclass
class SpeedReport:
    flow_seconds: float
    dps_seconds: float
    flow_nfe: int
    dps_nfe: int

    @property
    def speedup(self) -> float:
        return self.dps_seconds / self.flow_seconds


def speed_comparison(flow: ConditionalFlow, score: ScoreModel, sched: NoiseSchedule, measurement: Measurement,
                     sampler_cfg: SamplerConfig, rng: np.random.Generator, warmup: int = 10,
                     repeats: int = 100) -> SpeedReport:
    """Median per-reconstruction time of one flow pass vs one DPS chain."""
    y = condition_vector(measurement, flow.condition_mode)
    flow_seconds = median_time(lambda: sample_posterior(flow, y, 1, rng), warmup, repeats)
    dps_seconds = median_time(lambda: dps_sample(score, sched, measurement, sampler_cfg, rng), warmup, repeats)
    report = SpeedReport(flow_seconds, dps_seconds, flow_nfe=1, dps_nfe=sampler_cfg.steps)
    logger.info("flow %.3gs vs DPS %.3gs per reconstruction (%.0fx)", flow_seconds, dps_seconds, report.speedup)
    return report


@dataclass
class AveragingReport:
    psnr_single: List[float]
    psnr_mean: List[float]

    @property
    def win_rate(self) -> float:
        wins = sum(m > s for m, s in zip(self.psnr_mean, self.psnr_single))
        return wins / len(self.psnr_single)


def averaging_experiment(flow: ConditionalFlow, measurement_set: MeasurementSet, rng: np.random.Generator,
                         n_samples: int = 128, peak: float = 1.0) -> AveragingReport:
    """PSNR of a single posterior draw vs the mean of ``n_samples`` draws, per measurement."""
    if measurement_set.truth is None:
        raise ShapeError("averaging experiment needs ground truth")
    single, averaged = [], []
    for measurement in measurement_set:
        y = condition_vector(measurement, flow.condition_mode)
        truth = measurement_set.truth[measurement.id]
        draws = sample_posterior(flow, y, n_samples, rng)
        single.append(psnr(draws[0], truth, peak))
        averaged.append(psnr(draws.mean(axis=0), truth, peak))
    report = AveragingReport(single, averaged)
    logger.info("N=%d mean beats a single draw on %.0f%% of %d measurements", n_samples, 100 * report.win_rate,
                len(single))
    return report


@dataclass
class LevelReport:
    level: float
    psnr_reconstruction: float
    psnr_masked_input: float


def blind_level_sweep(flow: ConditionalFlow, data: np.ndarray, levels: Sequence[float], sigma_y: float,
                      rng: np.random.Generator, n_samples: int = 16, peak: float = 1.0) -> List[LevelReport]:
    """
    Reconstruct held-out signals masked at each level and compare with the
    zero-filled masked input. The flow is conditioned in its own mode; a
    blind flow never sees the mask or the level.
    """
    reports = []
    for level in levels:
        recon_scores, input_scores = [], []
        for x in np.atleast_2d(data):
            op = MaskOperator(x.size, random_mask(x.size, level, rng))
            measurement = measure(op, x, sigma_y, rng)
            y = condition_vector(measurement, flow.condition_mode)
            recon = sample_posterior(flow, y, n_samples, rng).mean(axis=0)
            recon_scores.append(psnr(recon, x, peak))
            input_scores.append(psnr(measurement.y, x, peak))
        reports.append(LevelReport(level, float(np.mean(recon_scores)), float(np.mean(input_scores))))
        logger.info("mask level %.2f: reconstruction %.2f dB vs masked input %.2f dB", level,
                    reports[-1].psnr_reconstruction, reports[-1].psnr_masked_input)
    return reports


@dataclass
class ConjugateCase:
    y: np.ndarray
    mean_error: float
    cov_error: float
    seen: bool

    def passed(self, mean_tol: float = 0.05, cov_tol: float = 0.15) -> bool:
        return self.mean_error < mean_tol and self.cov_error < cov_tol


@dataclass
class ConjugateReport:
    cases: List[ConjugateCase]
    flow: ConditionalFlow

    @property
    def passed(self) -> bool:
        return all(case.passed() for case in self.cases)


def conjugate_check(rng: np.random.Generator, cfg: DistillConfig, sched: Optional[NoiseSchedule] = None,
                    mu0: Sequence[float] = (0.0, 0.0), var0: Sequence[float] = (1.0, 0.25), op_spec: str = "id",
                    sigma_y: float = 0.5, n_train: int = 2048, n_held_out: int = 5, n_draws: int = 20000,
                    flow_steps: int = 4, hidden_width: int = 64,
                    progress: Optional[Callable[[int], None]] = None) -> ConjugateReport:
    """
    Distill a flow against the exact score of a Gaussian prior and compare its
    posterior moments with the conjugate posterior on seen and held-out y.

    Args:
        rng: Generator for everything
        cfg: Distillation settings
        sched: Noise schedule (default VP constants)
        mu0: Prior mean
        var0: Prior variances (diagonal)
        op_spec: Linear forward operator
        sigma_y: Measurement noise
        n_train: Measurements in the distillation set
        n_held_out: Measurements never seen in training
        n_draws: Flow draws per posterior estimate
        flow_steps: Flow steps of the distilled flow
        hidden_width: Width of its coupling nets
        progress: Called with each finished step

    Returns:
        ConjugateReport with the mean max-abs error and relative Frobenius
        covariance error for the first training measurement and every held-out one.
    """
    sched = sched or NoiseSchedule()
    mu0 = np.asarray(mu0, dtype=np.float64)
    var0 = np.asarray(var0, dtype=np.float64)
    oracle = AnalyticGaussianScore(mu0, var0, sched)
    spec = parse_operator_spec(op_spec)
    data_rng, train_rng, eval_rng = spawn_rngs(rng, 3)

    def draw(n: int, prefix: str) -> List[Measurement]:
        signals = oracle.sample(data_rng, n)
        return [measure(spec.build(mu0.size, data_rng), x, sigma_y, data_rng, id=f"{prefix}{i:04d}")
                for i, x in enumerate(signals)]

    train = draw(n_train, "train")
    held_out = draw(n_held_out, "held")
    cond_dim = condition_vector(train[0]).size
    flow = init_flow(mu0.size, cond_dim, train_rng, steps=flow_steps, hidden_width=hidden_width)
    callback = (lambda b: progress(b.step)) if progress else None
    flow = distill_train(flow, oracle, train, cfg, sched, train_rng, callback=callback).flow

    cases = []
    for measurement, seen in [(train[0], True)] + [(m, False) for m in held_out]:
        A = measurement.require_op().matrix()
        target = conjugate_posterior(mu0, np.diag(var0), A, sigma_y, measurement.y)
        stats = posterior_stats(flow, condition_vector(measurement, flow.condition_mode), n_draws, eval_rng)
        mean_error = float(np.max(np.abs(stats.mean - target.mean)))
        cov_error = float(np.linalg.norm(stats.cov - target.cov) / np.linalg.norm(target.cov))
        cases.append(ConjugateCase(measurement.y.copy(), mean_error, cov_error, seen))
        logger.info("%s y=%s: mean err %.4f, cov err %.3f", "seen" if seen else "held-out",
                    np.round(measurement.y, 3), mean_error, cov_error)
    return ConjugateReport(cases, flow)
