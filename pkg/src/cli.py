"""
ampost - CLI Interface

Command-line surface: data synthesis, score training, flow distillation,
sampling, evaluation and the conjugate oracle check.
"""

import csv
import dataclasses
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import click
import numpy as np
import psutil
from rich.console import Console
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table

from . import __version__
from .config import load_config
from .container import write_container
from .diffusion import NoiseSchedule
from .distill import DistillConfig, distill_train, write_loss_trace
from .errors import AmpostError
from .flow import condition_vector, flow_from_config, load_flow, sample_posterior
from .harness import (
    DPSReconstructor,
    EvalConfig,
    FlowReconstructor,
    conjugate_check,
    emit_image,
    evaluate,
    resolve_workers,
)
from .operators import (
    DATASET_SHAPES,
    gen_toy_dataset,
    ingest_dataset,
    load_measurements,
    measure_dataset,
    save_dataset,
    save_measurements,
    stack_dataset,
)
from .samplers import SamplerConfig, dps_sample, reverse_sde_sample
from .score import ScoreTrainConfig, load_score, train_score
from .tensorcore import make_rng

# Initialize rich console
console = Console()

METHODS = ("flow", "dps", "uncond")


class AmpostCLI:
    """
    Shared state of one ``ampost`` invocation.

    Attributes:
        config: Effective flat configuration
        config_file: Config file the values were read from, if any
    """

    def __init__(self, config_file: Optional[str] = None, overrides: Sequence[str] = ()) -> None:
        self.config_file = config_file
        self.config: Dict[str, Any] = load_config(config_file, list(overrides))

    def setup_logging(self, level: Optional[str] = None) -> None:
        """
        Setup logging configuration.

        Args:
            level: Logging level (DEBUG, INFO, WARNING, ERROR); defaults to
                   the ``log-level`` config key.
        """
        logging.basicConfig(
            level=getattr(logging, (level or self.config["log-level"]).upper()),
            format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        )

    def get_cpu_count(self) -> int:
        """Number of physical CPU cores, or 1 if detection fails."""
        return max(psutil.cpu_count(logical=False) or 1, 1)

    @property
    def sched(self) -> NoiseSchedule:
        return NoiseSchedule.from_config(self.config)

    def rng(self) -> np.random.Generator:
        return make_rng(int(self.config["seed"]))

    @contextmanager
    def progress(self, description: str) -> Iterator[Any]:
        """Spinner whose text is updated through the yielded callable."""
        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            console=console
        ) as progress:
            task = progress.add_task(description, total=None)
            yield lambda text: progress.update(task, description=f"{description} {text}")

    # -- commands ----------------------------------------------------------

    def make_data(self, kind: str, n: int, op: Optional[str], sigma_y: float, out: str,
                  with_truth: bool, clean_out: Optional[str]) -> None:
        rng = self.rng()
        data = gen_toy_dataset(kind, n, rng)
        shape = DATASET_SHAPES.get(kind)
        if clean_out:
            save_dataset(clean_out, data, kind)
            console.print(f"✅ Wrote {n} clean {kind} samples to {clean_out}", style="green")
        if op is None:
            save_dataset(out, data, kind)
            console.print(f"✅ Wrote {n} clean {kind} samples to {out}", style="green")
            return
        measurements = measure_dataset(op, data, sigma_y, rng, shape)
        truth = {m.id: x for m, x in zip(measurements, data)} if with_truth else None
        save_measurements(out, measurements, truth, shape)
        kind_label = "evaluation" if with_truth else "training"
        console.print(f"✅ Wrote {n} {kind_label} measurements ({op}, sigma_y={sigma_y}) to {out}", style="green")

    def train_score(self, data_path: str, out: str, trace: Optional[str]) -> None:
        data = stack_dataset(ingest_dataset(data_path))
        cfg = ScoreTrainConfig.from_config(self.config)
        console.print(f"🧪 Training score network on {data.shape[0]} samples (d={data.shape[1]})", style="blue")
        with self.progress("Training score") as update:
            result = train_score(
                data, cfg, self.sched, self.rng(), checkpoint=out,
                callback=lambda step, loss: update(f"{step}/{cfg.iterations} dsm={loss:.4f}"),
                hidden_width=int(self.config["score.hidden_width"]),
                hidden_layers=int(self.config["score.hidden_layers"]),
                fourier_features=int(self.config["score.fourier_features"]),
            )
        if trace:
            write_loss_csv(trace, ("step", "dsm"), enumerate(result.losses, start=1))
        console.print(f"📊 Held-out DSM loss {result.holdout_initial:.4f} -> {result.holdout_final:.4f}",
                      style="blue")
        console.print(f"✅ Saved score checkpoint to {out}", style="green")

    def distill(self, score_path: str, measurements_path: str, out: str, trace: Optional[str]) -> None:
        score = load_score(score_path)
        measurements = load_measurements(measurements_path)
        if measurements.truth is not None:
            console.print("⚠️  Ignoring ground truth stored in the measurement container", style="yellow")
        cfg = DistillConfig.from_config(self.config)
        rng = self.rng()
        cond_dim = condition_vector(measurements.measurements[0], str(self.config["flow.condition_mode"])).size
        flow = flow_from_config(self.config, measurements.dim, cond_dim, rng)
        console.print(f"🧪 Distilling flow on {len(measurements)} measurements", style="blue")
        with self.progress("Distilling") as update:
            result = distill_train(
                flow, score, measurements, cfg, score.sched, rng, checkpoint=out,
                callback=lambda b: update(f"{b.step}/{cfg.iterations} loss={b.total:.4f}"),
            )
        trace = trace or f"{out}.loss.csv"
        write_loss_trace(trace, result.trace)
        last = result.trace[-1]
        console.print(f"📊 Final loss {last.total:.4f} (fidelity {last.fidelity:.4f}, prior {last.prior:.4f}, "
                      f"entropy {last.entropy:.4f})", style="blue")
        console.print(f"✅ Saved flow checkpoint to {out}, loss trace to {trace}", style="green")

    def sample(self, method: str, score_path: Optional[str], flow_path: Optional[str],
               measurements_path: Optional[str], out: str, n: int, image_dir: Optional[str]) -> None:
        rng = self.rng()
        sampler_cfg = SamplerConfig.from_config(self.config)
        tensors: Dict[str, np.ndarray] = {}
        shape: Optional[Tuple[int, ...]] = None

        if method == "uncond":
            score = load_score(require(score_path, "--score"))
            result = reverse_sde_sample(score, score.sched, sampler_cfg, rng, n=n)
            tensors["sample/uncond"] = result.samples
            nfe = result.nfe
        else:
            measurements = load_measurements(require(measurements_path, "--measurements"))
            shape = measurements.shape
            if method == "flow":
                flow = load_flow(require(flow_path, "--flow"))
                nfe = 1
                for m in measurements:
                    tensors[f"sample/{m.id}"] = sample_posterior(flow, condition_vector(m, flow.condition_mode), n, rng)
            else:
                score = load_score(require(score_path, "--score"))
                nfe = sampler_cfg.steps
                with self.progress("DPS") as update:
                    for i, m in enumerate(measurements, start=1):
                        update(f"{i}/{len(measurements)}")
                        tensors[f"sample/{m.id}"] = dps_sample(score, score.sched, m, sampler_cfg, rng, n=n).samples
        tensors["meta/nfe"] = np.array([float(nfe)])
        write_container(out, tensors)
        console.print(f"✅ Wrote {len(tensors) - 1} sample sets ({method}, NFE={nfe}) to {out}", style="green")

        if image_dir:
            if shape is None:
                raise click.UsageError("--image-dir needs measurements with an image shape")
            for name, samples in tensors.items():
                if name.startswith("sample/"):
                    emit_image(samples.mean(axis=0), shape, Path(image_dir) / f"{name[7:]}.pgm")
            console.print(f"🖼️  Wrote posterior-mean images to {image_dir}", style="blue")

    def evaluate(self, method: str, score_path: Optional[str], flow_path: Optional[str], measurements_path: str,
                 out: str, n_samples: Optional[int]) -> bool:
        measurements = load_measurements(measurements_path)
        cfg = EvalConfig.from_config(self.config)
        if cfg.image_shape is None and measurements.shape is not None:
            cfg.image_shape = measurements.shape
        n_samples = n_samples or cfg.n_samples
        if method == "flow":
            reconstructor = FlowReconstructor(load_flow(require(flow_path, "--flow")), n_samples)
        else:
            score = load_score(require(score_path, "--score"))
            reconstructor = DPSReconstructor(score, score.sched, SamplerConfig.from_config(self.config), n_samples)
        console.print(f"🖥️  Evaluating on {resolve_workers(cfg.workers)} workers", style="blue")
        report = evaluate(reconstructor, measurements, cfg, self.rng(), csv_path=out)
        self.display_report(report.reports, report.aggregate())
        console.print(f"✅ Wrote metrics to {out}", style="green")
        return len(report.succeeded) == len(report.reports)

    def display_report(self, reports: List[Any], aggregate: Any) -> None:
        table = Table(title="Reconstruction Metrics")
        table.add_column("Id", style="cyan")
        table.add_column("PSNR [dB]", style="green")
        table.add_column("SSIM", style="green")
        table.add_column("MSE", style="yellow")
        table.add_column("Time [s]", style="magenta")
        table.add_column("NFE", style="magenta")
        for r in list(reports) + [aggregate]:
            if r.error:
                table.add_row(r.id, "-", "-", "-", "-", str(r.nfe), style="red")
            else:
                table.add_row(r.id, f"{r.psnr:.2f}", f"{r.ssim:.4f}", f"{r.mse:.5f}", f"{r.wall_time:.4g}",
                              str(r.nfe))
        console.print(table)
        failed = sum(1 for r in reports if r.error)
        console.print(f"📊 Results: {len(reports) - failed} reconstructed, {failed} failed", style="blue")

    def oracle_check(self, iterations: int, lr: float, lr_final: float, n_train: int, n_draws: int) -> bool:
        cfg = dataclasses.replace(DistillConfig.from_config(self.config), batch=256, iterations=iterations,
                                  lr=lr, lr_schedule="cosine", lr_final=lr_final, log_every=0)
        console.print(f"🧪 Conjugate oracle check: {iterations} distillation steps", style="blue")
        with self.progress("Distilling") as update:
            report = conjugate_check(self.rng(), cfg, self.sched, n_train=n_train, n_draws=n_draws,
                                     progress=lambda step: update(f"{step}/{iterations}"))
        table = Table(title="Flow vs Conjugate Posterior")
        table.add_column("y", style="cyan")
        table.add_column("Split", style="yellow")
        table.add_column("Mean err", style="green")
        table.add_column("Cov rel. err", style="green")
        table.add_column("Status")
        for case in report.cases:
            ok = case.passed()
            table.add_row(np.array2string(case.y, precision=3), "seen" if case.seen else "held-out",
                          f"{case.mean_error:.4f}", f"{case.cov_error:.3f}", "✅" if ok else "❌")
        console.print(table)
        if report.passed:
            console.print("✅ Flow posterior matches the conjugate posterior", style="green")
        else:
            console.print("❌ Flow posterior is outside tolerance", style="red")
        return report.passed

    def show_info(self) -> None:
        info_table = Table(title="ampost Information")
        info_table.add_column("Property", style="cyan")
        info_table.add_column("Value", style="green")
        info_table.add_row("Version", __version__)
        info_table.add_row("Config File", self.config_file or "(defaults)")
        info_table.add_row("CPU Cores", str(self.get_cpu_count()))
        info_table.add_row("Workers", str(resolve_workers(int(self.config["workers"]))))
        for key, value in self.config.items():
            info_table.add_row(key, str(value))
        console.print(info_table)


def require(value: Optional[str], option: str) -> str:
    if not value:
        raise click.UsageError(f"{option} is required for this method")
    return value


def write_loss_csv(path: str, header: Sequence[str], rows: Any) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


@contextmanager
def reported_failures() -> Iterator[None]:
    """Turn library errors into a red status line and exit status 1."""
    try:
        yield
    except (AmpostError, FileNotFoundError) as e:
        console.print(f"❌ {type(e).__name__}: {e}", style="red")
        sys.exit(1)


# ---------------------------------------------------------------------------
# click surface
# ---------------------------------------------------------------------------

@click.group()
@click.option("--config", "config_file", type=click.Path(dir_okay=False), default=None,
              help="Flat YAML config file.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override one config key.")
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR.")
@click.option("--seed", type=int, default=None, help="Global seed (AMPOST_SEED still wins).")
@click.version_option(__version__, prog_name="ampost")
@click.pass_context
def ampost(ctx: click.Context, config_file: Optional[str], overrides: Tuple[str, ...], log_level: Optional[str],
           seed: Optional[int]) -> None:
    """Amortized posterior sampling with diffusion-distilled conditional flows."""
    overrides = tuple(overrides) + ((f"seed={seed}",) if seed is not None else ())
    with reported_failures():
        app = AmpostCLI(config_file, overrides)
    app.setup_logging(log_level)
    ctx.obj = app


@ampost.command("make-data")
@click.option("--kind", required=True, help="Toy dataset kind.")
@click.option("--n", "n", type=int, required=True, help="Number of samples.")
@click.option("--op", default=None, help="Operator spec, e.g. mask:p=0.3; omit for a clean dataset.")
@click.option("--sigma-y", type=float, default=0.1, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--with-truth", is_flag=True, help="Write an evaluation container with ground truth.")
@click.option("--clean-out", default=None, type=click.Path(dir_okay=False),
              help="Also write the clean signals as a dataset.")
@click.pass_obj
def make_data(app: AmpostCLI, kind: str, n: int, op: Optional[str], sigma_y: float, out: str, with_truth: bool,
              clean_out: Optional[str]) -> None:
    """Generate a toy dataset or a measurement set."""
    with reported_failures():
        app.make_data(kind, n, op, sigma_y, out, with_truth, clean_out)


@ampost.command("train-score")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--trace", default=None, type=click.Path(dir_okay=False), help="CSV of the DSM loss per step.")
@click.pass_obj
def train_score_command(app: AmpostCLI, data_path: str, out: str, trace: Optional[str]) -> None:
    """Train a score network with denoising score matching."""
    with reported_failures():
        app.train_score(data_path, out, trace)


@ampost.command("distill")
@click.option("--score", "score_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--measurements", "measurements_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--trace", default=None, type=click.Path(dir_okay=False),
              help="Loss trace CSV (default: <out>.loss.csv).")
@click.pass_obj
def distill_command(app: AmpostCLI, score_path: str, measurements_path: str, out: str, trace: Optional[str]) -> None:
    """Distill a conditional flow from a frozen score model."""
    with reported_failures():
        app.distill(score_path, measurements_path, out, trace)


@ampost.command("sample")
@click.option("--method", type=click.Choice(METHODS), default="flow", show_default=True)
@click.option("--steps", type=int, default=None, help="Sampler steps (sampler.steps).")
@click.option("--zeta", type=float, default=None, help="DPS guidance size (sampler.zeta).")
@click.option("--score", "score_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--flow", "flow_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--measurements", "measurements_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--n", "n", type=int, default=1, show_default=True, help="Samples per measurement.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--image-dir", default=None, type=click.Path(file_okay=False), help="Write posterior-mean images.")
@click.pass_obj
def sample_command(app: AmpostCLI, method: str, steps: Optional[int], zeta: Optional[float],
                   score_path: Optional[str], flow_path: Optional[str], measurements_path: Optional[str],
                   n: int, out: str, image_dir: Optional[str]) -> None:
    """Draw samples with the flow, DPS or the unconditional reverse SDE."""
    if steps is not None:
        app.config["sampler.steps"] = steps
    if zeta is not None:
        app.config["sampler.zeta"] = zeta
    with reported_failures():
        app.sample(method, score_path, flow_path, measurements_path, out, n, image_dir)


@ampost.command("evaluate")
@click.option("--method", type=click.Choice(("flow", "dps")), default="flow", show_default=True)
@click.option("--score", "score_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--flow", "flow_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--measurements", "measurements_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Evaluation container with ground truth.")
@click.option("--n-samples", type=int, default=None, help="Posterior draws averaged per reconstruction.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Metrics CSV.")
@click.pass_obj
def evaluate_command(app: AmpostCLI, method: str, score_path: Optional[str], flow_path: Optional[str],
                     measurements_path: str, n_samples: Optional[int], out: str) -> None:
    """Score reconstructions against held-out ground truth."""
    with reported_failures():
        ok = app.evaluate(method, score_path, flow_path, measurements_path, out, n_samples)
    sys.exit(0 if ok else 1)


@ampost.command("oracle-check")
@click.option("--iterations", type=int, default=20000, show_default=True)
@click.option("--lr", type=float, default=1e-3, show_default=True)
@click.option("--lr-final", type=float, default=1e-5, show_default=True, help="End of the cosine decay")
@click.option("--n-train", type=int, default=2048, show_default=True)
@click.option("--n-draws", type=int, default=20000, show_default=True)
@click.pass_obj
def oracle_check_command(app: AmpostCLI, iterations: int, lr: float, lr_final: float, n_train: int,
                         n_draws: int) -> None:
    """Distill against an analytic Gaussian prior and compare with the exact posterior."""
    with reported_failures():
        ok = app.oracle_check(iterations, lr, lr_final, n_train, n_draws)
    sys.exit(0 if ok else 1)


@ampost.command("info")
@click.pass_obj
def info_command(app: AmpostCLI) -> None:
    """Show the effective configuration and CPU information."""
    app.show_info()


def main() -> None:
    ampost(prog_name="ampost")
