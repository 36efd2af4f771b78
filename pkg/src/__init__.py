"""
ampost

Amortized posterior sampling for inverse problems: a conditional RealNVP
flow is distilled from a frozen VP-SDE score model so that posterior samples
cost one network pass instead of a full reverse diffusion.

This package provides:
- tensorcore: Dense reverse-mode autodiff, MLPs and Adam
- diffusion / score: VP-SDE schedule, score networks and analytic oracles
- flow / distill: Conditional coupling flow and the distillation objective
- operators: Forward operators, measurements and toy datasets
- samplers: Reverse SDE, DPS and probability-flow ODE baselines
- harness: Metrics, the conjugate oracle and evaluation drivers
- AmpostCLI: Command-line interface with rich terminal output

Example usage:
    from src import make_rng, init_flow, distill_train

    flow = init_flow(dim, cond_dim, make_rng(0))
    flow = distill_train(flow, score, measurements, cfg, sched, make_rng(1)).flow
"""

__version__ = "1.0.0"

from .diffusion import NoiseSchedule
from .distill import DistillConfig, distill_train
from .flow import ConditionalFlow, init_flow, sample_posterior
from .harness import conjugate_check, conjugate_posterior, evaluate
from .operators import gen_toy_dataset, measure
from .samplers import SamplerConfig, dps_sample, reverse_sde_sample
from .score import init_score_network, train_score
from .tensorcore import Tensor, backward, make_rng
from .cli import AmpostCLI, main

__all__ = [
    'NoiseSchedule',
    'DistillConfig',
    'distill_train',
    'ConditionalFlow',
    'init_flow',
    'sample_posterior',
    'conjugate_check',
    'conjugate_posterior',
    'evaluate',
    'gen_toy_dataset',
    'measure',
    'SamplerConfig',
    'dps_sample',
    'reverse_sde_sample',
    'init_score_network',
    'train_score',
    'Tensor',
    'backward',
    'make_rng',
    'AmpostCLI',
    'main',
]
