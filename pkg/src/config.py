"""
ampost - Configuration

A config file is a flat mapping of dotted keys to scalars. Either YAML

    sde.beta_min: 0.1
    distill.lr: 1.0e-5

or plain ``key=value`` lines are accepted. Values are merged as
DEFAULTS <- file <- ``--set key=value`` overrides <- ``AMPOST_SEED``.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Union

import yaml

from .errors import ConfigError

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "AMPOST_SEED"

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "log-level": "INFO",
    # 0 = one worker per physical core
    "workers": 0,

    "sde.beta_min": 0.1,
    "sde.beta_max": 20.0,
    "sde.T": 1.0,
    "sde.eps_min": 1e-3,

    "score.hidden_width": 256,
    "score.hidden_layers": 4,
    "score.fourier_features": 8,
    "score.lr": 2e-4,
    "score.batch": 64,
    "score.iterations": 20000,
    "score.holdout": 512,
    "score.log_every": 500,
    "score.snapshot_every": 0,

    "flow.steps": 24,
    "flow.hidden_width": 64,
    "flow.hidden_layers": 2,
    "flow.condition_mode": "masked_signal_plus_mask",
    "flow.output_bijection": "none",

    "distill.sigma_y": 0.1,
    "distill.n_t_samples": 1,
    "distill.lr": 1e-5,
    "distill.batch": 64,
    "distill.iterations": 10000,
    "distill.lr_schedule": "constant",
    "distill.lr_final": 0.0,
    "distill.include_terminal_term": True,
    "distill.score_jacobian": True,
    "distill.clip_norm": 100.0,
    "distill.log_every": 100,
    "distill.checkpoint_every": 0,

    "adam.beta1": 0.9,
    "adam.beta2": 0.999,
    "adam.eps": 1e-8,

    "sampler.steps": 1000,
    "sampler.zeta": 1.0,
    "sampler.integrator": "euler_maruyama",
    "sampler.ode_tol": 1e-5,
    "sampler.probability_flow": False,

    "eval.n_samples": 128,
    "eval.peak": 1.0,
    "eval.ssim_window": 7,
    "eval.image_shape": "",
    "eval.timing_warmup": 10,
    "eval.timing_repeats": 100,
}


def _coerce(key: str, value: Any) -> Any:
    """Convert ``value`` to the type of the default for ``key``."""
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered in ("true", "yes", "on", "1"):
                    return True
                if lowered in ("false", "no", "off", "0"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        return "" if value is None else str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value {value!r} for '{key}' (expected {type(default).__name__})") from None


def parse_assignment(text: str) -> tuple:
    """Split ``key=value`` and parse the value as a YAML scalar."""
    if "=" not in text:
        raise ConfigError(f"expected key=value, got '{text}'")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw.strip()) if raw.strip() else ""


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Load a flat config file.

    Raises:
        FileNotFoundError: If the file does not exist.
        ConfigError: If the content is not a flat mapping.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    text = path.read_text()
    try:
        loaded = yaml.safe_load(text)
    except yaml.YAMLError:
        loaded = None
    if isinstance(loaded, dict):
        for key, value in loaded.items():
            if isinstance(value, (dict, list)):
                raise ConfigError(f"config must be flat; '{key}' holds a {type(value).__name__}")
        return {str(key): value for key, value in loaded.items()}
    entries: Dict[str, Any] = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            key, value = parse_assignment(line)
            entries[key] = value
    return entries


def load_config(path: Optional[Union[str, Path]] = None,
                overrides: Optional[Union[Mapping[str, Any], Iterable[str]]] = None,
                environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """
    Build the effective configuration.

    Args:
        path: Optional config file
        overrides: ``{key: value}`` or an iterable of ``key=value`` strings
        environ: Environment to read ``AMPOST_SEED`` from (defaults to os.environ)

    Returns:
        A complete dict with every key of DEFAULTS.

    Raises:
        ConfigError: On unknown keys or values of the wrong type.
    """
    config = dict(DEFAULTS)
    layers = []
    if path is not None:
        layers.append(read_config_file(path))
    if overrides:
        if isinstance(overrides, Mapping):
            layers.append(dict(overrides))
        else:
            layers.append(dict(parse_assignment(item) for item in overrides))
    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key '{key}'")
            config[key] = _coerce(key, value)
    environ = os.environ if environ is None else environ
    if environ.get(SEED_ENV_VAR):
        config["seed"] = _coerce("seed", environ[SEED_ENV_VAR])
        logger.info("seed overridden by %s=%s", SEED_ENV_VAR, config["seed"])
    return config


def dump_config(config: Mapping[str, Any], path: Union[str, Path]) -> None:
    """Write a flat YAML config (key order preserved)."""
    with open(path, "w") as f:
        yaml.safe_dump(dict(config), f, default_flow_style=False, sort_keys=False)
