#!/usr/bin/env python3
"""
rbfsnt settings - configuration constants, environment lookups and logging.

Precedence for run options is: command-line flags > config file > defaults.
The config file is TOML; top-level keys apply to every command and a table
named after the command (e.g. [train]) overrides them.
"""

import logging
import os
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from errors import ConfigError

# ============================================================================
# CONFIGURATION & CONSTANTS
# ============================================================================

APP_NAME = "rbfsnt"
VERSION = "1.0.0"

# Environment variables
SEED_ENV = "RBFSNT_SEED"
LOG_LEVEL_ENV = "RBFSNT_LOG_LEVEL"
LOG_FILE_ENV = "RBFSNT_LOG_FILE"
CHECKPOINT_ENV = "RBFSNT_CHECKPOINT"
CORPUS_IMAGES_ENV = "RBFSNT_CORPUS_IMAGES"
CORPUS_LABELS_ENV = "RBFSNT_CORPUS_LABELS"

DEFAULT_SEED = 0
DEFAULT_PORT = 8080
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"

# Numerics
PRECISIONS = ("float32", "float64")
METRIC_EPSILON = 1e-6
GRADCHECK_STEP = 1e-5

# Training defaults
DEFAULT_LAMBDA = 0.5
DEFAULT_WARMUP_SAMPLES = 10_000
DEFAULT_BATCH_SIZE = 64
DEFAULT_TRACE_SAMPLES = 20

# Attack defaults
DEEPFOOL_MAX_ITER = 50
DEEPFOOL_OVERSHOOT = 0.02
# linearized boundary distance treated as zero
DEEPFOOL_BOUNDARY_TOL = 1e-12
# epsilon grid searched for the smallest flipping FGSM step
FGSM_EPSILON_STEP = 0.005

# Detection defaults
ENTROPY_PATCH = 3
GRAY_LEVELS = 256
DEFAULT_TAU_PERCENTILE = 99.0
REPORTED_FPRS = (0.01, 0.05, 0.10)

_logging_configured = False


def configure_logging(level: Optional[str] = None, stream=None) -> None:
    """Set up root logging once: stderr always, plus RBFSNT_LOG_FILE if set."""
    global _logging_configured
    if _logging_configured:
        return

    level_name = (level or os.environ.get(LOG_LEVEL_ENV, "INFO")).upper()
    handlers = [logging.StreamHandler(stream or sys.stderr)]
    log_file = os.environ.get(LOG_FILE_ENV)
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
    )
    _logging_configured = True


def env_seed() -> Optional[int]:
    """Seed from RBFSNT_SEED, or None when unset."""
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}")


def resolve_seed(flag_value: Optional[int], file_value: Optional[int] = None) -> int:
    """--seed > config file > RBFSNT_SEED > DEFAULT_SEED."""
    for value in (flag_value, file_value, env_seed()):
        if value is not None:
            return int(value)
    return DEFAULT_SEED


def load_config_file(path: Optional[str], command: str, known: Optional[Iterable[str]] = None) -> Dict[str, Any]:
    """
    Read a TOML config and flatten it for one command.

    With `known`, top-level keys the command does not use are skipped, while
    unknown keys inside the command's own table are an error.
    """
    if not path:
        return {}
    config_path = Path(path)
    try:
        with config_path.open("rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid config file {path}: {e}")

    # TOML keys use dashes or underscores; argparse dests use underscores
    top = {k.replace("-", "_"): v for k, v in raw.items() if not isinstance(v, dict)}
    section = raw.get(command, {})
    if not isinstance(section, dict):
        raise ConfigError(f"[{command}] in {path} must be a table")
    section = {k.replace("-", "_"): v for k, v in section.items()}

    if known is not None:
        known = set(known)
        top = {k: v for k, v in top.items() if k in known}
        unknown = set(section) - known
        if unknown:
            raise ConfigError(f"unknown keys in [{command}] of {path}: {', '.join(sorted(unknown))}")
    top.update(section)
    return top


def merge_options(flags: Dict[str, Any], file_values: Dict[str, Any], defaults: Dict[str, Any]) -> Dict[str, Any]:
    """Combine option sources; a flag wins only when it was given (not None)."""
    unknown = set(file_values) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    merged = dict(defaults)
    merged.update(file_values)
    merged.update({k: v for k, v in flags.items() if v is not None and k in defaults})
    return merged
