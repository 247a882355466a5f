# QuanTA - Config Module
# Strict JSON loading for model descriptions and experiment configs

import json
import logging
from dataclasses import dataclass

from quanta.constants import (
    ALL_PAIRS, DEFAULT_BATCH_SIZE, DEFAULT_INIT_SCALE, DEFAULT_LEARNING_RATE, DEFAULT_OPTIMIZER,
    DEFAULT_STEPS, GAUSSIAN_INIT, LOG_EVERY, LORA_ALPHA
)
from quanta.errors import ConfigError, QuantaError
from quanta.tensor_core import AxisShape
from quanta.training import AdapterSpec, TrainConfig

logger = logging.getLogger(__name__)


def read_json_strict(path, allowed):
    """
    Load a JSON object and reject keys outside `allowed`

    Args:
        path (str | Path): JSON file
        allowed (set[str]): Accepted top-level keys

    Returns:
        dict: The parsed object
    """
    try:
        with open(path, "r") as file:
            data = json.load(file)
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e

    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    _check_keys(data, allowed, str(path))
    return data


def require_keys(data, required, where):
    """Raise ConfigError naming the first missing key"""
    missing = sorted(set(required) - set(data))
    if missing:
        raise ConfigError(f"{where}: missing key(s) {', '.join(missing)}")


def _check_keys(data, allowed, where):
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _section(data, name, allowed, where):
    section = data.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: '{name}' must be an object")
    _check_keys(section, allowed, f"{where}.{name}")
    return section


def _typed(section, key, kind, default, where):
    value = section.get(key, default)
    if value is None:
        return None
    # bool is an int subclass; keep integers and flags apart
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{where}.{key} must be an integer, got {value!r}")
    if kind is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ConfigError(f"{where}.{key} must be a number, got {value!r}")
    if kind is bool and not isinstance(value, bool):
        raise ConfigError(f"{where}.{key} must be true or false, got {value!r}")
    if kind is str and not isinstance(value, str):
        raise ConfigError(f"{where}.{key} must be a string, got {value!r}")
    return kind(value)


TOP_KEYS = {"name", "seed", "adapter", "task", "optimizer", "output"}
ADAPTER_KEYS = {"kind", "shape", "scheme", "rounds", "init_scale", "init", "rank", "alpha"}
TASK_KEYS = {"dim", "rank", "batch_size"}
OPTIMIZER_KEYS = {"kind", "lr", "steps", "dtype", "fixed_order", "log_every"}
OUTPUT_KEYS = {"csv", "json", "qtf"}


@dataclass(frozen=True)
class ExperimentConfig:
    """
    One recovery experiment: adapter, synthetic task, optimizer and output paths

    A single seed drives the task, the adapter initialization and the
    mini-batches, and is written into every output artifact.
    """

    name: str
    seed: int
    adapter: AdapterSpec
    task_dim: int
    task_rank: int
    batch_size: int
    train: TrainConfig
    csv_path: str = None
    json_path: str = None
    qtf_path: str = None


def load_experiment_config(path):
    """
    Parse an experiment config file

    Layout:
        {"name": ..., "seed": 0,
         "adapter": {"kind": "quanta", "shape": "4-4-4", "scheme": "all-pairs", "rounds": 6, ...},
         "task": {"dim": 64, "rank": null, "batch_size": 256},
         "optimizer": {"kind": "adam", "lr": 0.01, "steps": 3000, "dtype": "float64", "fixed_order": true},
         "output": {"csv": "losses.csv", "json": "summary.json", "qtf": "adapter.qtf"}}

    Returns:
        ExperimentConfig: The validated config
    """
    where = str(path)
    data = read_json_strict(path, TOP_KEYS)
    require_keys(data, {"adapter", "task"}, where)

    adapter = _section(data, "adapter", ADAPTER_KEYS, where)
    task = _section(data, "task", TASK_KEYS, where)
    optimizer = _section(data, "optimizer", OPTIMIZER_KEYS, where)
    output = _section(data, "output", OUTPUT_KEYS, where)
    require_keys(task, {"dim"}, f"{where}.task")

    seed = _typed(data, "seed", int, 0, where)
    shape = adapter.get("shape")
    if shape is not None and not isinstance(shape, (str, list)):
        raise ConfigError(f"{where}.adapter.shape must be a string or a list of integers")

    try:
        spec = AdapterSpec(
            kind=_typed(adapter, "kind", str, "quanta", f"{where}.adapter"),
            shape=AxisShape.parse(shape) if shape is not None else None,
            scheme=adapter.get("scheme", ALL_PAIRS),
            rounds=_typed(adapter, "rounds", int, 1, f"{where}.adapter"),
            init_scale=_typed(adapter, "init_scale", float, DEFAULT_INIT_SCALE, f"{where}.adapter"),
            init=_typed(adapter, "init", str, GAUSSIAN_INIT, f"{where}.adapter"),
            rank=_typed(adapter, "rank", int, 4, f"{where}.adapter"),
            alpha=_typed(adapter, "alpha", float, LORA_ALPHA, f"{where}.adapter"),
        )
        train = TrainConfig(
            optimizer=_typed(optimizer, "kind", str, DEFAULT_OPTIMIZER, f"{where}.optimizer"),
            learning_rate=_typed(optimizer, "lr", float, DEFAULT_LEARNING_RATE, f"{where}.optimizer"),
            steps=_typed(optimizer, "steps", int, DEFAULT_STEPS, f"{where}.optimizer"),
            seed=seed,
            dtype=_typed(optimizer, "dtype", str, "float64", f"{where}.optimizer"),
            fixed_order=_typed(optimizer, "fixed_order", bool, True, f"{where}.optimizer"),
            log_every=_typed(optimizer, "log_every", int, LOG_EVERY, f"{where}.optimizer"),
        )
    except ConfigError:
        raise
    except QuantaError as e:
        raise ConfigError(f"{where}: {e}") from e

    config = ExperimentConfig(
        name=_typed(data, "name", str, "experiment", where),
        seed=seed,
        adapter=spec,
        task_dim=_typed(task, "dim", int, None, f"{where}.task"),
        task_rank=_typed(task, "rank", int, None, f"{where}.task"),
        batch_size=_typed(task, "batch_size", int, DEFAULT_BATCH_SIZE, f"{where}.task"),
        train=train,
        csv_path=_typed(output, "csv", str, None, f"{where}.output"),
        json_path=_typed(output, "json", str, None, f"{where}.output"),
        qtf_path=_typed(output, "qtf", str, None, f"{where}.output"),
    )
    logger.info("loaded experiment %s from %s", config.name, where)
    return config
