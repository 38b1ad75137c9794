"""YAML run configuration: nested sections for suite, agent and trainer.

Schema (all fields optional unless marked; see README for the full table):

    seed: 1                       # root seed for the run
    suite:
      name: tri-task              # or deca-task, or a custom `skills:` list
      goal_mode: random           # random | fixed
      onehot_size: 4
      seed: 0                     # goal placement seed for fixed mode
    agent:
      k: 2
      hidden: [128, 128]
      scope: ac-shared            # ac-shared | actor-only | output-only
      normalize_w: true
      w_init: random              # random | one-hot
    trainer:
      total_steps: 300000
      batch_size: 384
      variant: paco               # paco | maskout | vanilla
      ... any TrainConfig field ...
      spike:                      # optional fault injection
        task: 2
        trigger_step: 8000
        scale: 6000.0
        release_distance: 0.5
        mode: sticky

Validation failures raise ConfigError with the offending field path.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

import yaml

from .envs import suite_from_config
from .errors import ConfigError
from .networks import SCOPES
from .training import SpikeConfig, TrainConfig, VARIANTS

AGENT_KEYS = ("k", "hidden", "scope", "normalize_w", "w_init")


def load_yaml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a mapping at top level")
    return data


def _expect_mapping(data: dict, key: str) -> dict:
    section = data.get(key, {})
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ConfigError(f"section '{key}' must be a mapping")
    return section


def build_run_config(data: dict, overrides: dict = None):
    """(TrainConfig, suite specs, onehot_size) from a parsed config mapping.

    `overrides` pre-empt file values; keys use the flat TrainConfig names
    plus 'suite.<field>'. Unknown fields anywhere are errors.
    """
    overrides = dict(overrides or {})
    suite_cfg = dict(_expect_mapping(data, "suite"))
    agent_cfg = dict(_expect_mapping(data, "agent"))
    trainer_cfg = dict(_expect_mapping(data, "trainer"))

    known_top = {"suite", "agent", "trainer", "seed"}
    for key in data:
        if key not in known_top:
            raise ConfigError(f"unknown top-level config field '{key}'")

    for key, value in overrides.items():
        if value is None:
            continue
        if key.startswith("suite."):
            suite_cfg[key.split(".", 1)[1]] = value
        elif key in AGENT_KEYS:
            agent_cfg[key] = value
        else:
            trainer_cfg[key] = value

    if "seed" in data and "seed" not in trainer_cfg:
        trainer_cfg["seed"] = data["seed"]

    if "name" not in suite_cfg and "skills" not in suite_cfg:
        suite_cfg["name"] = "tri-task"
    specs, onehot_size = suite_from_config(suite_cfg)

    unknown = set(agent_cfg) - set(AGENT_KEYS)
    if unknown:
        raise ConfigError(f"unknown agent config field(s): {sorted(unknown)}")
    merged = dict(trainer_cfg)
    for key in AGENT_KEYS:
        if key in agent_cfg:
            merged[key] = agent_cfg[key]

    spike_cfg = merged.pop("spike", None)
    allowed = {f.name for f in fields(TrainConfig)}
    unknown = set(merged) - allowed
    if unknown:
        raise ConfigError(f"unknown trainer config field(s): {sorted(unknown)}")

    config = TrainConfig(**_coerce_fields(merged))
    if spike_cfg is not None:
        if not isinstance(spike_cfg, dict):
            raise ConfigError("trainer.spike must be a mapping")
        spike_allowed = {f.name for f in fields(SpikeConfig)}
        unknown = set(spike_cfg) - spike_allowed
        if unknown:
            raise ConfigError(f"unknown spike config field(s): {sorted(unknown)}")
        config.spike = SpikeConfig(**spike_cfg)
    if config.scope not in SCOPES:
        raise ConfigError(f"agent.scope must be one of {SCOPES}, got {config.scope!r}")
    if config.variant not in VARIANTS:
        raise ConfigError(f"trainer.variant must be one of {VARIANTS}, got {config.variant!r}")
    config.validate()
    return config, specs, onehot_size


_INT_FIELDS = {"total_steps", "k", "batch_size", "parallel_envs", "exploration_steps",
               "buffer_capacity", "eval_interval", "eval_episodes", "updates_per_round",
               "seed", "log_interval", "checkpoint_interval"}
_FLOAT_FIELDS = {"epsilon", "lr", "gamma", "polyak", "stop_at_success"}
_BOOL_FIELDS = {"normalize_w"}


def _coerce_fields(cfg: dict) -> dict:
    out = {}
    for key, value in cfg.items():
        try:
            if key in _INT_FIELDS:
                out[key] = int(value)
            elif key in _FLOAT_FIELDS:
                out[key] = float(value)
            elif key in _BOOL_FIELDS:
                out[key] = bool(value)
            elif key == "hidden":
                out[key] = tuple(int(h) for h in value)
            else:
                out[key] = value
        except (TypeError, ValueError):
            raise ConfigError(f"config field '{key}' has invalid value {value!r}") from None
    return out
