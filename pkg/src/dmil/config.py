"""Run configuration: one JSON document with sections {data, model, dmil,
eval, gradcheck, run}.  Unknown keys are hard errors (no silent defaults for
typos); values are deep-merged over the defaults below."""

from __future__ import annotations

import copy
import json
from pathlib import Path


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG: dict = {
    "data": {
        "n_train_tasks": 20,
        "n_test_tasks": 5,
        "n_support": 40,
        "n_query": 10,
        "horizon": 120,
        "train_task_seed0": 1000,
        "test_task_seed0": 9000,
        "data_seed": 77,
        "train_path": None,  # optional JSONL files written by gen-data
        "test_path": None,
    },
    "model": {
        "hidden": [64, 64],
        "n_skills": 3,
        "features": "relative",  # policy input map: raw state or [s, g-p, |g-p|]
    },
    "dmil": {
        "method": "dmil",  # dmil | dmil_high | dmil_low | maml | em_only
        "inner_rate": 5e-4,
        "outer_rate": 1e-4,
        "inner_steps": 3,
        "aux_weight": 0.1,
        "grad_mode": "exact",
        "outer_reduce": "mean",
        "batch_size": 16,
        "tasks_per_step": 5,
        "ho_labels": "adapted",
        "outer_optimizer": "sgd",  # or "adam" (outer_rate is its learning rate)
        # Hard-EM warm start (shared verbatim by every method under one seed):
        # label-routed alternations, then selector-only consolidation.
        "warmup_epochs": 0,
        "warmup_consolidate": 0,
        "warmup_rate": 5e-2,
        "warmup_trajs_per_task": 2,
        "warmup_restarts": 1,
        "warmup_probe_epochs": 300,
    },
    "eval": {
        "shots": [1, 3],
        "episodes": 5,
        "adapt_rate": 5e-4,
        "adapt_steps": 3,
        "selector_steps": None,  # selector inner steps at test (None: adapt_steps)
        "scale_steps_with_shots": False,  # k-shot adaptation runs k * adapt_steps
        "n_true_skills": 3,
    },
    "gradcheck": {
        "instances": 20,
        "state_dim": 4,
        "action_dim": 2,
        "hidden": 8,
        "n_skills": 2,
        "inner_steps": [1, 3],
        "inner_rate": 5e-4,
        "fd_step": 1e-5,
        "tolerance": 1e-4,
        "trajectories": 1,
        "horizon": 16,
        "seed0": 42,
    },
    "run": {
        "seed": 0,
        "iterations": 300,
        "checkpoint_every": 100,
    },
}

METHODS = ("dmil", "dmil_high", "dmil_low", "maml", "em_only")


def _merge(defaults: dict, override: dict, path: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            valid = ", ".join(sorted(defaults))
            raise ConfigError(f"unknown config key {here!r}; valid keys here: {valid}")
        if isinstance(defaults[key], dict) and value is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here!r} must be a section (object)")
            out[key] = _merge(defaults[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(overrides: dict | None = None, seed: int | None = None) -> dict:
    """Defaults deep-merged with overrides; optional run.seed replacement."""
    cfg = _merge(DEFAULT_CONFIG, overrides or {}, "")
    if seed is not None:
        cfg["run"]["seed"] = int(seed)
    if cfg["dmil"]["method"] not in METHODS:
        raise ConfigError(
            f"unknown method {cfg['dmil']['method']!r}; valid methods: {', '.join(METHODS)}"
        )
    return cfg


def load_config(path, seed: int | None = None) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} does not parse: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return resolve_config(raw, seed=seed)


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
