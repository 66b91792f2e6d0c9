"""Run configuration: JSON file + env overrides, strictly validated.

Unknown sections or keys are rejected outright (silent hyperparameter typos
are how weight mixups survive), and every command echoes its fully-resolved
config next to its outputs so any run can be reproduced exactly.
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path

ENV_PREFIX = "COMPOSELAB_"

# section -> key -> default; None means optional with no default
SCHEMA: dict[str, dict] = {
    "model": {
        "image_size": 32, "patch_size": 2, "hidden_dim": 64, "num_blocks": 4,
        "num_heads": 4, "text_dim": 32, "max_tokens": 8, "timesteps": 200,
        "channels": 3,
    },
    "schedule": {"beta_start": 1e-4, "beta_end": 0.02},
    "sample": {
        "num_steps": 50, "guidance_scale": 6.0, "sampler": "ddim",
        "prompts": None, "seeds": None, "count": 1,
    },
    "dataset": {"n": 4000, "canvas": 32, "seed": 0, "concepts": None},
    "bias": {"fraction_single": 0.7, "dominance": None, "pair_weights": None},
    "split": {"held_out_fraction": 0.0, "seed": 0},
    "train": {
        "steps": 1500, "batch_size": 8, "lr": 2e-3, "warmup": 50,
        "min_lr_frac": 0.05, "p_uncond": 0.1, "seed": 0, "log_every": 50,
    },
    "weights": {"lambda_norm": 0.0, "lambda_sep": 1.0, "lambda_en": 2.0},
    "finetune": {
        "steps": 200, "batch_size": 4, "lr_schedule": "fixed", "lr": 5e-6,
        "peak_lr": 1e-6, "warmup": 300, "selector": "to_k",
        "t_range": [0.1, 0.9], "latent_source": "trajectory", "x0_pool": 4,
        "norm_batch": 4, "kernel_size": 3, "sigma": 0.5, "seed": 0,
        "pairs": None, "norm_n": 0, "norm_seed": 0,
    },
    "tta": {"refine_steps": 25, "step_size": 0.2, "kernel_size": 3,
            "sigma": 0.5},
    "eval": {
        "protocols": ["single", "seen-seen"], "n_prompts": 100,
        "threshold": 0.7, "seed": 0, "chunk": 16, "reference_n": 40,
        "pairs": None, "use_tta": False,
    },
    "paths": {"dataset": None, "checkpoint": None, "base_checkpoint": None,
              "images": None},
    "seed": 0,
    "threads": 0,
}


class ConfigError(ValueError):
    pass


def _reject_unknown(given: dict, allowed: dict, path: str) -> None:
    for key in given:
        if key not in allowed:
            raise ConfigError(f"unknown config key {path}{key!r}")


def resolve(raw: dict | None, env: dict | None = None) -> dict:
    """Merge defaults <- file <- environment, rejecting unknown keys."""
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _reject_unknown(raw, SCHEMA, "")
    resolved = copy.deepcopy(SCHEMA)
    for section, content in raw.items():
        if isinstance(SCHEMA[section], dict):
            if not isinstance(content, dict):
                raise ConfigError(f"section {section!r} must be an object")
            _reject_unknown(content, SCHEMA[section], f"{section}.")
            resolved[section].update(content)
        else:
            resolved[section] = content
    for key, value in (env if env is not None else os.environ).items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        if len(path) == 1 and path[0] in SCHEMA and not isinstance(SCHEMA[path[0]], dict):
            resolved[path[0]] = parsed
        elif len(path) == 2 and path[0] in SCHEMA and isinstance(SCHEMA[path[0]], dict):
            if path[1] not in SCHEMA[path[0]]:
                raise ConfigError(f"unknown config key {path[0]}.{path[1]} (from {key})")
            resolved[path[0]][path[1]] = parsed
        else:
            raise ConfigError(f"environment override {key} does not name a config key")
    return resolved


def load(path: str | Path | None, env: dict | None = None) -> dict:
    if path is None:
        return resolve({}, env)
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return resolve(raw, env)


def echo(resolved: dict, out_dir: str | Path, command: str) -> Path:
    """Write the fully-resolved config next to the outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": resolved}
    path = out / "resolved_config.json"
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path
