"""Experiment configuration: YAML files with ``include:`` and embedded defaults."""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .errors import ConfigError, DataIOError

DEFAULTS = {
    "seed": 0,
    "out": "runs",
    "workers": 1,
    "grid": [16, 16],
    "prior": {
        "n": 4096,
        "n_preview": 24,
        "background": 1.0,
        "block": 5.0,
        "p_two": 0.5,
        "p_left": 0.25,
        "p_right": 0.25,
        "size_min": 3,
        "size_max": 6,
    },
    "sde": {"kind": "ve_geometric", "sigma_hat": 25.0, "beta_slope": 32.0, "T": 1.0},
    "score": {
        "data": None,
        "checkpoint": None,
        "resume": None,
        "channels": 32,
        "n_freq": 16,
        "epochs": 40,
        "batch_size": 64,
        "lr": 2.0e-4,
        "t_eps": 1.0e-3,
        "dtype": "float32",
    },
    "forward": {"kind": "dirichlet", "traction": 1.0, "nu": 0.3, "solver": "cg", "model": "surrogate"},
    "surrogate": {
        "checkpoint": None,
        "n_sl": 200,
        "n_ul": 2000,
        "n_val": 100,
        "n_pt": 40,
        "n_st": 20,
        "batch_size": 32,
        "lr": 1.0e-3,
        "w_ul": 1.0,
        "channels": 32,
        "dilations": [1, 2, 4, 8, 1],
    },
    "sampler": {
        "n_samples": 64,
        "n_steps": 2000,
        "K": 1,
        "r": None,
        "rho_mode": "time-decreasing",
        "eta_mode": "auto",
        "divergence_factor": 10.0,
        "step_norm": "ensemble",
        "r_sweep": [],
        "reference": None,
        "use_model_error": True,
    },
    "inverse": {"noise_levels": [0.01, 0.02, 0.05], "truth_index": 0, "truth_seed": 1234},
    "enki": {"J": 1024, "iterations": 100, "alpha": 0.0},
}

R_DEFAULT = {"ve_geometric": 0.1, "ve_general": 0.1, "vp_linear": 0.36}


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _read_yaml(path: Path, seen: tuple) -> dict:
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"include cycle through {path}")
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataIOError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping")
    includes = data.pop("include", []) or []
    if isinstance(includes, str):
        includes = [includes]
    merged = {}
    for inc in includes:
        merged = deep_merge(merged, _read_yaml(path.parent / inc, seen + (path,)))
    return deep_merge(merged, data)


def _check_keys(tree, ref, prefix=""):
    for k, v in tree.items():
        if k not in ref:
            raise ConfigError(f"unknown config key {prefix}{k}")
        if isinstance(v, dict) and isinstance(ref[k], dict):
            _check_keys(v, ref[k], f"{prefix}{k}.")


def load_config(path=None, overrides=None) -> dict:
    user = _read_yaml(Path(path), ()) if path else {}
    _check_keys(user, DEFAULTS)
    cfg = deep_merge(DEFAULTS, user)
    cfg = deep_merge(cfg, {k: v for k, v in (overrides or {}).items() if v is not None})
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an explicit integer")
    return cfg


def dump_defaults() -> str:
    return yaml.safe_dump(DEFAULTS, sort_keys=False)
