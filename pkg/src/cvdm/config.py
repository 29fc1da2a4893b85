"""Run configuration: one JSON tree covering every stage, validated against
the defaults (unknown keys are rejected) and hashed canonically so artifacts
can refuse to mix configurations.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from pathlib import Path

DEFAULTS: dict = {
    "seed": 0,
    "paths": {
        "dataset": "data",
        "run": "run",
    },
    "data": {
        "task": "qpi",  # or "toy_blur"
        "n_train": 64,
        "n_val": 16,
        "height": 32,
        "width": 32,
        "wavelength": 5e-7,
        "defocus": 2e-6,
        "pixel_pitch": 5e-7,
        "phase_range": math.pi,
        "xi_max": 0.2,
        "condition": "two_shot",  # or "derivative"
        "source_dir": None,
        "smooth_sigma": 3.0,
        "kernel_sigma": 1.5,  # toy_blur only
        "noise_sigma": 0.02,  # toy_blur only
    },
    "schedule": {
        "mode": "pixelwise",
        "scales": 3,
        "base_filters": 16,
        "time_hidden": 1024,
        "use_norm": True,
    },
    "denoiser": {
        "scales": 3,
        "base_filters": 16,
        "use_norm": True,
    },
    "trainer": {
        "iterations": 1000,
        "batch_size": 8,
        "learning_rate": 1e-4,
        "alpha": None,
        "alpha_scale": 1e-3,
        "alpha_freeze_step": 100,
        "grad_clip_norm": 1.0,
        "checkpoint_every": 0,
        "curvature_method": "autodiff",
    },
    "sampler": {
        "T": 100,
        "beta_mode": "learned_over_T",
        "linear_start": 1e-4,
        "linear_end": 0.03,
        "n_samples": 4,
    },
    "metrics": {
        "data_range": 1.0,
    },
    "convergence": {
        "T_grid": [16, 32, 64, 128, 256],
        "delta": 0.1,
        "profile": "linear",
        "mc_draws": 8,
        "smooth_rate": 10.0,
        "steep_sharpness": 40.0,
        "steep_midpoint": 0.5,
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise KeyError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and not isinstance(value, dict):
            raise TypeError(f"config key {where} must be a table")
        if isinstance(base[key], dict):
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults merged with a JSON file and then programmatic overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        cfg = _merge(cfg, json.loads(Path(path).read_text()))
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_digest(cfg: dict) -> str:
    """Content hash, stable under key reordering in the source document."""
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def write_config_copy(cfg: dict, run_dir) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.json"
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True))
    return path


def model_meta_from_config(cfg: dict, cond_channels: int, target_channels: int = 1) -> dict:
    """Constructor metadata for the model pair, as stored in checkpoints."""
    return {
        "cond_channels": cond_channels,
        "target_channels": target_channels,
        "schedule_mode": cfg["schedule"]["mode"],
        "schedule_scales": cfg["schedule"]["scales"],
        "schedule_base_filters": cfg["schedule"]["base_filters"],
        "time_hidden": cfg["schedule"]["time_hidden"],
        "schedule_use_norm": cfg["schedule"]["use_norm"],
        "denoiser_scales": cfg["denoiser"]["scales"],
        "denoiser_base_filters": cfg["denoiser"]["base_filters"],
        "denoiser_use_norm": cfg["denoiser"]["use_norm"],
    }
