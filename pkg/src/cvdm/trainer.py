"""Joint training of the schedule and the noise predictor.

One optimizer updates both models on the full loss. Every stochastic choice
(parameter init, batch order, per-step time and noise draws) derives from the
run seed and the step index alone, so a run can be stopped at any checkpoint
and continued bit-identically.
"""

from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .denoiser import DenoiserModel
from .errors import NonFiniteError
from .losses import AlphaPolicy, LossBreakdown, assemble, compute_terms, draw_t_eps
from .schedule import ScheduleModel

LOSS_CSV_COLUMNS = ["step", "l_beta", "kl_prior", "l_inf_hat", "l_gamma", "total", "wall_time"]


def derive_seed(*parts) -> int:
    """Collapse a tuple of seeds/labels into one 63-bit integer, stably."""
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    alpha: Optional[float] = None  # None selects the auto-balanced policy
    alpha_scale: float = 1e-3
    alpha_freeze_step: int = 100
    grad_clip_norm: float = 1.0
    checkpoint_every: int = 0  # 0 writes only the final checkpoint
    curvature_method: str = "autodiff"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def alpha_policy(self) -> AlphaPolicy:
        return AlphaPolicy(fixed=self.alpha, scale=self.alpha_scale,
                           freeze_step=self.alpha_freeze_step)


def batch_indices(n_total: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Sample indices for a given step as a pure function of (seed, step).

    Epochs are seeded reshuffles; the last short batch of an epoch wraps into
    the next epoch's permutation so every batch has full size.
    """
    per_epoch = max(n_total // batch_size, 1)
    epoch, slot = divmod(step, per_epoch)
    perm = np.random.default_rng(derive_seed(seed, "epoch", epoch)).permutation(n_total)
    start = slot * batch_size
    idx = perm[start:start + batch_size]
    if len(idx) < batch_size:
        extra = np.random.default_rng(
            derive_seed(seed, "epoch", epoch + 1)
        ).permutation(n_total)
        idx = np.concatenate([idx, extra[: batch_size - len(idx)]])
    return idx


def build_models(meta: dict, seed: int) -> tuple[ScheduleModel, DenoiserModel]:
    """Construct the model pair from constructor metadata, deterministically."""
    torch.manual_seed(derive_seed(seed, "init"))
    schedule = ScheduleModel(
        in_channels=meta["cond_channels"],
        out_channels=meta["target_channels"],
        mode=meta.get("schedule_mode", "pixelwise"),
        scales=meta.get("schedule_scales", 3),
        base_filters=meta.get("schedule_base_filters", 16),
        time_hidden=meta.get("time_hidden", 1024),
        use_norm=meta.get("schedule_use_norm", True),
    )
    denoiser = DenoiserModel(
        cond_channels=meta["cond_channels"],
        target_channels=meta["target_channels"],
        scales=meta.get("denoiser_scales", 3),
        base_filters=meta.get("denoiser_base_filters", 16),
        use_norm=meta.get("denoiser_use_norm", True),
    )
    return schedule, denoiser


def train_step(
    schedule: ScheduleModel,
    denoiser: DenoiserModel,
    optimizer: torch.optim.Optimizer,
    x: torch.Tensor,
    y: torch.Tensor,
    *,
    step: int,
    seed: int,
    alpha_policy: AlphaPolicy,
    grad_clip_norm: float = 1.0,
    curvature_method: str = "autodiff",
) -> LossBreakdown:
    """One joint gradient update; returns the pre-update loss record."""
    gen = torch.Generator().manual_seed(derive_seed(seed, "loss", step))
    t, eps = draw_t_eps(y, gen)
    terms = compute_terms(schedule, denoiser, y, x, t, eps,
                          curvature_method=curvature_method)
    for name in ("l_beta", "kl_prior", "l_inf_hat", "l_gamma"):
        value = getattr(terms, name)
        if not torch.isfinite(value):
            raise NonFiniteError(
                f"non-finite loss term at step {step}: {name}={float(value)} "
                f"(l_beta={float(terms.l_beta)}, kl_prior={float(terms.kl_prior)}, "
                f"l_inf_hat={float(terms.l_inf_hat)}, l_gamma={float(terms.l_gamma)})"
            )
    alpha = alpha_policy.observe(step, float(terms.l_inf_hat), float(terms.l_gamma))
    total, breakdown = assemble(terms, alpha)
    optimizer.zero_grad()
    total.backward()
    params = [p for g in optimizer.param_groups for p in g["params"]]
    if grad_clip_norm > 0:
        torch.nn.utils.clip_grad_norm_(params, grad_clip_norm)
    optimizer.step()
    return breakdown


@dataclass
class TrainResult:
    breakdowns: list = field(default_factory=list)
    checkpoint_path: Optional[Path] = None


def save_checkpoint(
    path,
    schedule: ScheduleModel,
    denoiser: DenoiserModel,
    optimizer: torch.optim.Optimizer,
    *,
    step: int,
    seed: int,
    model_meta: dict,
    alpha_policy: AlphaPolicy,
    config_digest: str = "",
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": "cvdm-checkpoint-v1",
        "schedule_state": schedule.state_dict(),
        "denoiser_state": denoiser.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "step": step,
        "rng": {"seed": seed, "scheme": "per-step-derivation"},
        "model_meta": dict(model_meta),
        "alpha_policy": alpha_policy.state(),
        "config_digest": config_digest,
        "tensor_meta": {
            k: {"shape": list(v.shape), "dtype": str(v.dtype)}
            for k, v in {**schedule.state_dict(), **denoiser.state_dict()}.items()
        },
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> dict:
    return torch.load(Path(path), map_location="cpu", weights_only=False)


def models_from_checkpoint(payload: dict) -> tuple[ScheduleModel, DenoiserModel]:
    schedule, denoiser = build_models(payload["model_meta"], payload["rng"]["seed"])
    schedule.load_state_dict(payload["schedule_state"])
    denoiser.load_state_dict(payload["denoiser_state"])
    return schedule, denoiser


def _write_loss_csv(path: Path, rows: list[dict], append: bool) -> None:
    mode = "a" if append and path.exists() else "w"
    with path.open(mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_CSV_COLUMNS)
        if mode == "w":
            writer.writeheader()
        writer.writerows(rows)


def train_loop(
    config: TrainConfig,
    x_data: torch.Tensor,
    y_data: torch.Tensor,
    schedule: ScheduleModel,
    denoiser: DenoiserModel,
    *,
    out_dir=None,
    model_meta: Optional[dict] = None,
    config_digest: str = "",
    optimizer: Optional[torch.optim.Optimizer] = None,
    alpha_policy: Optional[AlphaPolicy] = None,
    start_step: int = 0,
) -> TrainResult:
    """Run ``config.iterations`` total steps (resuming from ``start_step``).

    Writes one loss-CSV row per step and checkpoints under ``out_dir`` when
    given. Resuming from a checkpoint with the same config continues the
    exact same trajectory.
    """
    if model_meta is None:
        model_meta = {"cond_channels": x_data.shape[1], "target_channels": y_data.shape[1]}
    if optimizer is None:
        params = list(schedule.parameters()) + list(denoiser.parameters())
        optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    if alpha_policy is None:
        alpha_policy = config.alpha_policy()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    result = TrainResult()
    rows = []
    n_total = x_data.shape[0]
    t0 = time.perf_counter()
    for step in range(start_step, config.iterations):
        idx = batch_indices(n_total, config.batch_size, config.seed, step)
        breakdown = train_step(
            schedule, denoiser, optimizer, x_data[idx], y_data[idx],
            step=step, seed=config.seed, alpha_policy=alpha_policy,
            grad_clip_norm=config.grad_clip_norm,
            curvature_method=config.curvature_method,
        )
        result.breakdowns.append(breakdown)
        rows.append({
            "step": step,
            "l_beta": breakdown.l_beta,
            "kl_prior": breakdown.kl_prior,
            "l_inf_hat": breakdown.l_inf_hat,
            "l_gamma": breakdown.l_gamma,
            "total": breakdown.total,
            "wall_time": time.perf_counter() - t0,
        })
        want_ckpt = (
            out_dir is not None
            and config.checkpoint_every > 0
            and (step + 1) % config.checkpoint_every == 0
        )
        if want_ckpt:
            save_checkpoint(
                out_dir / f"checkpoint_{step + 1:06d}.pt",
                schedule, denoiser, optimizer,
                step=step + 1, seed=config.seed, model_meta=model_meta,
                alpha_policy=alpha_policy, config_digest=config_digest,
            )
    if out_dir is not None:
        _write_loss_csv(out_dir / "loss_log.csv", rows, append=start_step > 0)
        result.checkpoint_path = save_checkpoint(
            out_dir / "checkpoint_final.pt",
            schedule, denoiser, optimizer,
            step=config.iterations, seed=config.seed, model_meta=model_meta,
            alpha_policy=alpha_policy, config_digest=config_digest,
        )
    return result


def resume_training(
    config: TrainConfig,
    x_data: torch.Tensor,
    y_data: torch.Tensor,
    checkpoint_path,
    *,
    out_dir=None,
) -> TrainResult:
    """Continue a run from a saved checkpoint up to ``config.iterations``."""
    payload = load_checkpoint(checkpoint_path)
    schedule, denoiser = models_from_checkpoint(payload)
    params = list(schedule.parameters()) + list(denoiser.parameters())
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    optimizer.load_state_dict(payload["optimizer_state"])
    alpha_policy = AlphaPolicy.from_state(payload["alpha_policy"])
    return train_loop(
        config, x_data, y_data, schedule, denoiser,
        out_dir=out_dir, model_meta=payload["model_meta"],
        config_digest=payload.get("config_digest", ""),
        optimizer=optimizer, alpha_policy=alpha_policy,
        start_step=payload["step"],
    )
