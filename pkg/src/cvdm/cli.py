"""Operator commands: dataset generation, training, sampling, evaluation,
schedule reporting, and the discretization-gap study.

Every command takes --config/--seed/--out and keeps all products under one
run directory next to a canonical copy of the configuration. The environment
variable CVDM_NUM_THREADS caps internal parallelism.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from . import qpi
from .convergence import (SurrogatePredictor, convergence_report,
                          write_convergence_outputs)
from .metrics import evaluate_pairs
from .sampler import SamplerConfig, sample_batch
from .schedule import AnalyticSchedule, schedule_report_table
from .trainer import (TrainConfig, load_checkpoint, models_from_checkpoint,
                      build_models, train_loop)


def _apply_thread_cap() -> None:
    cap = os.environ.get("CVDM_NUM_THREADS")
    if cap:
        torch.set_num_threads(max(1, int(cap)))


def _load_cfg(args) -> dict:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return cfgmod.load_config(args.config, overrides)


def _optics_from_cfg(cfg: dict) -> qpi.OpticalConfig:
    d = cfg["data"]
    return qpi.OpticalConfig(
        wavelength=d["wavelength"], defocus=d["defocus"],
        pixel_pitch=d["pixel_pitch"], shape=(d["height"], d["width"]),
    )


def cmd_generate_data(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out or cfg["paths"]["dataset"])
    d = cfg["data"]
    if d["task"] == "qpi":
        manifest = qpi.generate_qpi_dataset(
            out, n_train=d["n_train"], n_val=d["n_val"],
            optics=_optics_from_cfg(cfg), seed=cfg["seed"],
            phase_range=d["phase_range"], xi_max=d["xi_max"],
            condition=d["condition"], source_dir=d["source_dir"],
            smooth_sigma=d["smooth_sigma"],
        )
    elif d["task"] == "toy_blur":
        manifest = qpi.generate_toy_blur_dataset(
            out, n_train=d["n_train"], n_val=d["n_val"],
            shape=(d["height"], d["width"]), seed=cfg["seed"],
            kernel_sigma=d["kernel_sigma"], noise_sigma=d["noise_sigma"],
            smooth_sigma=d["smooth_sigma"],
        )
    else:
        raise ValueError(f"unknown data task {d['task']!r}")
    print(f"wrote dataset manifest {manifest}")
    return 0


def _load_split(cfg: dict, split: str):
    xs, ys, manifest = qpi.load_dataset(cfg["paths"]["dataset"], split)
    return (torch.as_tensor(xs, dtype=torch.float64),
            torch.as_tensor(ys, dtype=torch.float64), manifest)


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if args.steps is not None:
        cfg["trainer"]["iterations"] = args.steps
    run_dir = Path(args.out or cfg["paths"]["run"])
    cfgmod.write_config_copy(cfg, run_dir)
    x, y, _ = _load_split(cfg, "train")
    meta = cfgmod.model_meta_from_config(cfg, x.shape[1], y.shape[1])
    schedule, denoiser = build_models(meta, cfg["seed"])
    tr = cfg["trainer"]
    train_cfg = TrainConfig(
        iterations=tr["iterations"], batch_size=tr["batch_size"],
        learning_rate=tr["learning_rate"], seed=cfg["seed"], alpha=tr["alpha"],
        alpha_scale=tr["alpha_scale"], alpha_freeze_step=tr["alpha_freeze_step"],
        grad_clip_norm=tr["grad_clip_norm"], checkpoint_every=tr["checkpoint_every"],
        curvature_method=tr["curvature_method"],
    )
    result = train_loop(
        train_cfg, x, y, schedule, denoiser, out_dir=run_dir,
        model_meta=meta, config_digest=cfgmod.config_digest(cfg),
    )
    last = result.breakdowns[-1]
    print(f"trained {train_cfg.iterations} steps; final total loss {last.total:.6g}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _check_digest(payload: dict, cfg: dict) -> None:
    digest = cfgmod.config_digest(cfg)
    stored = payload.get("config_digest", "")
    if stored and stored != digest:
        raise ValueError(
            "checkpoint/config digest mismatch: the checkpoint was trained under a "
            f"different configuration ({stored[:12]}... vs {digest[:12]}...)"
        )


def _parse_beta_mode(spec: str, sampler_cfg: dict) -> dict:
    if spec in ("learned", "learned_over_T"):
        sampler_cfg["beta_mode"] = "learned_over_T"
    elif spec in ("ratio", "ratio_exact"):
        sampler_cfg["beta_mode"] = "ratio_exact"
    elif spec.startswith("linear:"):
        _, start, end = spec.split(":")
        sampler_cfg.update(beta_mode="fixed_linear",
                           linear_start=float(start), linear_end=float(end))
    else:
        raise ValueError(f"unknown beta mode {spec!r}")
    return sampler_cfg


def cmd_sample(args) -> int:
    cfg = _load_cfg(args)
    payload = load_checkpoint(args.checkpoint)
    _check_digest(payload, cfg)
    schedule, denoiser = models_from_checkpoint(payload)
    x, y, _ = _load_split(cfg, "val")
    sampler_cfg = dict(cfg["sampler"])
    if args.T is not None:
        sampler_cfg["T"] = args.T
    if args.beta_mode is not None:
        sampler_cfg = _parse_beta_mode(args.beta_mode, sampler_cfg)
    sconf = SamplerConfig(
        T=sampler_cfg["T"], beta_mode=sampler_cfg["beta_mode"],
        linear_start=sampler_cfg["linear_start"], linear_end=sampler_cfg["linear_end"],
        seed=cfg["seed"], n_samples=sampler_cfg["n_samples"],
        target_channels=y.shape[1],
    )
    stack = sample_batch(x, denoiser, schedule, sconf)
    out_dir = Path(args.out or cfg["paths"]["run"]) / "samples"
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "samples.npy", stack.samples.numpy())
    np.save(out_dir / "mean.npy", stack.mean.numpy())
    np.save(out_dir / "variance.npy", stack.variance.numpy())

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for name, arr in (("mean", stack.mean), ("variance", stack.variance)):
        plt.imsave(out_dir / f"preview_{name}.png", arr[0, 0].numpy(), cmap="viridis")
    print(f"wrote {sconf.n_samples} samples for {x.shape[0]} conditions to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    outputs_dir = Path(args.outputs or (Path(args.out or cfg["paths"]["run"]) / "samples"))
    mean_path = outputs_dir / "mean.npy"
    if not mean_path.exists():
        raise FileNotFoundError(f"no sampler outputs at {mean_path}")
    predictions = np.load(mean_path)
    _, y, _ = _load_split(cfg, "val")
    truth = y.numpy()
    if predictions.shape != truth.shape:
        raise ValueError(
            f"prediction stack {predictions.shape} does not match targets {truth.shape}"
        )
    report = evaluate_pairs(
        [t[0] for t in truth], [p[0] for p in predictions],
        data_range=cfg["metrics"]["data_range"],
    )
    paths = report.write(outputs_dir)
    print(json.dumps(report.aggregates(), indent=2, sort_keys=True))
    print(f"wrote {paths['json']} and {paths['csv']}")
    return 0


def cmd_schedule_report(args) -> int:
    cfg = _load_cfg(args)
    payload = load_checkpoint(args.checkpoint)
    schedule, _ = models_from_checkpoint(payload)
    x, _, _ = _load_split(cfg, "val")
    mask = np.load(args.mask) if args.mask else None
    rows = schedule_report_table(schedule, x[:1], mask=mask)
    out_dir = Path(args.out or cfg["paths"]["run"])
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "schedule_report.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t = [r["t"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, key in zip(axes, ("gamma", "beta")):
        for suffix in ("mean", "masked", "unmasked"):
            col = f"{key}_{suffix}"
            if col in rows[0]:
                ax.plot(t, [r[col] for r in rows], label=suffix)
        ax.set_xlabel("t")
        ax.set_ylabel(key)
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "schedule_report.png", dpi=120)
    plt.close(fig)
    print(f"wrote {csv_path} ({len(rows)} rows)")
    return 0


def cmd_convergence(args) -> int:
    cfg = _load_cfg(args)
    cc = cfg["convergence"]
    surrogate = SurrogatePredictor(
        y=torch.ones(1, dtype=torch.float64), delta=cc["delta"], profile=cc["profile"]
    )
    schedules = [
        ("smooth", AnalyticSchedule.exponential(rate=cc["smooth_rate"])),
        ("steep", AnalyticSchedule.sigmoidal(sharpness=cc["steep_sharpness"],
                                             midpoint=cc["steep_midpoint"])),
    ]
    reports = convergence_report(
        schedules, surrogate, cc["T_grid"], mc_draws=cc["mc_draws"], seed=cfg["seed"]
    )
    out_dir = Path(args.out or cfg["paths"]["run"]) / "convergence"
    paths = write_convergence_outputs(reports, out_dir)
    for r in reports:
        print(f"{r.label}: slope {r.slope:.3f}, snr_curvature {r.snr_curvature:.4g}")
    print(f"wrote {paths['csv']} and {paths['plot']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvdm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", type=Path, default=None, help="output directory")

    p = sub.add_parser("generate-data", help="synthesize a paired dataset")
    common(p)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train schedule and denoiser jointly")
    common(p)
    p.add_argument("--steps", type=int, default=None, help="override iteration count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw reconstructions from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--T", type=int, default=None, help="override step count")
    p.add_argument("--beta-mode", type=str, default=None,
                   help="learned | ratio | linear:START:END")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score sampler outputs against the val split")
    common(p)
    p.add_argument("--outputs", type=Path, default=None,
                   help="directory holding mean.npy (default: OUT/samples)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("schedule-report", help="tabulate mean gamma/beta over time")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--mask", type=Path, default=None, help="boolean .npy region mask")
    p.set_defaults(func=cmd_schedule_report)

    p = sub.add_parser("convergence", help="discrete-vs-continuous loss gap study")
    common(p)
    p.set_defaults(func=cmd_convergence)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
