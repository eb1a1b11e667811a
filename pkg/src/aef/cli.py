"""Command-line entry point: ``aef {train,eval,sample,reconstruct,denoise,ablate}``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .config import ConfigError, load_config
from .data import add_noise
from .evaluation import (
    EvalReport,
    ImportanceConfig,
    bits_per_dim,
    importance_log_marginal,
    importance_log_marginal_vae,
    reconstruction_mse,
    tune_epsilon,
)
from .models import AefModel
from .training import (
    NonFiniteLossError,
    ResumeError,
    load_model,
    load_splits,
    noise_spec,
    paired_ablation,
    read_manifest,
    read_metrics,
    train,
    validation_loss,
)
from .vae import VaeModel

log = logging.getLogger("aef")
OUTPUT_ROOT_ENV = "AEF_OUTPUT_ROOT"
DEFAULT_TEMPERATURE = 0.85


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument errors are validation errors, so they exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _output_dir(arg: str | None, name: str) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / name


def _resolve_checkpoint(path: str) -> Path:
    p = Path(path)
    for candidate in (p, p / "checkpoints" / "best"):
        if (candidate / "manifest.json").exists():
            return candidate
    raise UsageError(f"no checkpoint found at {path}")


def _tensor(x, model) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=next(model.parameters()).dtype)


def _batched(fn, x: np.ndarray, model, chunk: int) -> np.ndarray:
    out = []
    for start in range(0, len(x), chunk):
        with torch.no_grad():
            out.append(fn(_tensor(x[start : start + chunk], model)).cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0,))


# --- commands -----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.override)
    splits = load_splits(cfg)
    out = _output_dir(args.out, cfg.name)
    result = train(cfg, out, max_steps=args.max_steps, resume=args.resume, splits=splits)
    plotting.plot_training_curves(read_metrics(out / "metrics.csv"), out / "training_curves.png")
    summary = {
        "name": cfg.name,
        "config_hash": result.config_hash,
        "config": cfg.to_dict(),
        "overrides": list(args.override or []),
        "iterations": result.iteration,
        "best_iteration": result.best_iteration,
        "best_val_loss": result.best_val,
        "stop_reason": result.stop_reason,
        "best_checkpoint": str(result.best_checkpoint),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"trained {cfg.name}: best val {result.best_val:.4f} at iteration {result.best_iteration} -> {out}")
    return 0


def evaluate_checkpoint(ckpt: Path, samples: int | None = None, rounds: int | None = None,
                        max_points: int | None = None, seed: int = 0) -> EvalReport:
    """Tune epsilon on validation data, then estimate test log-likelihoods."""
    model, cfg, shape = load_model(ckpt)
    splits = load_splits(cfg)
    ev = cfg.evaluation
    K = samples or ev.is_samples
    R = rounds or ev.is_rounds
    limit = max_points or ev.max_points
    test = splits.test if limit is None else splits.test.subset(np.arange(min(limit, len(splits.test))))
    N = int(np.prod(shape))
    gen = torch.Generator().manual_seed(seed)
    chunk = max(1, 65536 // K)
    meta = {
        "model_id": f"{cfg.name}:{cfg.model.variant}",
        "config_hash": cfg.config_hash(),
        "checkpoint": str(ckpt),
        "iteration": read_manifest(ckpt)["iteration"],
        "K": K,
        "rounds": R,
        "epsilon": None,
        "dequantized": splits.quantized,
    }
    if isinstance(model, AefModel) and model.variant == "expanded":
        val = splits.val.samples[: ev.tune_points]
        eps = tune_epsilon(model, _tensor(val, model), ev.epsilon_grid, ev.tune_samples, 1, gen)
        cfg_is = ImportanceConfig(K, R, eps)
        ll = _batched(lambda x: importance_log_marginal(model, x, cfg_is, gen), test.samples, model, chunk)
        meta.update(epsilon=eps, estimator="importance sampling over features")
    elif isinstance(model, AefModel):
        ll = _batched(lambda x: -model.nll_partitioned(x), test.samples, model, 1000)
        meta.update(estimator="exact", note="exact, no IS", K=None, rounds=None)
    elif isinstance(model, VaeModel):
        ll = _batched(lambda x: importance_log_marginal_vae(model, x, K, R, gen), test.samples, model, chunk)
        meta.update(estimator="importance weighted (posterior proposal)")
    else:
        ll = np.full(len(test), np.nan)
        meta.update(estimator="none", note="deterministic autoencoder has no likelihood", K=None, rounds=None)
    recon = _batched(model.reconstruct, test.samples, model, 1000)
    mse = reconstruction_mse(torch.as_tensor(test.clean), torch.as_tensor(recon, dtype=torch.float64),
                             per_sample=True).numpy()
    bpd = bits_per_dim(-ll, N, splits.quantized)
    return EvalReport(ll, bpd, mse, meta)


def cmd_eval(args) -> int:
    ckpt = _resolve_checkpoint(args.checkpoint)
    report = evaluate_checkpoint(ckpt, args.samples, args.rounds, args.max_points, args.seed)
    out = Path(args.out) if args.out else ckpt.parent.parent
    csv_path, json_path = report.write(out)
    s = report.summary()
    print(f"mean BPD {s['mean_bpd']}, mean recon MSE {s['mean_recon_mse']:.6g} -> {json_path}")
    return 0


def cmd_sample(args) -> int:
    ckpt = _resolve_checkpoint(args.checkpoint)
    model, cfg, shape = load_model(ckpt)
    gen = torch.Generator().manual_seed(args.seed)
    with torch.no_grad():
        x = model.sample(args.count, args.temperature, gen).numpy()
    out = Path(args.out) if args.out else ckpt.parent.parent / "samples.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    if len(shape) >= 2:
        plotting.save_image_grid(x, shape, out)
    else:
        np.savetxt(out.with_suffix(".csv"), x, delimiter=",", fmt="%.8g")
        reference = load_splits(cfg).test.samples
        plotting.plot_samples(x, reference, out, f"{cfg.name} samples, T={args.temperature}")
    print(f"wrote {args.count} samples at T={args.temperature} -> {out}")
    return 0


def _per_sample_csv(path: Path, columns: dict) -> None:
    names = list(columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", *names])
        for i, row in enumerate(zip(*columns.values())):
            w.writerow([i, *(f"{v:.10g}" for v in row)])


def cmd_reconstruct(args) -> int:
    ckpt = _resolve_checkpoint(args.checkpoint)
    model, cfg, shape = load_model(ckpt)
    test = load_splits(cfg).test
    x = test.samples[: args.count]
    recon = _batched(model.reconstruct, x, model, 1000)
    out = Path(args.out) if args.out else ckpt.parent.parent / "reconstruct"
    out.mkdir(parents=True, exist_ok=True)
    mse = ((recon - x) ** 2).mean(-1)
    _per_sample_csv(out / "reconstruction.csv", {"mse": mse})
    if len(shape) >= 2:
        plotting.save_rows([x, recon], shape, out / "reconstruction.png")
    else:
        plotting.plot_denoising(x, recon, test.clean[: args.count], out / "reconstruction.png")
    print(f"mean reconstruction MSE {mse.mean():.6g} -> {out}")
    return 0


def denoise(model, noisy: np.ndarray, clean: np.ndarray) -> dict:
    recon = _batched(model.reconstruct, noisy, model, 1000)
    return {
        "recon": recon,
        "mse_recon": ((recon - clean) ** 2).mean(-1),
        "mse_noisy": ((noisy - clean) ** 2).mean(-1),
    }


def cmd_denoise(args) -> int:
    ckpt = _resolve_checkpoint(args.checkpoint)
    model, cfg, shape = load_model(ckpt)
    if args.noisy:
        noisy = np.load(args.noisy).reshape(-1, int(np.prod(shape)))
        if not args.clean:
            raise UsageError("--noisy needs --clean with the matching clean inputs")
        clean = np.load(args.clean).reshape(noisy.shape)
        std = None
    else:
        splits = load_splits(cfg)
        test = splits.test
        base, clean = test.samples[: args.count], test.clean[: args.count]
        std = cfg.data.noise_std if args.noise_std is None else args.noise_std
        noisy = add_noise(base, noise_spec(cfg, splits.quantized, std), np.random.default_rng(args.seed))
    res = denoise(model, noisy, clean)
    out = Path(args.out) if args.out else ckpt.parent.parent / "denoise"
    out.mkdir(parents=True, exist_ok=True)
    _per_sample_csv(out / "denoise.csv", {"mse_recon_clean": res["mse_recon"], "mse_noisy_clean": res["mse_noisy"]})
    summary = {
        "noise_std": std,
        "count": int(len(noisy)),
        "mean_mse_recon_clean": float(res["mse_recon"].mean()),
        "mean_mse_noisy_clean": float(res["mse_noisy"].mean()),
        "model_id": f"{cfg.name}:{cfg.model.variant}",
    }
    (out / "denoise.json").write_text(json.dumps(summary, indent=2))
    n_show = min(len(noisy), args.grid)
    if len(shape) >= 2:
        plotting.save_rows([noisy[:n_show], res["recon"][:n_show], clean[:n_show]], shape, out / "triptych.png")
    else:
        plotting.plot_denoising(noisy, res["recon"], clean, out / "triptych.png")
    print(f"denoising MSE {summary['mean_mse_recon_clean']:.6g} (noisy input {summary['mean_mse_noisy_clean']:.6g}) -> {out}")
    return 0


def cmd_ablate(args) -> int:
    base = load_config(args.config, args.override)
    splits = load_splits(base)
    out = _output_dir(args.out, base.name + "-ablation")
    rows = []
    for cfg in paired_ablation(base):
        if args.steps is not None:
            cfg = cfg.replace(**{
                "optimizer.max_iterations": args.steps,
                "optimizer.eval_every": min(cfg.optimizer.eval_every, args.steps),
            })
        result = train(cfg, out / cfg.name, splits=splits)
        model, _, _ = load_model(result.best_checkpoint)
        val = validation_loss(model, splits.val, cfg, result.iteration)
        rows.append({
            "name": cfg.name,
            "variant": cfg.model.variant,
            "core_flow": cfg.model.core_flow,
            "prior_flow": cfg.model.prior_flow,
            "iterations": result.iteration,
            "val_loss": val,
        })
        print(f"{cfg.name}: val {val:.4f}")
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    plotting.plot_ablation(rows, out / "ablation.png")
    return 0


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aef", description="Autoencoders within flows.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("config")
    t.add_argument("--out")
    t.add_argument("--override", "-o", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="importance-sampled test likelihood and BPD")
    e.add_argument("checkpoint")
    e.add_argument("--out")
    e.add_argument("--samples", type=int)
    e.add_argument("--rounds", type=int)
    e.add_argument("--max-points", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="write a grid of samples")
    s.add_argument("checkpoint")
    s.add_argument("--count", type=int, default=64)
    s.add_argument("--temperature", type=float, default=DEFAULT_TEMPERATURE)
    s.add_argument("--out")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sample)

    r = sub.add_parser("reconstruct", help="reconstruct test inputs")
    r.add_argument("checkpoint")
    r.add_argument("--count", type=int, default=16)
    r.add_argument("--out")
    r.set_defaults(func=cmd_reconstruct)

    d = sub.add_parser("denoise", help="reconstruct noisy inputs and report MSE to the clean ones")
    d.add_argument("checkpoint")
    d.add_argument("--noise-std", type=float)
    d.add_argument("--noisy")
    d.add_argument("--clean")
    d.add_argument("--count", type=int, default=1000)
    d.add_argument("--grid", type=int, default=10)
    d.add_argument("--out")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_denoise)

    a = sub.add_parser("ablate", help="train the 8 flow ablations (AEF and VAE)")
    a.add_argument("config")
    a.add_argument("--out")
    a.add_argument("--override", "-o", action="append", default=[], metavar="KEY=VALUE")
    a.add_argument("--steps", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ResumeError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteLossError, RuntimeError, ArithmeticError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
