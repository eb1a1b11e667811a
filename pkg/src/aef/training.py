"""Training loop, checkpoints, resume and the flow ablation matrix."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .config import ConfigError, RunConfig, from_dict
from .flows import ActNorm, AutoregressiveFlow, Composite, LogitPreprocess
from .models import (
    AefModel,
    ConvDecoder,
    ConvEncoder,
    DeterministicAE,
    ErrorDistribution,
    FeatureExpansion,
    FlowPrior,
    MLPDecoder,
    MLPEncoder,
    NonFiniteError,
    SelectOutputs,
    ShellInput,
    StandardNormalPrior,
    make_partition,
)
from .vae import VaeModel

log = logging.getLogger(__name__)

METRIC_FIELDS = ["iteration", "train_loss", "val_loss", "val_seed", "sigma", "wall_time"]
ABLATION_TAGS = {
    "no-flows": (False, False),
    "only-posterior": (True, False),
    "only-prior": (False, True),
    "both-flows": (True, True),
}


class NonFiniteLossError(RuntimeError):
    pass


class ResumeError(ValueError):
    pass


# --- model construction ---------------------------------------------------------


def _dtype(cfg: RunConfig):
    return torch.float64 if cfg.dtype == "float64" else torch.float32


def build_model(cfg: RunConfig, shape: tuple[int, ...]) -> torch.nn.Module:
    """Instantiate the model described by ``cfg.model`` for data of ``shape``."""
    m = cfg.model
    N = int(np.prod(shape))
    D = m.latent_dim
    torch.manual_seed(cfg.seed)
    if m.architecture == "conv" and len(shape) != 3:
        raise ConfigError(f"model.architecture: conv needs (C, H, W) data, got shape {shape}")

    preprocess = None
    if m.preprocess == "logit":
        preprocess = Composite([LogitPreprocess(m.logit_lambda, N), ActNorm(N)])

    def encoder(in_features):
        if m.architecture == "conv":
            return ConvEncoder(shape, D)
        return MLPEncoder(in_features, m.hidden, D)

    def decoder(out_features):
        if m.architecture == "conv":
            return ConvDecoder(D, shape)
        return MLPDecoder(D, list(reversed(m.hidden)), out_features)

    def flow():
        return AutoregressiveFlow(D, m.flow_layers, m.flow_hidden)

    if m.variant == "deterministic-ae":
        model = DeterministicAE(encoder(N), decoder(N), preprocess)
        return model.to(_dtype(cfg))

    if D >= N and m.variant.startswith("aef-partitioned"):
        raise ConfigError(f"model.latent_dim: must be below the data dimension {N} for partitioned AEFs")
    prior = FlowPrior(flow(), D) if m.prior_flow else StandardNormalPrior(D)
    inner = flow() if m.core_flow else None
    error = ErrorDistribution(m.sigma_init, trainable=m.train_sigma)

    if m.variant == "vae":
        model = VaeModel(encoder(N), decoder(N), inner, prior, error, preprocess)
    elif m.variant == "aef-linear":
        expansion = FeatureExpansion(N, D, m.expansion_init_std)
        model = AefModel(encoder(N), decoder(N), inner, prior, error, expansion=expansion, preprocess=preprocess)
    else:
        scheme = make_partition(m.variant.rsplit("-", 1)[1], shape, D, seed=cfg.seed)
        if m.architecture == "conv":
            enc = ShellInput(ConvEncoder(shape, D), scheme)
            dec = SelectOutputs(ConvDecoder(D, shape), scheme.shell)
        else:
            enc, dec = encoder(N - D), decoder(N - D)
        model = AefModel(enc, dec, inner, prior, error, partition=scheme, preprocess=preprocess)
    model = model.to(_dtype(cfg))
    model.error.set_sigma(m.sigma_init)  # the float32 init would round it
    return model


def sigma_of(model) -> float:
    error = getattr(model, "error", None)
    return float(error.sigma.detach()) if error is not None else float("nan")


# --- data ---------------------------------------------------------------------


@dataclass
class Splits:
    train: data_mod.Dataset
    val: data_mod.Dataset
    test: data_mod.Dataset
    quantized: bool = False

    @property
    def shape(self):
        return self.train.shape


def _require(path: str | None, field_name: str) -> Path:
    if not path or not Path(path).exists():
        raise ConfigError(f"{field_name}: dataset file not found: {path}")
    return Path(path)


def load_splits(cfg: RunConfig) -> Splits:
    """Load train/validation/test sets; float data is materialized for val/test."""
    d = cfg.data
    quantized = False
    if d.kind == "toy":
        full = data_mod.toy_manifold(d.manifold, d.n_ambient, d.count + d.test_count, d.noise, cfg.seed)
        test = full.subset(np.arange(d.count, d.count + d.test_count))
        pool = full.subset(np.arange(d.count))
    elif d.kind == "file":
        pool = data_mod.load_dataset(_require(d.train_path, "data.train_path"))
        if d.test_path:
            test = data_mod.load_dataset(_require(d.test_path, "data.test_path"))
        else:
            pool, test = data_mod.split(pool, d.validation_fraction, cfg.seed + 17)
    else:
        pool = data_mod.load_idx_images(_require(d.train_path, "data.train_path"))
        test_path = _require(d.test_path, "data.test_path") if d.test_path else None
        test = data_mod.load_idx_images(test_path) if test_path else None
        quantized = d.dequantize
        if test is None:
            pool, test = data_mod.split(pool, d.validation_fraction, cfg.seed + 17)
    train, val = data_mod.split(pool, d.validation_fraction, cfg.seed)
    if d.limit is not None and len(train) > d.limit:
        train = train.subset(np.arange(d.limit))
    rng = np.random.default_rng(cfg.seed + 1)
    val = materialize(val, cfg, quantized, rng)
    test = materialize(test, cfg, quantized, rng)
    return Splits(train, val, test, quantized)


LOGIT_MARGIN = 1e-6


def noise_spec(cfg: RunConfig, quantized: bool, std: float | None = None) -> data_mod.NoiseSpec:
    """Pixel data is clipped to [0, 1]; logit models need the open interval, so the clip shrinks by a margin."""
    std = cfg.data.noise_std if std is None else std
    if not (quantized or cfg.data.kind == "idx"):
        return data_mod.NoiseSpec(std, None)
    if cfg.model.preprocess == "logit":
        return data_mod.NoiseSpec(std, (LOGIT_MARGIN, 1.0 - LOGIT_MARGIN))
    return data_mod.NoiseSpec(std, (0.0, 1.0))


def prepare_batch(raw: np.ndarray, cfg: RunConfig, quantized: bool, rng, shape=None) -> tuple[np.ndarray, np.ndarray]:
    """Dequantize, flip and add denoising noise; returns ``(noisy, clean)``."""
    x = data_mod.dequantize(raw, rng) if quantized else np.asarray(raw, dtype=np.float64)
    if cfg.data.flip and shape is not None and len(shape) >= 2:
        x = data_mod.random_flip(x, shape, rng)
    noisy = data_mod.add_noise(x, noise_spec(cfg, quantized), rng) if cfg.data.noise_std > 0 else x
    return noisy, x


def materialize(ds: data_mod.Dataset, cfg: RunConfig, quantized: bool, rng) -> data_mod.Dataset:
    noisy, clean = prepare_batch(ds.samples, cfg, quantized, rng)
    if ds.clean is not None and not quantized:
        clean = ds.clean
    return data_mod.Dataset(noisy, ds.name, ds.shape, clean, ds.meta)


# --- checkpoints ----------------------------------------------------------------


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save_checkpoint(directory: Path, cfg: RunConfig, shape, model, optimizer, state: dict) -> Path:
    """Write ``state.pt`` then ``manifest.json`` (both atomically) into ``directory``."""
    import io

    directory.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(
        {
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            **state,
        },
        buf,
    )
    _atomic_write_bytes(directory / "state.pt", buf.getvalue())
    manifest = {
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "shape": list(shape),
        "variant": cfg.model.variant,
        "iteration": state["iteration"],
        "best_val": state["best_val"],
        "best_iteration": state["best_iteration"],
        "files": ["state.pt"],
    }
    _atomic_write_bytes(directory / "manifest.json", json.dumps(manifest, indent=2).encode())
    return directory


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def load_model(directory: str | Path):
    """Rebuild a model from a checkpoint directory; returns ``(model, config, shape)``."""
    manifest = read_manifest(directory)
    cfg = from_dict(manifest["config"])
    shape = tuple(manifest["shape"])
    model = build_model(cfg, shape)
    state = torch.load(Path(directory) / "state.pt", weights_only=False)
    model.load_state_dict(state["model"])
    model.eval()
    return model, cfg, shape


# --- training -------------------------------------------------------------------


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    metrics: list[dict]
    iteration: int
    best_val: float
    best_iteration: int
    stop_reason: str
    config_hash: str
    extra: dict = field(default_factory=dict)


def validation_seed(cfg: RunConfig, iteration: int) -> int:
    return (cfg.seed * 1_000_003 + iteration) % (2**31)


@torch.no_grad()
def validation_loss(model, ds: data_mod.Dataset, cfg: RunConfig, iteration: int, chunk: int = 1000) -> float:
    """Mean loss on a float dataset; the VAE draws fresh noise from a seeded stream."""
    was_training = model.training
    model.eval()
    gen = torch.Generator().manual_seed(validation_seed(cfg, iteration))
    total = 0.0
    for start in range(0, len(ds), chunk):
        x = torch.as_tensor(ds.samples[start : start + chunk], dtype=_dtype(cfg))
        total += model.loss(x, generator=gen).item() * len(x)
    model.train(was_training)
    return total / len(ds)


class _MetricsLog:
    def __init__(self, path: Path):
        self.path = path
        self.rows: list[dict] = []
        if not path.exists():
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_FIELDS)

    def append(self, row: dict) -> None:
        self.rows.append(row)
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row[k]) for k in METRIC_FIELDS])


def _fmt(v):
    return f"{v:.10g}" if isinstance(v, float) else v


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def train(
    cfg: RunConfig,
    out_dir: str | Path,
    max_steps: int | None = None,
    resume: bool = False,
    splits: Splits | None = None,
) -> TrainResult:
    """Train with Adam, global-norm gradient clipping and early stopping.

    Checkpoints go to ``out_dir/checkpoints/{best,last}``. ``max_steps`` caps
    the iterations taken by this call (the run can be resumed later);
    ``resume=True`` continues from ``last``.
    """
    cfg.validate()
    splits = splits if splits is not None else load_splits(cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_root = out_dir / "checkpoints"
    best_dir, last_dir = ckpt_root / "best", ckpt_root / "last"
    dtype = _dtype(cfg)
    opt_cfg = cfg.optimizer

    model = build_model(cfg, splits.shape)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=opt_cfg.lr, betas=(0.9, 0.999))
    np_rng = np.random.default_rng(cfg.seed + 2)
    torch_gen = torch.Generator().manual_seed(cfg.seed + 3)
    state = {
        "iteration": 0,
        "best_val": math.inf,
        "best_iteration": 0,
        "loss_sum": 0.0,
        "loss_count": 0,
        "elapsed": 0.0,
    }
    if resume:
        manifest = read_manifest(last_dir)
        if manifest["config_hash"] != cfg.config_hash():
            raise ResumeError(
                f"checkpoint config hash {manifest['config_hash']} does not match {cfg.config_hash()}"
            )
        saved = torch.load(last_dir / "state.pt", weights_only=False)
        model.load_state_dict(saved["model"])
        optimizer.load_state_dict(saved["optimizer"])
        np_rng.bit_generator.state = saved["numpy_rng"]
        torch_gen.set_state(saved["torch_rng"])
        state.update({k: saved[k] for k in state})
    else:
        (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
        if (out_dir / "metrics.csv").exists():
            (out_dir / "metrics.csv").unlink()
    metrics = _MetricsLog(out_dir / "metrics.csv")

    def snapshot(directory):
        save_checkpoint(
            directory, cfg, splits.shape, model, optimizer,
            {**state, "numpy_rng": np_rng.bit_generator.state, "torch_rng": torch_gen.get_state()},
        )

    params = [p for p in model.parameters() if p.requires_grad]
    started = time.perf_counter() - state["elapsed"]
    stop_reason = "max_iterations"
    steps = 0
    n_train = len(splits.train)
    batch = min(opt_cfg.batch_size, n_train)
    while state["iteration"] < opt_cfg.max_iterations:
        if max_steps is not None and steps >= max_steps:
            stop_reason = "max_steps"
            break
        idx = np_rng.choice(n_train, size=batch, replace=False)
        noisy, _ = prepare_batch(splits.train.samples[idx], cfg, splits.quantized, np_rng, splits.shape)
        x = torch.as_tensor(noisy, dtype=dtype)
        abort = (
            f"non-finite loss at iteration {state['iteration'] + 1}; "
            f"last good checkpoint kept at {last_dir}"
        )
        try:
            loss = model.loss(x, generator=torch_gen)
        except NonFiniteError as exc:
            raise NonFiniteLossError(f"{abort} ({exc})") from exc
        if not torch.isfinite(loss):
            raise NonFiniteLossError(abort)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if opt_cfg.clip_norm is not None:
            torch.nn.utils.clip_grad_norm_(params, opt_cfg.clip_norm)
        optimizer.step()
        steps += 1
        state["iteration"] += 1
        state["loss_sum"] += loss.item()
        state["loss_count"] += 1

        it = state["iteration"]
        if it % opt_cfg.eval_every == 0 or it == opt_cfg.max_iterations:
            val = validation_loss(model, splits.val, cfg, it)
            state["elapsed"] = time.perf_counter() - started
            metrics.append({
                "iteration": it,
                "train_loss": state["loss_sum"] / state["loss_count"],
                "val_loss": val,
                "val_seed": validation_seed(cfg, it),
                "sigma": sigma_of(model),
                "wall_time": round(state["elapsed"], 3),
            })
            state["loss_sum"], state["loss_count"] = 0.0, 0
            log.info("iter %d train %.4f val %.4f sigma %.4g", it, metrics.rows[-1]["train_loss"], val, sigma_of(model))
            if not math.isfinite(val):
                raise NonFiniteLossError(f"non-finite validation loss at iteration {it}")
            if val < state["best_val"]:
                state["best_val"], state["best_iteration"] = val, it
                snapshot(best_dir)
            snapshot(last_dir)
            if it - state["best_iteration"] >= opt_cfg.patience:
                stop_reason = "early_stopping"
                break
    state["elapsed"] = time.perf_counter() - started
    snapshot(last_dir)
    if not (best_dir / "manifest.json").exists():
        snapshot(best_dir)
    return TrainResult(
        best_dir, last_dir, metrics.rows, state["iteration"], state["best_val"],
        state["best_iteration"], stop_reason, cfg.config_hash(),
    )


def resume(checkpoint: str | Path, cfg: RunConfig, max_steps: int | None = None,
           splits: Splits | None = None) -> TrainResult:
    """Continue the run whose ``last`` checkpoint lives at ``checkpoint``."""
    checkpoint = Path(checkpoint)
    manifest = read_manifest(checkpoint)
    if manifest["config_hash"] != cfg.config_hash():
        raise ResumeError("config differs from the one the checkpoint was trained with")
    out_dir = checkpoint.parent.parent
    if checkpoint.name != "last":
        raise ResumeError("resume from the 'last' checkpoint of a run directory")
    return train(cfg, out_dir, max_steps=max_steps, resume=True, splits=splits)


# --- ablations ------------------------------------------------------------------


def ablation_matrix(base: RunConfig) -> list[RunConfig]:
    """Four copies of ``base``: with and without posterior/core flow and prior flow."""
    out = []
    for tag, (inner, prior) in ABLATION_TAGS.items():
        out.append(base.replace(**{
            "name": f"{base.name}-{tag}",
            "model.core_flow": inner,
            "model.prior_flow": prior,
        }))
    return out


def paired_ablation(base: RunConfig) -> list[RunConfig]:
    """Ablation matrix for the AEF variant of ``base`` and for the VAE (8 configs)."""
    variant = base.model.variant
    aef_variant = variant if variant.startswith("aef") else "aef-linear"
    aef = base.replace(**{"model.variant": aef_variant, "name": f"{base.name}-aef"})
    vae = base.replace(**{"model.variant": "vae", "name": f"{base.name}-vae"})
    return ablation_matrix(aef) + ablation_matrix(vae)
