"""Image grids and report figures written next to the CSV/JSON outputs."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402


def quantize(x: np.ndarray) -> np.ndarray:
    """``floor(clip(x, 0, 1 - 1e-6) * 256)`` as uint8."""
    return np.floor(np.clip(x, 0.0, 1.0 - 1e-6) * 256).astype(np.uint8)


def grid_side(count: int) -> int:
    return math.ceil(math.sqrt(count))


def tile(images: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Tile ``(n, C, H, W)`` uint8 images row-major into a ``rows x cols`` canvas."""
    n, C, H, W = images.shape
    canvas = np.zeros((rows * H, cols * W, C), dtype=np.uint8)
    for k in range(min(n, rows * cols)):
        r, c = divmod(k, cols)
        canvas[r * H : (r + 1) * H, c * W : (c + 1) * W] = images[k].transpose(1, 2, 0)
    return canvas


def _write_png(canvas: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if canvas.shape[-1] == 1:
        Image.fromarray(canvas[..., 0], mode="L").save(path)
    else:
        Image.fromarray(canvas, mode="RGB").save(path)
    return path


def save_image_grid(samples: np.ndarray, shape: Sequence[int], path: str | Path) -> Path:
    """Square grid of ``ceil(sqrt(n))`` cells per side; values in [0, 1]."""
    images = quantize(np.asarray(samples)).reshape(-1, *shape)
    side = grid_side(len(images))
    return _write_png(tile(images, side, side), path)


def save_rows(rows: Sequence[np.ndarray], shape: Sequence[int], path: str | Path) -> Path:
    """One image row per array, e.g. noisy / reconstructed / clean."""
    images = np.concatenate([quantize(np.asarray(r)).reshape(-1, *shape) for r in rows])
    return _write_png(tile(images, len(rows), len(rows[0])), path)


def read_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path))


def _projector(reference: np.ndarray):
    mean = reference.mean(0)
    _, _, vt = np.linalg.svd(reference - mean, full_matrices=False)
    basis = vt[:2].T
    return lambda x: (np.asarray(x) - mean) @ basis


def plot_samples(samples: np.ndarray, reference: np.ndarray, path: str | Path, title: str = "samples") -> Path:
    """Scatter of model samples against reference data, projected on its top-2 PCA axes."""
    project = _projector(reference)
    fig, ax = plt.subplots(figsize=(5, 5))
    ref = project(reference)
    smp = project(samples)
    ax.scatter(ref[:, 0], ref[:, 1], s=4, alpha=0.3, color="0.6", label="data")
    ax.scatter(smp[:, 0], smp[:, 1], s=6, alpha=0.7, color="C0", label="model")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.set_title(title)
    ax.legend(loc="best", frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_denoising(noisy, recon, clean, path: str | Path) -> Path:
    project = _projector(np.asarray(clean))
    fig, axes = plt.subplots(1, 3, figsize=(12, 4), sharex=True, sharey=True)
    for ax, data, label in zip(axes, (noisy, recon, clean), ("noisy input", "reconstruction", "clean")):
        p = project(data)
        ax.scatter(p[:, 0], p[:, 1], s=4, alpha=0.6)
        ax.set_title(label)
        ax.set_xlabel("PC 1")
    axes[0].set_ylabel("PC 2")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_training_curves(metrics: list[dict], path: str | Path) -> Path:
    it = np.array([float(r["iteration"]) for r in metrics])
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(it, [float(r["train_loss"]) for r in metrics], label="train")
    ax1.plot(it, [float(r["val_loss"]) for r in metrics], label="validation")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("loss (nats)")
    ax1.legend(frameon=False)
    sigma = [float(r["sigma"]) for r in metrics]
    if np.isfinite(sigma).any():
        ax2.semilogy(it, sigma)
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("decoder sigma")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_ablation(rows: list[dict], path: str | Path) -> Path:
    names = [r["name"] for r in rows]
    vals = [float(r["val_loss"]) for r in rows]
    fig, ax = plt.subplots(figsize=(max(6, 0.8 * len(rows)), 4))
    ax.bar(range(len(rows)), vals, color=["C0" if r["variant"] != "vae" else "C1" for r in rows])
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("validation loss (nats)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
