"""Datasets: IDX images, dequantization, noise injection, toy manifolds, splits."""
from __future__ import annotations

import gzip
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MNIST_NOISE_LEVELS = (0.25, 0.5, 0.75, 1.0)
NATURAL_IMAGE_NOISE_LEVELS = (0.05, 0.1, 0.2)
TOY_KINDS = ("sine-curve", "circle", "swiss-ribbon")


@dataclass
class Dataset:
    samples: np.ndarray
    name: str = "dataset"
    shape: tuple[int, ...] = ()
    clean: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if not self.shape:
            self.shape = tuple(self.samples.shape[1:])
        self.samples = self.samples.reshape(len(self.samples), -1)
        if self.clean is not None:
            self.clean = np.asarray(self.clean).reshape(self.samples.shape)

    def __len__(self):
        return len(self.samples)

    @property
    def N(self) -> int:
        return self.samples.shape[1]

    @property
    def is_image(self) -> bool:
        return len(self.shape) >= 2

    def subset(self, index, name=None) -> "Dataset":
        meta = dict(self.meta)
        if "coords" in meta:
            meta["coords"] = meta["coords"][index]
        return Dataset(
            self.samples[index],
            name or self.name,
            self.shape,
            None if self.clean is None else self.clean[index],
            meta,
        )


@dataclass
class NoiseSpec:
    std: float
    clip: tuple[float, float] | None = (0.0, 1.0)

    def __post_init__(self):
        if self.std < 0:
            raise ValueError(f"noise std must be nonnegative, got {self.std}")


# --- IDX ----------------------------------------------------------------------

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path: str | Path) -> np.ndarray:
    """Read an IDX file (optionally gzipped) into an array."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path} is not an IDX file")
    dtype = np.dtype(_IDX_DTYPES[raw[2]])
    ndim = raw[3]
    dims = np.frombuffer(raw, ">u4", count=ndim, offset=4).astype(int)
    data = np.frombuffer(raw, dtype, offset=4 + 4 * ndim)
    return data.reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + np.asarray(array.shape, ">u4").tobytes()
    Path(path).write_bytes(header + array.tobytes())


def load_idx_images(path: str | Path, name: str = "idx") -> Dataset:
    images = read_idx(path)
    if images.ndim == 3:
        images = images[:, None]
    return Dataset(images.reshape(len(images), -1), name, tuple(images.shape[1:]))


# --- transforms ---------------------------------------------------------------


def dequantize(raw: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """``(raw + u) / 256`` with ``u ~ U[0, 1)``; values land in [0, 1)."""
    raw = np.asarray(raw)
    if raw.min() < 0 or raw.max() > 255:
        raise ValueError("dequantize expects integer values in 0..255")
    if np.issubdtype(raw.dtype, np.floating) and not np.all(raw == np.round(raw)):
        raise ValueError("dequantize expects integer-valued input")
    out = (raw.astype(np.float64) + rng.random(raw.shape)) / 256.0
    # float rounding can push 255 + (1 - 2^-53) up to exactly 256
    return np.minimum(out, np.nextafter(1.0, 0.0))


def add_noise(batch: np.ndarray, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    """Gaussian white noise, then clipping to ``spec.clip``."""
    if spec.std == 0:
        return np.array(batch, copy=True)
    noisy = batch + spec.std * rng.standard_normal(np.shape(batch))
    if spec.clip is not None:
        noisy = np.clip(noisy, *spec.clip)
    return noisy


def random_flip(images: np.ndarray, shape, rng: np.random.Generator) -> np.ndarray:
    """Flip each image left-right with probability 1/2."""
    imgs = np.asarray(images).reshape(len(images), *shape).copy()
    flip = rng.random(len(imgs)) < 0.5
    imgs[flip] = imgs[flip][..., ::-1]
    return imgs.reshape(len(images), -1)


# --- toy manifolds ------------------------------------------------------------


def _random_embedding(n_ambient: int, k: int, rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n_ambient, k)))
    return q * np.sign(np.diag(r))


def sine_curve(t: np.ndarray) -> np.ndarray:
    return np.stack([t, np.sin(2 * t)], -1)


def swiss_ribbon(t: np.ndarray, h: np.ndarray) -> np.ndarray:
    return np.stack([t * np.cos(t), h, t * np.sin(t)], -1) / 5.0


def toy_manifold(kind: str, n_ambient: int, count: int, noise: float = 0.0, seed: int = 0) -> Dataset:
    """Points on a smooth manifold, isometrically embedded in R^n_ambient.

    ``noise`` is the RMS Euclidean length of the isotropic Gaussian offset,
    i.e. each coordinate gets std ``noise / sqrt(n_ambient)``. ``meta`` keeps
    the embedding matrix and intrinsic coordinates; ``clean`` holds the
    noiseless points.
    """
    if kind not in TOY_KINDS:
        raise ValueError(f"unsupported manifold kind {kind!r}; choose from {TOY_KINDS}")
    if noise < 0:
        raise ValueError("noise must be nonnegative")
    rng = np.random.default_rng(seed)
    if kind == "sine-curve":
        intrinsic, base_dim = 1, 2
        t = rng.uniform(-math.pi / 2, math.pi / 2, count)
        base = sine_curve(t)
        coords = t[:, None]
    elif kind == "circle":
        intrinsic, base_dim = 1, 2
        t = rng.uniform(0, 2 * math.pi, count)
        base = np.stack([np.cos(t), np.sin(t)], -1)
        coords = t[:, None]
    else:
        intrinsic, base_dim = 2, 3
        t = rng.uniform(1.5 * math.pi, 4.5 * math.pi, count)
        h = rng.uniform(-2, 2, count)
        base = swiss_ribbon(t, h)
        coords = np.stack([t, h], -1)
    if intrinsic >= n_ambient:
        raise ValueError(f"intrinsic dimension {intrinsic} must be below the ambient dimension {n_ambient}")
    if base_dim > n_ambient:
        raise ValueError(f"{kind} needs at least {base_dim} ambient dimensions")
    embed = _random_embedding(n_ambient, base_dim, rng)
    clean = base @ embed.T
    samples = clean + (noise / math.sqrt(n_ambient)) * rng.standard_normal(clean.shape)
    meta = {
        "kind": kind,
        "n_ambient": n_ambient,
        "count": count,
        "noise": noise,
        "seed": seed,
        "intrinsic_dim": intrinsic,
        "embedding": embed.tolist(),
    }
    ds = Dataset(samples, kind, (n_ambient,), clean, meta)
    ds.meta["coords"] = coords
    return ds


def save_dataset(ds: Dataset, path: str | Path) -> Path:
    """Write samples as a flat float64 binary with a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ds.samples.astype("<f8").tofile(path.with_suffix(".bin"))
    if ds.clean is not None:
        ds.clean.astype("<f8").tofile(path.with_suffix(".clean.bin"))
    meta = {k: v for k, v in ds.meta.items() if k != "coords"}
    sidecar = {
        "name": ds.name,
        "shape": list(ds.shape),
        "count": len(ds),
        "has_clean": ds.clean is not None,
        "generator": meta,
    }
    out = path.with_suffix(".json")
    out.write_text(json.dumps(sidecar, indent=2))
    return out


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path).with_suffix(".json")
    side = json.loads(path.read_text())
    N = int(np.prod(side["shape"]))
    samples = np.fromfile(path.with_suffix(".bin"), "<f8").reshape(side["count"], N)
    clean = None
    if side.get("has_clean"):
        clean = np.fromfile(path.with_suffix(".clean.bin"), "<f8").reshape(side["count"], N)
    return Dataset(samples, side["name"], tuple(side["shape"]), clean, side["generator"])


def split(ds: Dataset, validation_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded disjoint train/validation split."""
    if not 0 < validation_fraction < 1:
        raise ValueError("validation fraction must lie strictly between 0 and 1")
    n_val = int(round(len(ds) * validation_fraction))
    if n_val == 0 or n_val == len(ds):
        raise ValueError(f"fraction {validation_fraction} of {len(ds)} samples leaves an empty split")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(np.sort(perm[n_val:])), ds.subset(np.sort(perm[:n_val]))
