"""Autoencoders within flows: partitioned and expanded variants.

Both variants embed an encoder/decoder pair in a bijection from data to
``(z, delta)``. The encoder is affine in the core variables,
``z = g_m + g_s * n^{-1}(core)``, so the Jacobian determinant of the whole map
is ``prod(g_s) * det(Dn^{-1})`` and the decoder never enters it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .flows import (
    AutoregressiveFlow,
    Bijection,
    Identity,
    MLP,
    positive_scale,
    standard_normal_log_prob,
)

SIGMA_FLOOR = 1e-4


class NonFiniteError(FloatingPointError):
    """An encoder produced NaN or infinite activations."""


def _check_finite(**tensors):
    for name, t in tensors.items():
        if not torch.isfinite(t).all():
            bad = (~torch.isfinite(t)).sum().item()
            raise NonFiniteError(f"{name} has {bad} non-finite entries (shape {tuple(t.shape)})")


# --- distributions ------------------------------------------------------------


class StandardNormalPrior(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def log_prob(self, z):
        return standard_normal_log_prob(z)

    def sample(self, count, temperature=1.0, generator=None, dtype=None, device=None):
        eps = torch.randn(count, self.dim, generator=generator, dtype=dtype, device=device)
        return temperature * eps


class FlowPrior(nn.Module):
    """Standard normal pushed through a flow; ``flow.forward`` maps z to the base."""

    def __init__(self, flow: Bijection, dim: int):
        super().__init__()
        self.flow = flow
        self.dim = dim

    def log_prob(self, z):
        u, logdet = self.flow(z)
        return standard_normal_log_prob(u) + logdet

    def sample(self, count, temperature=1.0, generator=None, dtype=None, device=None):
        eps = torch.randn(count, self.dim, generator=generator, dtype=dtype, device=device)
        z, _ = self.flow.inverse(temperature * eps)
        return z


def _inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class ErrorDistribution(nn.Module):
    """Isotropic Gaussian on residuals, ``sigma = floor + softplus(param)``."""

    def __init__(self, sigma_init: float = 1.0, trainable: bool = True, floor: float = SIGMA_FLOOR):
        super().__init__()
        if sigma_init <= floor:
            raise ValueError(f"sigma_init must exceed the floor {floor}")
        self.floor = floor
        self.raw = nn.Parameter(torch.tensor(_inverse_softplus(sigma_init - floor)), requires_grad=trainable)

    @property
    def sigma(self) -> torch.Tensor:
        return self.floor + F.softplus(self.raw)

    @torch.no_grad()
    def set_sigma(self, value: float) -> None:
        """Set sigma exactly in the parameter's current dtype."""
        if value <= self.floor:
            raise ValueError(f"sigma must exceed the floor {self.floor}")
        self.raw.fill_(_inverse_softplus(value - self.floor))

    def log_prob(self, delta):
        sigma = self.sigma
        n = delta.shape[-1]
        return -0.5 * (delta**2).sum(-1) / sigma**2 - 0.5 * n * torch.log(2 * math.pi * sigma**2)


# --- partitions and feature expansion ----------------------------------------


@dataclass
class PartitionScheme:
    kind: str
    shape: tuple[int, ...]
    core: np.ndarray
    seed: int | None = None
    shell: np.ndarray = field(init=False)

    def __post_init__(self):
        N = int(np.prod(self.shape))
        core = np.asarray(self.core, dtype=np.int64)
        if len(core) >= N:
            raise ValueError(f"core size {len(core)} must be smaller than N={N}")
        if len(np.unique(core)) != len(core) or core.min() < 0 or core.max() >= N:
            raise ValueError("core indices must be distinct and inside 0..N-1")
        self.core = core
        self.shell = np.setdiff1d(np.arange(N), core)

    @property
    def N(self) -> int:
        return int(np.prod(self.shape))

    @property
    def D(self) -> int:
        return len(self.core)


def _block(rows, cols, D, top, left):
    side = math.ceil(math.sqrt(D))
    cells = [(top + i, left + j) for i in range(side) for j in range(side)]
    cells = [(r, c) for r, c in cells if r < rows and c < cols]
    if len(cells) < D:
        raise ValueError(f"cannot fit a {side}x{side} block in a {rows}x{cols} grid")
    return cells[:D]


def make_partition(kind: str, shape: Sequence[int] | int, D: int, seed: int | None = 0) -> PartitionScheme:
    """Choose ``D`` core indices of a flattened array with the given shape.

    ``center`` and ``corner`` take a ceil(sqrt(D)) square block (centered, or
    at the top-left) over the last two axes, truncated to ``D`` cells in
    row-major order; 1-D shapes use a contiguous run instead. ``random``
    draws a seeded subset.
    """
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    N = int(np.prod(shape))
    if D >= N:
        raise ValueError(f"core size D={D} must be smaller than N={N}")
    if D < 1:
        raise ValueError("core size must be positive")
    if kind == "random":
        core = np.sort(np.random.default_rng(seed).choice(N, size=D, replace=False))
        return PartitionScheme(kind, shape, core, seed)
    if kind not in ("center", "corner"):
        raise ValueError(f"unknown partition kind {kind!r}")
    if len(shape) == 1:
        start = (N - D) // 2 if kind == "center" else 0
        return PartitionScheme(kind, shape, np.arange(start, start + D))
    rows, cols = shape[-2], shape[-1]
    channels = int(np.prod(shape[:-2]))
    per_channel = math.ceil(D / channels)
    side = math.ceil(math.sqrt(per_channel))
    top, left = ((rows - side) // 2, (cols - side) // 2) if kind == "center" else (0, 0)
    cells = _block(rows, cols, per_channel, top, left)
    flat = [c * rows * cols + r * cols + q for c in range(channels) for r, q in cells]
    return PartitionScheme(kind, shape, np.sort(np.array(flat[:D])))


def partition_split(x: torch.Tensor, scheme: PartitionScheme) -> tuple[torch.Tensor, torch.Tensor]:
    if x.shape[-1] != scheme.N:
        raise ValueError(f"expected {scheme.N} features, got {x.shape[-1]}")
    return x[:, torch.as_tensor(scheme.core)], x[:, torch.as_tensor(scheme.shell)]


def partition_merge(core: torch.Tensor, shell: torch.Tensor, scheme: PartitionScheme) -> torch.Tensor:
    order = np.concatenate([scheme.core, scheme.shell])
    return torch.cat([core, shell], -1)[:, torch.as_tensor(np.argsort(order))]


class FeatureExpansion(nn.Linear):
    """Learnable linear features ``h(x) = W x + b``."""

    def __init__(self, N: int, D: int, init_std: float = 0.01):
        super().__init__(N, D)
        nn.init.normal_(self.weight, std=init_std)
        nn.init.zeros_(self.bias)


# --- networks -----------------------------------------------------------------


class MLPEncoder(nn.Module):
    """Shared trunk with mean and log-scale heads."""

    def __init__(self, in_features: int, hidden: Sequence[int], D: int):
        super().__init__()
        layers = []
        width = in_features
        for h in hidden:
            layers += [nn.Linear(width, h), nn.ReLU()]
            width = h
        self.trunk = nn.Sequential(*layers)
        self.mean = nn.Linear(width, D)
        self.log_scale = nn.Linear(width, D)

    def forward(self, x):
        h = self.trunk(x)
        return self.mean(h), self.log_scale(h)


class MLPDecoder(MLP):
    def __init__(self, D: int, hidden: Sequence[int], out_features: int):
        super().__init__(D, hidden, out_features)


class ConvEncoder(nn.Module):
    """Two 3x3 stride-2 conv layers (64, 128 channels), then mean/scale heads."""

    def __init__(self, image_shape: Sequence[int], D: int):
        super().__init__()
        C, H, W = image_shape
        self.image_shape = tuple(image_shape)
        self.convs = nn.Sequential(
            nn.Conv2d(C, 64, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(64, 128, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Flatten(),
        )
        feat = 128 * math.ceil(math.ceil(H / 2) / 2) * math.ceil(math.ceil(W / 2) / 2)
        self.mean = nn.Linear(feat, D)
        self.log_scale = nn.Linear(feat, D)

    def forward(self, x):
        h = self.convs(x.reshape(-1, *self.image_shape))
        return self.mean(h), self.log_scale(h)


class ConvDecoder(nn.Module):
    """Linear lift followed by two stride-2 transposed convolutions."""

    def __init__(self, D: int, image_shape: Sequence[int]):
        super().__init__()
        C, H, W = image_shape
        if H % 4 or W % 4:
            raise ValueError("conv decoder needs image sides divisible by 4")
        self.hw = (H // 4, W // 4)
        self.lift = nn.Linear(D, 128 * self.hw[0] * self.hw[1])
        self.deconvs = nn.Sequential(
            nn.ReLU(),
            nn.ConvTranspose2d(128, 64, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(64, C, 4, stride=2, padding=1),
            nn.Flatten(),
        )

    def forward(self, z):
        return self.deconvs(self.lift(z).reshape(-1, 128, *self.hw))


class ShellInput(nn.Module):
    """Feed shell variables to a full-input encoder, with core entries zeroed."""

    def __init__(self, encoder: nn.Module, scheme: PartitionScheme):
        super().__init__()
        self.encoder = encoder
        self.register_buffer("shell", torch.as_tensor(scheme.shell))
        self.N = scheme.N

    def forward(self, shell):
        full = shell.new_zeros(shell.shape[0], self.N)
        full = full.index_copy(1, self.shell, shell)
        return self.encoder(full)


class SelectOutputs(nn.Module):
    def __init__(self, decoder: nn.Module, index):
        super().__init__()
        self.decoder = decoder
        self.register_buffer("index", torch.as_tensor(index))

    def forward(self, z):
        return self.decoder(z)[:, self.index]


# --- AEF ----------------------------------------------------------------------


class AefModel(nn.Module):
    """Autoencoder within a flow.

    Exactly one of ``partition`` and ``expansion`` must be given. ``core_flow``
    is used in IAF orientation: its ``forward`` is the encoding direction
    ``n^{-1}``. ``preprocess`` (optional) maps data into the space the model
    works in, and its log-det is included in every density.
    """

    def __init__(
        self,
        encoder: nn.Module,
        decoder: nn.Module,
        core_flow: Bijection | None,
        prior: nn.Module,
        error: ErrorDistribution,
        partition: PartitionScheme | None = None,
        expansion: FeatureExpansion | None = None,
        preprocess: Bijection | None = None,
    ):
        super().__init__()
        if (partition is None) == (expansion is None):
            raise ValueError("give exactly one of partition or expansion")
        self.encoder = encoder
        self.decoder = decoder
        self.prior = prior
        self.core_flow = core_flow if core_flow is not None else Identity()
        self.error = error
        self.partition = partition
        self.expansion = expansion
        self.preprocess = preprocess if preprocess is not None else Identity()
        self.latent_dim = prior.dim

    @property
    def variant(self) -> str:
        return "partitioned" if self.partition is not None else "expanded"

    def _scale_encode(self, inputs):
        mean, raw = self.encoder(inputs)
        scale, log_scale = positive_scale(raw)
        return mean, scale, log_scale

    # partitioned ------------------------------------------------------------

    def encode_partitioned(self, x):
        y, logdet = self.preprocess(x)
        core, shell = partition_split(y, self.partition)
        u, ld_core = self.core_flow(core)
        mean, scale, log_scale = self._scale_encode(shell)
        z = mean + scale * u
        delta = shell - self.decoder(z)
        _check_finite(z=z, delta=delta)
        return z, delta, logdet + ld_core + log_scale.sum(-1)

    def decode_partitioned(self, z, delta):
        shell = self.decoder(z) + delta
        mean, scale, _ = self._scale_encode(shell)
        core, _ = self.core_flow.inverse((z - mean) / scale)
        x, _ = self.preprocess.inverse(partition_merge(core, shell, self.partition))
        return x

    def nll_partitioned(self, x):
        z, delta, logdet = self.encode_partitioned(x)
        return -(self.prior.log_prob(z) + self.error.log_prob(delta) + logdet)

    # expanded ---------------------------------------------------------------

    def features(self, x):
        y, _ = self.preprocess(x)
        return self.expansion(y)

    def encode_joint(self, x, w):
        """Encode an arbitrary point ``(x, w)`` of the expanded space."""
        y, logdet = self.preprocess(x)
        u, ld_core = self.core_flow(w)
        mean, scale, log_scale = self._scale_encode(y)
        z = mean + scale * u
        delta = y - self.decoder(z)
        _check_finite(z=z, delta=delta)
        return z, delta, logdet + ld_core + log_scale.sum(-1)

    def encode_expanded(self, x):
        return self.encode_joint(x, self.features(x))

    def decode_joint(self, z, delta):
        y = self.decoder(z) + delta
        mean, scale, _ = self._scale_encode(y)
        w, _ = self.core_flow.inverse((z - mean) / scale)
        x, _ = self.preprocess.inverse(y)
        return x, w

    def decode_expanded(self, z, delta):
        return self.decode_joint(z, delta)[0]

    def density_joint(self, x, w):
        z, delta, logdet = self.encode_joint(x, w)
        return self.prior.log_prob(z) + self.error.log_prob(delta) + logdet

    def nll_expanded(self, x):
        return -self.density_joint(x, self.features(x))

    # shared -----------------------------------------------------------------

    def encode(self, x):
        return self.encode_partitioned(x) if self.partition is not None else self.encode_expanded(x)

    def decode(self, z, delta):
        return self.decode_partitioned(z, delta) if self.partition is not None else self.decode_expanded(z, delta)

    def nll(self, x):
        return self.nll_partitioned(x) if self.partition is not None else self.nll_expanded(x)

    def loss(self, x, generator=None):
        return self.nll(x).mean()

    def sample(self, count, temperature=1.0, generator=None, z=None):
        if z is None:
            z = self.prior.sample(count, temperature, generator, dtype=self._dtype())
        if self.partition is not None:
            width = len(self.partition.shell)
            return self.decode_partitioned(z, z.new_zeros(z.shape[0], width))
        x, _ = self.preprocess.inverse(self.decoder(z))
        return x

    def reconstruct(self, x):
        z, delta, _ = self.encode(x)
        if self.partition is not None:
            return self.decode_partitioned(z, torch.zeros_like(delta))
        x_hat, _ = self.preprocess.inverse(self.decoder(z))
        return x_hat

    def _dtype(self):
        return next(self.parameters()).dtype


def nll_partitioned(m: AefModel, x):
    return m.nll_partitioned(x)


def nll_expanded(m: AefModel, x):
    return m.nll_expanded(x)


def sample_partitioned(m: AefModel, temperature: float, count: int, generator=None):
    return m.sample(count, temperature, generator)


def sample_expanded(m: AefModel, temperature: float, count: int, generator=None):
    return m.sample(count, temperature, generator)


def density_joint(m: AefModel, x, w):
    return m.density_joint(x, w)


def reconstruct(m, x):
    return m.reconstruct(x)


class DeterministicAE(nn.Module):
    """Least-squares autoencoder baseline (encoder mean head only)."""

    def __init__(self, encoder, decoder, preprocess: Bijection | None = None):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder
        self.preprocess = preprocess if preprocess is not None else Identity()
        self.latent_dim = None

    def reconstruct(self, x):
        y, _ = self.preprocess(x)
        z, _ = self.encoder(y)
        x_hat, _ = self.preprocess.inverse(self.decoder(z))
        return x_hat

    def loss(self, x, generator=None):
        y, _ = self.preprocess(x)
        z, _ = self.encoder(y)
        return ((y - self.decoder(z)) ** 2).mean()


def make_flow(D: int, num_layers: int, hidden: int) -> Bijection:
    return AutoregressiveFlow(D, num_layers=num_layers, hidden=hidden)
