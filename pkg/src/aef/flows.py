"""Invertible layers with exact log-det-Jacobian bookkeeping.

Every layer maps ``(batch, dim)`` tensors and returns ``(output, logdet)``
from both ``forward`` and ``inverse``, where ``logdet`` has shape ``(batch,)``
and refers to the direction that was called.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

MIN_SCALE = 1e-6
ACTNORM_EPS = 1e-6
_LOG_MIN_SCALE = math.log(MIN_SCALE)


class DomainError(ValueError):
    """Input lies outside the domain of a bijection."""


class NonInvertibleError(ArithmeticError):
    """The layer cannot be inverted at the requested point."""


def positive_scale(raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Map an unconstrained log-scale to ``(scale, log_scale)``.

    The scale is ``exp(raw)`` clamped below at ``MIN_SCALE``.
    """
    log_scale = torch.clamp(raw, min=_LOG_MIN_SCALE)
    return torch.exp(log_scale), log_scale


def standard_normal_log_prob(z: torch.Tensor) -> torch.Tensor:
    return -0.5 * (z**2).sum(-1) - 0.5 * z.shape[-1] * math.log(2 * math.pi)


class Bijection(nn.Module):
    """Base class. ``dim`` is ``None`` for layers that accept any width."""

    dim: int | None = None

    def forward(self, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError

    def inverse(self, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError


class Identity(Bijection):
    def __init__(self, dim: int | None = None):
        super().__init__()
        self.dim = dim

    def forward(self, y):
        return y, y.new_zeros(y.shape[0])

    def inverse(self, y):
        return y, y.new_zeros(y.shape[0])


class Inverse(Bijection):
    """Swap the two directions of a bijection (e.g. MAF -> IAF)."""

    def __init__(self, base: Bijection):
        super().__init__()
        self.base = base
        self.dim = base.dim

    def forward(self, y):
        return self.base.inverse(y)

    def inverse(self, y):
        return self.base.forward(y)


class Composite(Bijection):
    """Apply bijections in order; the inverse runs them in reverse."""

    def __init__(self, layers: Sequence[Bijection] = ()):
        super().__init__()
        dims = [layer.dim for layer in layers if layer.dim is not None]
        if any(d != dims[0] for d in dims):
            raise ValueError(f"dimension mismatch in composition: {dims}")
        self.layers = nn.ModuleList(layers)
        self.dim = dims[0] if dims else None

    def forward(self, y):
        total = y.new_zeros(y.shape[0])
        for layer in self.layers:
            y, logdet = layer(y)
            total = total + logdet
        return y, total

    def inverse(self, y):
        total = y.new_zeros(y.shape[0])
        for layer in reversed(self.layers):
            y, logdet = layer.inverse(y)
            total = total + logdet
        return y, total


def compose(bijections: Sequence[Bijection]) -> Bijection:
    return Composite(bijections)


class MLP(nn.Sequential):
    def __init__(self, in_features, hidden, out_features, activation=nn.ReLU, zero_last=False):
        layers = []
        width = in_features
        for h in hidden:
            layers += [nn.Linear(width, h), activation()]
            width = h
        last = nn.Linear(width, out_features)
        if zero_last:
            nn.init.zeros_(last.weight)
            nn.init.zeros_(last.bias)
        layers.append(last)
        super().__init__(*layers)


class CouplingLayer(Bijection):
    """Affine coupling: block 2 is scaled and shifted conditioned on block 1.

    ``mask`` is True on block-1 (pass-through) coordinates. ``scale_net``
    returns the log-scale of block 2 and ``shift_net`` its shift; both take
    the block-1 coordinates as input.
    """

    def __init__(
        self,
        mask: Sequence[bool] | torch.Tensor,
        scale_net: nn.Module | None = None,
        shift_net: nn.Module | None = None,
        hidden: Sequence[int] = (64, 64),
        identity_init: bool = False,
    ):
        super().__init__()
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if mask.all() or not mask.any():
            raise ValueError("coupling mask needs both blocks to be nonempty")
        self.dim = mask.numel()
        self.register_buffer("block1", torch.nonzero(mask).flatten())
        self.register_buffer("block2", torch.nonzero(~mask).flatten())
        d1, d2 = len(self.block1), len(self.block2)
        self.scale_net = scale_net if scale_net is not None else MLP(d1, hidden, d2, zero_last=identity_init)
        self.shift_net = shift_net if shift_net is not None else MLP(d1, hidden, d2, zero_last=identity_init)

    def _params(self, y1):
        scale, log_scale = positive_scale(self.scale_net(y1))
        return scale, log_scale, self.shift_net(y1)

    def forward(self, y):
        y1, y2 = y[:, self.block1], y[:, self.block2]
        scale, log_scale, shift = self._params(y1)
        out = y.clone()
        out[:, self.block2] = scale * y2 + shift
        return out, log_scale.sum(-1)

    def inverse(self, y):
        y1, y2 = y[:, self.block1], y[:, self.block2]
        scale, log_scale, shift = self._params(y1)
        out = y.clone()
        out[:, self.block2] = (y2 - shift) / scale
        if not torch.isfinite(out).all():
            raise NonInvertibleError("coupling inverse produced non-finite values")
        return out, -log_scale.sum(-1)


class ActNorm(Bijection):
    """Per-dimension affine map ``(y - loc) * scale`` with data-dependent init.

    While in training mode, the first forward call on a batch of at least two
    rows initializes the layer so that batch is standardized.
    """

    def __init__(self, dim: int, eps: float = ACTNORM_EPS):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.loc = nn.Parameter(torch.zeros(dim))
        self.log_scale = nn.Parameter(torch.zeros(dim))
        self.register_buffer("initialized", torch.tensor(False))

    @torch.no_grad()
    def initialize(self, batch: torch.Tensor) -> None:
        if self.initialized:
            raise RuntimeError("ActNorm layer is already initialized")
        if batch.shape[0] < 2:
            raise ValueError("ActNorm initialization needs a batch of at least 2 rows")
        var = batch.var(0, unbiased=False).clamp(min=self.eps)
        self.loc.copy_(batch.mean(0))
        self.log_scale.copy_(-0.5 * torch.log(var))
        self.initialized.fill_(True)

    def forward(self, y):
        if self.training and not self.initialized and y.shape[0] >= 2:
            self.initialize(y.detach())
        out = (y - self.loc) * torch.exp(self.log_scale)
        return out, self.log_scale.sum().expand(y.shape[0])

    def inverse(self, y):
        out = y * torch.exp(-self.log_scale) + self.loc
        return out, (-self.log_scale.sum()).expand(y.shape[0])


def actnorm_init(layer: ActNorm, batch: torch.Tensor) -> None:
    layer.initialize(batch)


class LogitPreprocess(Bijection):
    """``x = logit(lam + (1 - 2 lam) z)`` for ``z`` strictly inside (0, 1)."""

    def __init__(self, lam: float = 1e-6, dim: int | None = None):
        super().__init__()
        if not 0.0 <= lam < 0.5:
            raise ValueError(f"lambda must lie in [0, 0.5), got {lam}")
        self.lam = lam
        self.dim = dim

    def forward(self, z):
        if not ((z > 0) & (z < 1)).all():
            raise DomainError(
                "logit preprocessing needs inputs strictly inside (0, 1); dequantize the data first"
            )
        u = self.lam + (1 - 2 * self.lam) * z
        x = torch.log(u) - torch.log1p(-u)
        logdet = math.log(1 - 2 * self.lam) - torch.log(u) - torch.log1p(-u)
        return x, logdet.sum(-1)

    def inverse(self, x):
        u = torch.sigmoid(x)
        z = (u - self.lam) / (1 - 2 * self.lam)
        # log u + log(1-u) = -softplus(-x) - softplus(x)
        logdet = -math.log(1 - 2 * self.lam) - F.softplus(-x) - F.softplus(x)
        return z, logdet.sum(-1)


def logit_preprocess(z: torch.Tensor, lam: float) -> tuple[torch.Tensor, torch.Tensor]:
    return LogitPreprocess(lam)(z)


# --- MADE -------------------------------------------------------------------


def _hidden_degrees(width: int, D: int) -> np.ndarray:
    return np.arange(width) % max(1, D - 1) + min(1, D - 1)


def build_made_masks(D: int, hidden_sizes: Sequence[int], ordering: Sequence[int] | None = None) -> list[np.ndarray]:
    """Connectivity masks for a MADE network.

    ``ordering[i]`` is the autoregressive position (1-based) of input ``i``.
    Returns one ``(out, in)`` mask per layer; the last one maps to ``D``
    outputs, output ``i`` depending only on inputs ordered before ``i``.
    """
    if D < 1:
        raise ValueError("D must be at least 1")
    if ordering is None:
        ordering = np.arange(1, D + 1)
    in_deg = np.asarray(ordering)
    if sorted(in_deg.tolist()) != list(range(1, D + 1)):
        raise ValueError("ordering must be a permutation of 1..D")
    masks = []
    prev = in_deg
    for width in hidden_sizes:
        deg = _hidden_degrees(width, D)
        masks.append((deg[:, None] >= prev[None, :]).astype(np.float32))
        prev = deg
    masks.append((in_deg[:, None] > prev[None, :]).astype(np.float32))
    return masks


class MaskedLinear(nn.Linear):
    def __init__(self, in_features, out_features, mask: np.ndarray):
        super().__init__(in_features, out_features)
        self.register_buffer("mask", torch.as_tensor(mask, dtype=torch.float32))

    def forward(self, x):
        return F.linear(x, self.weight * self.mask.to(self.weight.dtype), self.bias)


class _MaskedResidualBlock(nn.Module):
    def __init__(self, width, mask):
        super().__init__()
        self.linear1 = MaskedLinear(width, width, mask)
        self.linear2 = MaskedLinear(width, width, mask)
        nn.init.uniform_(self.linear2.weight, -1e-3, 1e-3)
        nn.init.uniform_(self.linear2.bias, -1e-3, 1e-3)

    def forward(self, x):
        h = self.linear1(F.relu(x))
        h = self.linear2(F.relu(h))
        return x + h


class ResidualMADE(nn.Module):
    """MADE with residual blocks; outputs ``(log_scale, shift)`` per input."""

    def __init__(self, D: int, hidden: int = 256, blocks: int = 2, ordering=None):
        super().__init__()
        self.D = D
        masks = build_made_masks(D, [hidden] * (blocks + 1), ordering)
        self.initial = MaskedLinear(D, hidden, masks[0])
        self.blocks = nn.ModuleList(_MaskedResidualBlock(hidden, masks[i + 1]) for i in range(blocks))
        out_mask = np.concatenate([masks[-1], masks[-1]], axis=0)
        self.final = MaskedLinear(hidden, 2 * D, out_mask)
        nn.init.uniform_(self.final.weight, -1e-3, 1e-3)
        nn.init.zeros_(self.final.bias)

    def forward(self, x):
        h = self.initial(x)
        for block in self.blocks:
            h = block(h)
        out = self.final(h)
        return out[:, : self.D], out[:, self.D :]


class MaskedAffineAutoregressive(Bijection):
    """``y'_i = s_i(y_<i) * y_i + m_i(y_<i)``; the inverse is sequential."""

    def __init__(self, D: int, hidden: int = 256, blocks: int = 2, ordering=None):
        super().__init__()
        self.dim = D
        if ordering is None:
            ordering = np.arange(1, D + 1)
        self.register_buffer("ordering", torch.as_tensor(np.asarray(ordering)))
        self.made = ResidualMADE(D, hidden, blocks, ordering)

    def forward(self, y):
        raw, shift = self.made(y)
        scale, log_scale = positive_scale(raw)
        return scale * y + shift, log_scale.sum(-1)

    def inverse(self, y):
        x = torch.zeros_like(y)
        for i in torch.argsort(self.ordering).tolist():
            raw, shift = self.made(x)
            scale, _ = positive_scale(raw)
            x = x.clone()
            x[:, i] = (y[:, i] - shift[:, i]) / scale[:, i]
        raw, _ = self.made(x)
        _, log_scale = positive_scale(raw)
        if not torch.isfinite(x).all():
            raise NonInvertibleError("autoregressive inverse produced non-finite values")
        return x, -log_scale.sum(-1)


class AutoregressiveFlow(Composite):
    """MAF: K masked autoregressive layers with ActNorm in between.

    Orderings alternate between natural and reversed. ``forward`` is the
    fast, parallel direction.
    """

    def __init__(self, D: int, num_layers: int = 4, hidden: int = 256, blocks: int = 2):
        natural = np.arange(1, D + 1)
        layers: list[Bijection] = []
        for k in range(num_layers):
            if k > 0:
                layers.append(ActNorm(D))
            ordering = natural if k % 2 == 0 else natural[::-1].copy()
            layers.append(MaskedAffineAutoregressive(D, hidden, blocks, ordering))
        super().__init__(layers)
        self.dim = D


def flow_nll(bijection: Bijection, x: torch.Tensor) -> torch.Tensor:
    """Change-of-variables NLL with a standard-normal base, ``bijection`` mapping data to base."""
    u, logdet = bijection(x)
    return -(standard_normal_log_prob(u) + logdet)
