"""VAE baseline sharing the AEF's encoder, decoder, flows and error model."""
from __future__ import annotations

import math

import torch
from torch import nn

from .flows import Bijection, Identity, positive_scale, standard_normal_log_prob
from .models import ErrorDistribution


class VaeModel(nn.Module):
    """Gaussian-reparameterized VAE with an optional IAF posterior flow.

    ``posterior_flow.forward`` maps the affine sample ``g_m + g_s * eps`` to
    ``z`` (IAF orientation, same module type as the AEF core flow).
    """

    def __init__(
        self,
        encoder: nn.Module,
        decoder: nn.Module,
        posterior_flow: Bijection | None,
        prior: nn.Module,
        error: ErrorDistribution,
        preprocess: Bijection | None = None,
    ):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder
        self.posterior_flow = posterior_flow if posterior_flow is not None else Identity()
        self.prior = prior
        self.error = error
        self.preprocess = preprocess if preprocess is not None else Identity()
        self.latent_dim = prior.dim

    def _posterior(self, y, noise):
        mean, raw = self.encoder(y)
        scale, log_scale = positive_scale(raw)
        z, logdet = self.posterior_flow(mean + scale * noise)
        log_q = standard_normal_log_prob(noise) - log_scale.sum(-1) - logdet
        return z, log_q, log_scale.sum(-1) + logdet

    def reparameterize(self, x, noise):
        y, _ = self.preprocess(x)
        return self._posterior(y, noise)[0]

    def elbo_loss(self, x, noise, entropy: str = "analytic"):
        """Single-sample negative ELBO per data point.

        ``entropy="analytic"`` uses ``D/2 log(2 pi e) + sum log g_s + logdet``
        for the posterior entropy; ``"sample"`` uses ``-log q(z|x)`` at the
        drawn point. They differ by ``(|noise|^2 - D) / 2``, which carries no
        gradient.
        """
        y, ld_pre = self.preprocess(x)
        z, log_q, ld_post = self._posterior(y, noise)
        if entropy == "analytic":
            ent = ld_post + 0.5 * noise.shape[-1] * math.log(2 * math.pi * math.e)
        elif entropy == "sample":
            ent = -log_q
        else:
            raise ValueError(f"unknown entropy estimator {entropy!r}")
        recon = -self.error.log_prob(y - self.decoder(z))
        return recon - self.prior.log_prob(z) - ent - ld_pre

    def log_weight(self, x, noise):
        """``log p(x|z) + log p0(z) - log q(z|x)`` at ``z`` drawn with ``noise``."""
        y, ld_pre = self.preprocess(x)
        z, log_q, _ = self._posterior(y, noise)
        return self.error.log_prob(y - self.decoder(z)) + self.prior.log_prob(z) - log_q + ld_pre

    def loss(self, x, generator=None):
        noise = torch.randn(x.shape[0], self.latent_dim, generator=generator, dtype=x.dtype)
        return self.elbo_loss(x, noise).mean()

    def sample(self, count, temperature=1.0, generator=None, z=None):
        if z is None:
            z = self.prior.sample(count, temperature, generator, dtype=next(self.parameters()).dtype)
        x, _ = self.preprocess.inverse(self.decoder(z))
        return x

    def reconstruct(self, x):
        y, _ = self.preprocess(x)
        mean, _ = self.encoder(y)
        z, _ = self.posterior_flow(mean)
        x_hat, _ = self.preprocess.inverse(self.decoder(z))
        return x_hat


def reparameterize(m: VaeModel, x, noise):
    return m.reparameterize(x, noise)


def elbo_loss(m: VaeModel, x, noise):
    return m.elbo_loss(x, noise)


def sample_vae(m: VaeModel, temperature: float, count: int, generator=None):
    return m.sample(count, temperature, generator)
