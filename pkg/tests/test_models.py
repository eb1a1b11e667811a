import math

import numpy as np
import pytest
import torch
from torch import nn

from aef.flows import AutoregressiveFlow, Composite, CouplingLayer, LogitPreprocess, Bijection, standard_normal_log_prob
from aef.models import (
    AefModel,
    ErrorDistribution,
    FeatureExpansion,
    MLPDecoder,
    NonFiniteError,
    SIGMA_FLOOR,
    StandardNormalPrior,
    density_joint,
    make_partition,
    nll_expanded,
    nll_partitioned,
    partition_merge,
    partition_split,
    reconstruct,
    sample_expanded,
    sample_partitioned,
)

from _helpers import (
    ConstEncoder,
    ZeroDecoder,
    dense_jacobian,
    expanded_toy,
    factorized_toy,
    fd_grad_rel_error,
    log_abs_det,
    partitioned_toy,
    randomize,
    set_sigma,
)

f64 = torch.float64


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(7)


# --- partitions ----------------------------------------------------------------


def test_center_partition_of_4x4():
    scheme = make_partition("center", (1, 4, 4), 4)
    assert scheme.core.tolist() == [5, 6, 9, 10]
    assert len(scheme.shell) == 12


def test_corner_partition_of_4x4():
    assert make_partition("corner", (4, 4), 4).core.tolist() == [0, 1, 4, 5]


def test_random_partition_is_reproducible():
    a = make_partition("random", (8, 8), 5, seed=11)
    b = make_partition("random", (8, 8), 5, seed=11)
    assert np.array_equal(a.core, b.core)
    assert not np.array_equal(a.core, make_partition("random", (8, 8), 5, seed=12).core)


def test_merge_inverts_split(gen):
    scheme = make_partition("random", 9, 4, seed=0)
    x = torch.randn(6, 9, generator=gen)
    assert torch.equal(partition_merge(*partition_split(x, scheme), scheme), x)


@pytest.mark.parametrize("D", [4, 5])
def test_partition_rejects_large_core(D):
    with pytest.raises(ValueError, match="smaller than N"):
        make_partition("random", 4, D)


def test_error_distribution_init_and_floor():
    err = ErrorDistribution(1.0)
    assert err.sigma.item() == pytest.approx(1.0, abs=1e-7)
    with torch.no_grad():
        err.raw.fill_(-1e3)
    assert err.sigma.item() == pytest.approx(SIGMA_FLOOR)


# --- partitioned -------------------------------------------------------------


def _identity_partitioned(N, D, decoder=None):
    scheme = make_partition("random", N, D, seed=3)
    dec = decoder if decoder is not None else ZeroDecoder(N - D)
    m = AefModel(ConstEncoder(D), dec, None, StandardNormalPrior(D), ErrorDistribution(1.0), partition=scheme)
    return set_sigma(m.double(), 1.0)


def test_identity_partitioned_encoding(gen):
    torch.manual_seed(0)
    m = _identity_partitioned(5, 2, MLPDecoder(2, [8], 3))
    x = torch.randn(10, 5, generator=gen, dtype=f64)
    core, shell = partition_split(x, m.partition)
    z, delta, logdet = m.encode_partitioned(x)
    assert torch.equal(z, core)
    assert torch.allclose(delta, shell - m.decoder(core))
    assert torch.all(logdet == 0)


def test_partitioned_hand_nll():
    m = _identity_partitioned(2, 1)
    nll = nll_partitioned(m, torch.zeros(1, 2, dtype=f64))
    assert nll.item() == pytest.approx(math.log(2 * math.pi), abs=1e-12)


def test_partitioned_round_trip(gen):
    m = partitioned_toy(6, 2)
    x = torch.randn(200, 6, generator=gen, dtype=f64)
    z, delta, _ = m.encode_partitioned(x)
    assert torch.allclose(m.decode_partitioned(z, delta), x, atol=1e-10)


@pytest.mark.parametrize("flows", [True, False])
def test_partitioned_logdet_matches_dense_jacobian(gen, flows):
    m = partitioned_toy(6, 2, flows=flows, seed=1)
    x = torch.randn(30, 6, generator=gen, dtype=f64)
    _, _, logdet = m.encode_partitioned(x)
    J = dense_jacobian(lambda v: torch.cat(m.encode_partitioned(v)[:2], -1), x)
    assert torch.allclose(logdet, log_abs_det(J), atol=1e-4)


def test_partitioned_logdet_with_logit_preprocess(gen):
    m = partitioned_toy(5, 2, seed=2)
    m.preprocess = LogitPreprocess(0.01)
    x = torch.rand(20, 5, generator=gen, dtype=f64) * 0.9 + 0.05
    _, _, logdet = m.encode_partitioned(x)
    J = dense_jacobian(lambda v: torch.cat(m.encode_partitioned(v)[:2], -1), x, h=1e-7)
    assert torch.allclose(logdet, log_abs_det(J), atol=1e-4)
    z, delta, _ = m.encode_partitioned(x)
    assert torch.allclose(m.decode_partitioned(z, delta), x, atol=1e-10)


def test_partitioned_density_normalizes():
    m = partitioned_toy(2, 1, seed=4)
    grid = torch.linspace(-15, 15, 601, dtype=f64)
    X, Y = torch.meshgrid(grid, grid, indexing="ij")
    pts = torch.stack([X.reshape(-1), Y.reshape(-1)], -1)
    with torch.no_grad():
        dens = torch.exp(-m.nll_partitioned(pts)).reshape(601, 601)
    mass = torch.trapezoid(torch.trapezoid(dens, grid), grid)
    assert mass.item() == pytest.approx(1.0, abs=0.02)


class _Fn(nn.Module):
    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def forward(self, v):
        return self.fn(v)


class _OnLeading(Bijection):
    """Apply ``inner`` to the first ``D`` coordinates only."""

    def __init__(self, inner, D):
        super().__init__()
        self.inner, self.D = inner, D

    def forward(self, y):
        head, ld = self.inner(y[:, : self.D])
        return torch.cat([head, y[:, self.D :]], -1), ld


def test_partitioned_nll_matches_generic_flow_path(gen):
    """Rebuild the encoding as a generic composite of couplings and compare NLLs."""
    m = partitioned_toy(5, 2, seed=5)
    D = 2
    mask_shell = [False] * D + [True] * 3
    mask_core = [True] * D + [False] * 3
    composite = Composite([
        _OnLeading(m.core_flow, D),
        CouplingLayer(mask_shell, scale_net=_Fn(lambda s: m.encoder(s)[1]), shift_net=_Fn(lambda s: m.encoder(s)[0])),
        CouplingLayer(mask_core, scale_net=_Fn(lambda z: torch.zeros(z.shape[0], 3, dtype=f64)),
                      shift_net=_Fn(lambda z: -m.decoder(z))),
    ])
    x = torch.randn(100, 5, generator=gen, dtype=f64)
    core, shell = partition_split(x, m.partition)
    out, logdet = composite(torch.cat([core, shell], -1))
    z, delta = out[:, :D], out[:, D:]
    generic = -(m.prior.log_prob(z) + m.error.log_prob(delta) + logdet)
    assert torch.allclose(generic, m.nll_partitioned(x), atol=1e-6)


def test_non_finite_encoder_output_is_reported():
    m = _identity_partitioned(3, 1)
    with torch.no_grad():
        m.encoder.mean.fill_(float("nan"))
    with pytest.raises(NonFiniteError, match="z has"):
        m.encode_partitioned(torch.zeros(2, 3, dtype=f64))


# --- partitioned sampling ------------------------------------------------------


def test_partitioned_samples_reencode_with_zero_deviation(gen):
    m = partitioned_toy(6, 2, seed=6)
    z = torch.randn(100, 2, generator=gen, dtype=f64)
    x = m.decode_partitioned(z, torch.zeros(100, 4, dtype=f64))
    z2, delta, _ = m.encode_partitioned(x)
    assert torch.allclose(z2, z, atol=1e-10)
    assert delta.abs().max() < 1e-10


def test_identity_partitioned_decode(gen):
    torch.manual_seed(1)
    m = _identity_partitioned(4, 2, MLPDecoder(2, [8], 2))
    z = torch.randn(5, 2, generator=gen, dtype=f64)
    delta = torch.randn(5, 2, generator=gen, dtype=f64)
    core, shell = partition_split(m.decode_partitioned(z, delta), m.partition)
    assert torch.allclose(core, z)
    assert torch.allclose(shell, m.decoder(z) + delta)


def test_zero_temperature_partitioned_sampling():
    m = _identity_partitioned(4, 2)
    x = sample_partitioned(m, 0.0, 5)
    core, shell = partition_split(x, m.partition)
    assert torch.all(core == 0) and torch.all(shell == 0)


# --- expanded ----------------------------------------------------------------


def test_expanded_reduces_to_coordinate_selection(gen):
    torch.manual_seed(2)
    N, D = 4, 2
    expansion = FeatureExpansion(N, D)
    with torch.no_grad():
        expansion.weight.copy_(torch.eye(D, N))
        expansion.bias.zero_()
    dec = MLPDecoder(D, [8], N)
    m = AefModel(ConstEncoder(D), dec, None, StandardNormalPrior(D), ErrorDistribution(1.0),
                 expansion=expansion).double()
    x = torch.randn(10, N, generator=gen, dtype=f64)
    z, delta, logdet = m.encode_expanded(x)
    assert torch.allclose(z, x[:, :D])
    assert torch.allclose(delta, x - m.decoder(x[:, :D]))
    assert torch.all(logdet == 0)


def test_expanded_joint_logdet_matches_dense_jacobian(gen):
    N, D = 3, 2
    m = expanded_toy(N, D, seed=3)
    xw = torch.randn(40, N + D, generator=gen, dtype=f64)
    _, _, logdet = m.encode_joint(xw[:, :N], xw[:, N:])
    J = dense_jacobian(lambda v: torch.cat(m.encode_joint(v[:, :N], v[:, N:])[:2], -1), xw)
    assert torch.allclose(logdet, log_abs_det(J), atol=1e-4)


def test_expanded_round_trip(gen):
    m = expanded_toy(6, 3, seed=4)
    x = torch.randn(100, 6, generator=gen, dtype=f64)
    z, delta, _ = m.encode_expanded(x)
    x_back, w_back = m.decode_joint(z, delta)
    assert torch.allclose(x_back, x, atol=1e-10)
    assert torch.allclose(w_back, m.features(x), atol=1e-10)


@pytest.mark.parametrize("x", [0.0, 0.7, -2.3])
def test_expanded_hand_nll(x):
    m = factorized_toy()
    nll = nll_expanded(m, torch.tensor([[x]], dtype=f64))
    assert nll.item() == pytest.approx(x**2 / 2 + math.log(2 * math.pi), abs=1e-12)


def test_joint_density_closed_form(gen):
    sigma = 0.6
    m = factorized_toy(N=3, D=2, sigma=sigma)
    x = torch.randn(20, 3, generator=gen, dtype=f64)
    w = torch.randn(20, 2, generator=gen, dtype=f64)
    expected = standard_normal_log_prob(w) + standard_normal_log_prob(x / sigma) - 3 * math.log(sigma)
    assert torch.allclose(density_joint(m, x, w), expected, atol=1e-6)
    assert torch.allclose(density_joint(m, -x, w), density_joint(m, x, w))


def test_joint_density_at_features_is_negative_nll(gen):
    m = expanded_toy(5, 2, seed=5)
    x = torch.randn(10, 5, generator=gen, dtype=f64)
    assert torch.allclose(density_joint(m, x, m.features(x)), -nll_expanded(m, x))


def test_expanded_joint_density_normalizes():
    m = expanded_toy(1, 1, seed=6)
    grid = torch.linspace(-15, 15, 601, dtype=f64)
    X, W = torch.meshgrid(grid, grid, indexing="ij")
    with torch.no_grad():
        dens = torch.exp(m.density_joint(X.reshape(-1, 1), W.reshape(-1, 1))).reshape(601, 601)
    mass = torch.trapezoid(torch.trapezoid(dens, grid), grid)
    assert mass.item() == pytest.approx(1.0, abs=0.02)


def test_expanded_sampling_contract(gen):
    m = expanded_toy(5, 2, flows=False, seed=7)
    x0 = sample_expanded(m, 0.0, 4)
    assert x0.shape == (4, 5)
    assert torch.allclose(x0, m.decoder(torch.zeros(1, 2, dtype=f64)).expand(4, -1))
    z = torch.randn(3, 2, generator=gen, dtype=f64)
    assert torch.equal(m.sample(3, z=z), m.sample(3, z=z))


def test_expanded_reconstruction_is_x_minus_delta(gen):
    m = expanded_toy(5, 2, seed=8)
    x = torch.randn(10, 5, generator=gen, dtype=f64)
    _, delta, _ = m.encode_expanded(x)
    assert torch.allclose(reconstruct(m, x), x - delta, atol=1e-12)


def test_linear_pseudo_inverse_reconstructs_manifold(gen):
    N, D = 6, 2
    A, _ = torch.linalg.qr(torch.randn(N, D, generator=gen, dtype=f64))
    expansion = FeatureExpansion(N, D)
    decoder = nn.Linear(D, N, bias=False)
    with torch.no_grad():
        expansion.weight.copy_(A.T)
        expansion.bias.zero_()
        decoder.weight.copy_(A)
    m = AefModel(ConstEncoder(D), decoder, None, StandardNormalPrior(D), ErrorDistribution(0.1),
                 expansion=expansion).double()
    x = torch.randn(50, D, generator=gen, dtype=f64) @ A.T
    assert torch.allclose(reconstruct(m, x), x, atol=1e-12)


# --- gradients ---------------------------------------------------------------


def test_partitioned_nll_gradient_matches_finite_differences(gen):
    m = partitioned_toy(5, 2, seed=9)
    x = torch.randn(8, 5, generator=gen, dtype=f64)
    err = fd_grad_rel_error(lambda: m.nll_partitioned(x).mean(), list(m.parameters()))
    assert err < 1e-4


def test_expanded_nll_gradient_matches_finite_differences(gen):
    m = expanded_toy(5, 2, seed=10)
    x = torch.randn(8, 5, generator=gen, dtype=f64)
    err = fd_grad_rel_error(lambda: m.nll_expanded(x).mean(), list(m.parameters()))
    assert err < 1e-4


def test_expansion_gradient_matches_finite_differences(gen):
    m = expanded_toy(5, 2, seed=11)
    x = torch.randn(8, 5, generator=gen, dtype=f64)
    err = fd_grad_rel_error(lambda: m.nll_expanded(x).mean(), list(m.expansion.parameters()))
    assert err < 1e-4
    assert m.expansion.weight.grad.abs().max() > 0
