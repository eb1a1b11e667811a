import math

import numpy as np
import pytest
import torch
from torch import nn

from aef.flows import (
    ActNorm,
    AutoregressiveFlow,
    Composite,
    CouplingLayer,
    DomainError,
    Identity,
    Inverse,
    LogitPreprocess,
    MaskedAffineAutoregressive,
    NonInvertibleError,
    ResidualMADE,
    actnorm_init,
    build_made_masks,
    compose,
    flow_nll,
    logit_preprocess,
)

from _helpers import dense_jacobian, log_abs_det, randomize


class Const(nn.Module):
    def __init__(self, values):
        super().__init__()
        self.values = torch.tensor(values, dtype=torch.float64)

    def forward(self, y1):
        return self.values.expand(y1.shape[0], -1)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


def test_identity_coupling_is_identity(rng):
    layer = CouplingLayer([True, False, True, False], hidden=(8,), identity_init=True).double()
    y = torch.randn(16, 4, generator=rng, dtype=torch.float64)
    out, logdet = layer(y)
    assert torch.equal(out, y)
    assert torch.all(logdet == 0)
    back, _ = layer.inverse(y)
    assert torch.equal(back, y)


def test_coupling_hand_example():
    # block 2 is scaled by (2, 4) and shifted by (1, -1)
    scale = Const([math.log(2.0), math.log(4.0)])
    shift = Const([1.0, -1.0])
    layer = CouplingLayer([True, True, False, False], scale_net=scale, shift_net=shift)
    y = torch.tensor([[0.3, -0.7, 0.0, 0.0]], dtype=torch.float64)
    out, logdet = layer(y)
    assert torch.allclose(out, torch.tensor([[0.3, -0.7, 1.0, -1.0]], dtype=torch.float64))
    assert logdet.item() == pytest.approx(math.log(8.0), abs=1e-12)
    back, inv_logdet = layer.inverse(out)
    assert torch.allclose(back, y, atol=1e-15)
    assert inv_logdet.item() == pytest.approx(-math.log(8.0), abs=1e-12)


def test_random_stack_logdet_matches_dense_jacobian(rng):
    torch.manual_seed(0)
    flow = compose([
        CouplingLayer([True, False] * 3, hidden=(16,)),
        ActNorm(6),
        MaskedAffineAutoregressive(6, hidden=16),
        CouplingLayer([False, True] * 3, hidden=(16,)),
        AutoregressiveFlow(6, num_layers=2, hidden=16),
    ]).double()
    randomize(flow, 0.05).eval()
    y = torch.randn(20, 6, generator=rng, dtype=torch.float64)
    out, logdet = flow(y)
    assert out.abs().max() < 1e3  # keeps the finite-difference oracle well conditioned
    J = dense_jacobian(lambda v: flow(v)[0], y)
    assert torch.allclose(logdet, log_abs_det(J), atol=1e-4)


def test_maf_sequential_inverse_round_trip(rng):
    torch.manual_seed(1)
    layer = randomize(MaskedAffineAutoregressive(5, hidden=32).double(), 0.2)
    y = torch.randn(100, 5, generator=rng, dtype=torch.float64)
    out, ld = layer(y)
    back, ld_inv = layer.inverse(out)
    assert torch.allclose(back, y, atol=1e-10)
    assert torch.allclose(ld, -ld_inv, atol=1e-10)


def test_inverse_reports_scale_underflow():
    layer = CouplingLayer([True, False], scale_net=Const([-1e4]), shift_net=Const([0.0]))
    # the scale is clamped at 1e-6, so dividing 1e305 by it overflows
    y = torch.tensor([[0.0, 1e305]], dtype=torch.float64)
    with pytest.raises(NonInvertibleError):
        layer.inverse(y)


def test_logit_symmetric_point():
    x, logdet = logit_preprocess(torch.full((3, 2), 0.5, dtype=torch.float64), 0.0)
    assert torch.allclose(x, torch.zeros(3, 2, dtype=torch.float64))
    assert torch.allclose(logdet, torch.full((3,), 2 * math.log(4.0), dtype=torch.float64))


def test_logit_logdet_matches_derivative(rng):
    layer = LogitPreprocess(0.05)
    z = torch.rand(50, 3, generator=rng, dtype=torch.float64) * 0.98 + 0.01
    _, logdet = layer(z)
    J = dense_jacobian(lambda v: layer(v)[0], z, h=1e-7)
    assert torch.allclose(logdet, log_abs_det(J), atol=1e-5)
    x, _ = layer(z)
    back, inv_ld = layer.inverse(x)
    assert torch.allclose(back, z, atol=1e-12)
    assert torch.allclose(inv_ld, -logdet, atol=1e-9)


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 1.5])
def test_logit_rejects_boundary(bad):
    z = torch.tensor([[0.5, bad]], dtype=torch.float64)
    with pytest.raises(DomainError, match="dequantize"):
        LogitPreprocess(1e-6)(z)


def test_actnorm_standardizes_batch(rng):
    layer = ActNorm(4).double()
    batch = 3.0 * torch.randn(500, 4, generator=rng, dtype=torch.float64) + torch.tensor([1.0, -2.0, 0.0, 5.0])
    out, _ = layer(batch)
    assert bool(layer.initialized)
    assert torch.allclose(out.mean(0), torch.zeros(4, dtype=torch.float64), atol=1e-4)
    assert torch.allclose(out.var(0, unbiased=False), torch.ones(4, dtype=torch.float64), atol=1e-4)


def test_actnorm_on_standardized_batch_is_identity(rng):
    batch = torch.randn(64, 3, generator=rng, dtype=torch.float64)
    batch = (batch - batch.mean(0)) / batch.std(0, unbiased=False)
    layer = ActNorm(3).double()
    actnorm_init(layer, batch)
    assert torch.allclose(layer.loc, torch.zeros(3, dtype=torch.float64), atol=1e-12)
    assert torch.allclose(layer.log_scale, torch.zeros(3, dtype=torch.float64), atol=1e-12)


def test_actnorm_constant_dimension_uses_floor(rng):
    batch = torch.randn(32, 2, generator=rng, dtype=torch.float64)
    batch[:, 1] = 7.0
    layer = ActNorm(2).double()
    actnorm_init(layer, batch)
    assert math.exp(layer.log_scale[1].item()) == pytest.approx(1 / math.sqrt(layer.eps), rel=1e-9)
    out, _ = layer(batch)
    assert torch.isfinite(out).all()
    with pytest.raises(RuntimeError):
        actnorm_init(layer, batch)


def test_actnorm_does_not_initialize_in_eval_mode(rng):
    layer = ActNorm(2).double().eval()
    y = torch.randn(10, 2, generator=rng, dtype=torch.float64)
    out, _ = layer(y)
    assert torch.equal(out, y)
    assert not bool(layer.initialized)


def test_made_one_dimension_is_constant(rng):
    made = randomize(ResidualMADE(1, hidden=8).double())
    x = torch.randn(10, 1, generator=rng, dtype=torch.float64)
    raw, shift = made(x)
    assert torch.allclose(raw, raw[:1].expand_as(raw))
    assert torch.allclose(shift, shift[:1].expand_as(shift))


def _output_jacobian(made, x):
    J_raw = dense_jacobian(lambda v: made(v)[0], x)
    J_shift = dense_jacobian(lambda v: made(v)[1], x)
    return J_raw.abs().amax(0) + J_shift.abs().amax(0)


def test_made_two_dimensions_natural_order(rng):
    made = randomize(ResidualMADE(2, hidden=8).double())
    x = torch.randn(10, 2, generator=rng, dtype=torch.float64)
    J = _output_jacobian(made, x)
    assert J[0, 0] == 0 and J[0, 1] == 0
    assert J[1, 0] > 1e-6 and J[1, 1] == 0


def test_made_random_ordering_sparsity(rng):
    ordering = np.random.default_rng(3).permutation(4) + 1
    made = randomize(ResidualMADE(4, hidden=16, ordering=ordering).double())
    x = torch.randn(10, 4, generator=rng, dtype=torch.float64)
    J = _output_jacobian(made, x)
    allowed = ordering[None, :] < ordering[:, None]  # out i depends on in j iff order(j) < order(i)
    assert torch.all(J[torch.as_tensor(~allowed)] == 0)
    assert torch.all(J[torch.as_tensor(allowed)] > 0)


def test_made_masks_shapes():
    masks = build_made_masks(3, [5, 5])
    assert [m.shape for m in masks] == [(5, 3), (5, 5), (3, 5)]
    # the first input feeds nothing downstream of the last position
    product = masks[2] @ masks[1] @ masks[0]
    assert np.all(product[np.triu_indices(3)] == 0)


def test_empty_composition_is_identity(rng):
    flow = Composite([])
    y = torch.randn(5, 3, generator=rng)
    out, ld = flow(y)
    assert torch.equal(out, y) and torch.all(ld == 0)
    assert torch.equal(flow.inverse(y)[0], y)


def test_composite_logdet_is_sum_of_parts(rng):
    torch.manual_seed(2)
    a = randomize(CouplingLayer([True, True, False, False], hidden=(8,)).double())
    b = randomize(CouplingLayer([False, True, False, True], hidden=(8,)).double(), seed=1)
    y = torch.randn(30, 4, generator=rng, dtype=torch.float64)
    mid, ld_a = a(y)
    _, ld_b = b(mid)
    out, ld = compose([a, b])(y)
    assert torch.allclose(ld, ld_a + ld_b, atol=1e-12)
    J = dense_jacobian(lambda v: compose([a, b])(v)[0], y)
    assert torch.allclose(ld, log_abs_det(J), atol=1e-6)


def test_composite_rejects_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        Composite([ActNorm(3), ActNorm(4)])


def test_inverse_wrapper_swaps_directions(rng):
    torch.manual_seed(4)
    flow = randomize(AutoregressiveFlow(3, num_layers=2, hidden=8).double()).eval()
    inv = Inverse(flow)
    y = torch.randn(7, 3, generator=rng, dtype=torch.float64)
    a, ld_a = inv(y)
    b, ld_b = flow.inverse(y)
    assert torch.equal(a, b) and torch.equal(ld_a, ld_b)


def test_default_prior_flow_size():
    flow = AutoregressiveFlow(2)
    made_layers = [l for l in flow.layers if isinstance(l, MaskedAffineAutoregressive)]
    assert len(made_layers) == 4
    assert made_layers[0].made.initial.out_features == 256


def test_flow_nll_normalizes_in_one_dimension():
    torch.manual_seed(5)
    flow = randomize(Composite([ActNorm(1), MaskedAffineAutoregressive(1, hidden=8)]).double(), 0.5).eval()
    grid = torch.linspace(-40, 40, 200001, dtype=torch.float64)[:, None]
    mass = torch.trapezoid(torch.exp(-flow_nll(flow, grid)), grid[:, 0])
    assert mass.item() == pytest.approx(1.0, abs=1e-6)


def test_identity_bijection(rng):
    y = torch.randn(4, 2, generator=rng)
    out, ld = Identity()(y)
    assert torch.equal(out, y) and ld.shape == (4,)
