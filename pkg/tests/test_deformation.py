import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ted4.deformation import DeformationBank, DeformationNets, bank_tv_loss, deform, interp, query
from ted4.training import grad_check

D = torch.float64


def test_bank_shape_and_nodes():
    bank = DeformationBank(20, 8)
    assert bank.Z.shape == (10, 8)
    assert bank.node_times().tolist() == pytest.approx([k / 9 for k in range(10)])
    with pytest.raises(ValueError):
        DeformationBank(7, 8)
    with pytest.raises(ValueError):
        DeformationBank(0, 8)


def test_interp_hits_nodes_and_midpoints():
    Z = torch.arange(12, dtype=D).reshape(4, 3)
    for k in range(4):
        assert torch.equal(interp(Z, k / 3), Z[k])
    assert torch.allclose(interp(Z, 0.5 / 3), 0.5 * (Z[0] + Z[1]))
    with pytest.raises(ValueError):
        interp(Z, 1.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0))
def test_interp_between_neighbours(t):
    Z = torch.randn(6, 4, dtype=D, generator=torch.Generator().manual_seed(0))
    z = interp(Z, t)
    k = min(int(t * 5), 4)
    lo, hi = torch.minimum(Z[k], Z[k + 1]), torch.maximum(Z[k], Z[k + 1])
    assert torch.all(z >= lo - 1e-12) and torch.all(z <= hi + 1e-12)


def test_untrained_decoder_is_identity():
    torch.manual_seed(0)
    nets = DeformationNets(4, 8, 16)
    xyz, feat, tfeat = torch.randn(5, 3), torch.randn(5, 16), torch.randn(5, 4)
    x, f = deform(xyz, feat, tfeat, DeformationBank(10, 8), nets, 0.3)
    assert torch.equal(x, xyz) and torch.equal(f, feat)


def test_static_anchors_untouched():
    torch.manual_seed(0)
    nets = DeformationNets(4, 8, 16).double()
    for p in nets.parameters():
        torch.nn.init.normal_(p)
    xyz, feat, tfeat = torch.randn(3, 3, dtype=D), torch.randn(3, 16, dtype=D), torch.randn(3, 4, dtype=D)
    bank = DeformationBank(10, 8).double()
    x, f = deform(xyz, feat, tfeat, bank, nets, 0.7, dynamic=torch.tensor([1.0, 0.0, 1.0], dtype=D))
    assert torch.equal(x[1], xyz[1]) and torch.equal(f[1], feat[1])
    assert not torch.equal(x[0], xyz[0])


def test_zero_temporal_feature_gets_zero_latent():
    nets = DeformationNets(4, 8, 16)
    w = nets.project(torch.zeros(2, 4))
    assert torch.equal(w, torch.zeros(2, 8))
    with pytest.raises(ValueError):
        query(torch.zeros(2, 8), torch.zeros(7))


def test_deform_dimension_checks():
    nets = DeformationNets(4, 8, 16)
    with pytest.raises(ValueError):
        deform(torch.zeros(2, 3), torch.zeros(2, 16), torch.zeros(2, 5), DeformationBank(4, 8), nets, 0.5)


def test_tv_loss():
    Z = torch.tensor([[0.0], [1.0], [3.0]], dtype=D)
    assert float(bank_tv_loss(Z)) == pytest.approx((1 + 4) / 2)
    assert float(bank_tv_loss(torch.zeros(1, 3))) == 0.0


def test_deform_gradients_match_central_differences():
    torch.manual_seed(3)
    nets = DeformationNets(4, 6, 8, hidden=10, dx_scale=0.5).double()
    for p in nets.parameters():
        torch.nn.init.normal_(p, std=0.5)
    bank = DeformationBank(8, 6).double()
    xyz = torch.randn(4, 3, dtype=D)
    feat = torch.randn(4, 8, dtype=D)
    tfeat = torch.randn(4, 4, dtype=D, requires_grad=True)
    target = torch.randn(4, 11, dtype=D)

    def loss():
        x, f = deform(xyz, feat, tfeat, bank, nets, 0.37)
        return ((torch.cat([x, f], 1) - target) ** 2).sum()

    params = [tfeat, bank.Z] + list(nets.parameters())
    assert grad_check(loss, params, n_samples=60) < 1e-3
