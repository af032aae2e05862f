import math

import numpy as np
import pytest
import torch

from volcorr.config import TERMS, LossConfig, LossWeights
from volcorr.losses import (det3, draw_term_batch, e_train, evaluate_terms, field_for, l_sdf, l_sdr, l_smooth,
                            l_surf, l_vol, psi)
from volcorr.nets import NonFiniteError, build_hypernets

T = torch.float64


def test_surf_zero_on_alignment():
    x = torch.rand(10, 3, dtype=T)
    assert float(l_surf(x, x)) == 0.0
    assert float(l_surf(x, x + torch.tensor([3.0, 4.0, 0.0], dtype=T))) == pytest.approx(5.0)


def test_smooth_zero_for_constant_displacement():
    assert float(l_smooth(torch.zeros(6, 3, 3, dtype=T))) == 0.0
    J = torch.eye(3, dtype=T).expand(4, 3, 3)
    assert float(l_smooth(J)) == pytest.approx(math.sqrt(3))


def test_vol_rigid_and_scaled():
    th = 0.7
    R = torch.tensor([[math.cos(th), -math.sin(th), 0], [math.sin(th), math.cos(th), 0], [0, 0, 1]], dtype=T)
    J = (R - torch.eye(3, dtype=T)).expand(5, 3, 3)
    assert float(l_vol(J)) == pytest.approx(0.0, abs=1e-15)
    J2 = torch.eye(3, dtype=T).expand(5, 3, 3)  # full map 2x
    assert float(l_vol(J2)) == 7.0
    assert float(l_vol(2 * torch.eye(3, dtype=T).expand(2, 3, 3), literal=True)) == 7.0


def test_det3_matches_numpy():
    M = torch.randn(20, 3, 3, dtype=T)
    np.testing.assert_allclose(det3(M).numpy(), np.linalg.det(M.numpy()), rtol=1e-12, atol=1e-12)


def test_sdr_clamps():
    a = torch.tensor([0.5, -0.02], dtype=T)
    b = torch.tensor([0.3, -0.02], dtype=T)
    assert float(l_sdr(a, b, 0.1)) == 0.0
    assert float(l_sdr(torch.tensor([0.05], dtype=T), torch.tensor([-0.5], dtype=T), 0.1)) == pytest.approx(0.15)


def test_eikonal_zero_on_linear_field():
    u = torch.tensor([0.6, 0.0, 0.8], dtype=T)
    x = torch.rand(30, 3, dtype=T)
    f = x @ u
    g = u.expand(30, 3)
    assert float(l_sdf(f, g, f)) == 0.0


def test_psi_values():
    assert float(psi(torch.tensor(0.0, dtype=T), 100.0)) == 1.0
    assert abs(float(psi(torch.tensor(0.1, dtype=T), 100.0)) - math.exp(-10)) < 1e-12


def test_e_train_mask():
    vals = {t: torch.tensor(1.0, dtype=T) for t in TERMS}
    w = LossWeights()
    assert float(e_train(vals, w)) == 1 + 500 + 50 + 5 + 20
    w.mask = {t: t != "surf" for t in TERMS}
    assert float(e_train(vals, w)) == 1 + 50 + 5 + 20
    assert not w.enabled("surf")


def _setup(family, cfg):
    template, recs = family
    hs, hd = build_hypernets(cfg.nets, 0)
    fields = [field_for(r, cfg.loss) for r in recs[:2]]
    batch = draw_term_batch(recs[:2], template, cfg.loss, fields, np.random.default_rng(0))
    alphas = torch.zeros(2, cfg.nets.latent_dim, dtype=T, requires_grad=True)
    return hs, hd, batch, alphas


def test_evaluate_terms_finite_and_weighted(family, cfg):
    hs, hd, batch, alphas = _setup(family, cfg)
    total, vals = evaluate_terms(hs, hd, alphas, batch, cfg.loss, cfg.weights)
    assert set(vals) == set(TERMS)
    ref = sum(cfg.weights.weight(t) * float(vals[t].detach()) for t in TERMS)
    assert float(total.detach()) == pytest.approx(ref, rel=1e-14)
    total.backward()
    assert torch.isfinite(alphas.grad).all()


def test_evaluate_terms_skips_disabled(family, cfg):
    hs, hd, batch, alphas = _setup(family, cfg)
    w = LossWeights()
    w.mask = {t: t == "sdf" for t in TERMS}
    _, vals = evaluate_terms(hs, None, alphas, batch, cfg.loss, w)
    assert set(vals) == {"sdf"}


def test_sdr_skipped_for_clouds(family, cfg):
    from volcorr.sampling import cloud_record
    template, recs = family
    hs, hd = build_hypernets(cfg.nets, 0)
    cloud = cloud_record(recs[0].surface.points, "c", cfg.sampling)
    batch = draw_term_batch([cloud], template, cfg.loss, [field_for(cloud, cfg.loss)], np.random.default_rng(0))
    assert not batch.normal_ok[0] and not batch.sdr_ok[0] and not batch.surf_ok[0]
    _, vals = evaluate_terms(hs, hd, torch.zeros(1, cfg.nets.latent_dim, dtype=T), batch, cfg.loss, cfg.weights)
    assert float(vals["sdr"].detach()) == 0.0 and float(vals["surf"].detach()) == 0.0


def test_nonfinite_term_is_named(family, cfg):
    hs, hd, batch, alphas = _setup(family, cfg)
    batch.sdf_sigma = batch.sdf_sigma * float("nan")
    with pytest.raises(NonFiniteError, match="sdf"):
        evaluate_terms(hs, hd, alphas, batch, cfg.loss, cfg.weights)


def test_loss_config_defaults():
    c = LossConfig()
    assert (c.eta, c.C, c.rbf_k, c.epsilon0) == (0.1, 100.0, 8, 1e-2)
