import numpy as np
import pytest
import torch

from volcorr.config import NetConfig
from volcorr.nets import (HyperNet, MlpSpec, NonFiniteError, build_hypernets, deform_spec, dropout_masks,
                          flatten_params, grad_scalar_loss, init_mlp, mlp_forward, mlp_input_jacobian,
                          sdf_spec, unflatten_params)


def test_spec_invariants():
    cfg = NetConfig(hidden=16, hidden_layers=4)
    s, d = sdf_spec(cfg), deform_spec(cfg)
    assert s.layer_sizes == (3, 16, 16, 16, 16, 1) and s.activation == "sine"
    assert d.layer_sizes[-1] == 3 and d.activation == "relu"
    with pytest.raises(ValueError):
        MlpSpec((3,), "relu")
    assert s.n_params == sum(o * i + o for o, i in s.layer_shapes)


@pytest.mark.parametrize("act", ["sine", "relu"])
def test_input_jacobian_matches_finite_differences(act):
    spec = MlpSpec((3, 12, 12, 2), act, omega0=5.0)
    params = init_mlp(spec, seed=1)
    x = torch.randn(7, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    J = mlp_input_jacobian(params, spec, x)
    h = 1e-6
    for k in range(3):
        e = torch.zeros(3, dtype=torch.float64)
        e[k] = h
        fd = (mlp_forward(params, spec, x + e) - mlp_forward(params, spec, x - e)) / (2 * h)
        np.testing.assert_allclose(J[..., k].numpy(), fd.numpy(), rtol=1e-6, atol=1e-8)


def test_batched_params_match_loop():
    spec = MlpSpec((3, 8, 3), "relu")
    ps = [init_mlp(spec, seed=s) for s in range(3)]
    batched = [(torch.stack([p[k][0] for p in ps]), torch.stack([p[k][1] for p in ps])) for k in range(2)]
    x = torch.randn(3, 5, 3, dtype=torch.float64)
    y = mlp_forward(batched, spec, x)
    for b in range(3):
        torch.testing.assert_close(y[b], mlp_forward(ps[b], spec, x[b]), rtol=0, atol=1e-14)


def test_grad_scalar_loss_wrt_x():
    spec = MlpSpec((3, 6, 1), "sine", omega0=3.0)
    params = init_mlp(spec, seed=2)
    x = torch.rand(4, 3, dtype=torch.float64)
    val, grads, dx = grad_scalar_loss(params, spec, x, lambda y, J: y.sum() + (J ** 2).sum(), wrt_x=True)
    assert len(grads) == 2 and dx.shape == x.shape
    h = 1e-6
    xp = x.clone()
    xp[1, 2] += h
    xm = x.clone()
    xm[1, 2] -= h

    def f(z):
        y, J = mlp_forward(params, spec, z, jacobian=True)
        return float(y.sum() + (J ** 2).sum())
    assert float(dx[1, 2]) == pytest.approx((f(xp) - f(xm)) / (2 * h), rel=1e-6)
    with pytest.raises(NonFiniteError):
        grad_scalar_loss(params, spec, x, lambda y, J: y.sum() / 0.0)


def test_init_determinism_and_flatten():
    spec = MlpSpec((3, 8, 8, 1), "sine")
    a, b = init_mlp(spec, seed=4), init_mlp(spec, seed=4)
    for (W1, b1), (W2, b2) in zip(a, b):
        assert torch.equal(W1, W2) and torch.equal(b1, b2)
    flat = flatten_params(a)
    assert flat.shape == (spec.n_params,)
    back = unflatten_params(spec, flat)
    for (W1, b1), (W2, b2) in zip(a, back):
        assert torch.equal(W1, W2) and torch.equal(b1, b2)


def test_dropout_masks_scaled():
    spec = MlpSpec((3, 200, 200, 3), "relu", dropout_rate=0.2)
    masks = dropout_masks(spec, (4, 10), np.random.default_rng(0))
    assert len(masks) == 2 and masks[0].shape == (4, 10, 200)
    vals = set(np.unique(masks[0].numpy()).tolist())
    assert vals == {0.0, 1.25}
    assert dropout_masks(MlpSpec((3, 4, 3), "relu"), (2,), np.random.default_rng(0)) is None


def test_hypernet_shapes_and_near_identity_start():
    cfg = NetConfig(hidden=16, hidden_layers=2, latent_dim=8, hyper_hidden=16)
    hs, hd = build_hypernets(cfg, seed=0)
    alpha = torch.zeros(5, 8, dtype=torch.float64)
    theta = hs(alpha)
    assert [tuple(W.shape) for W, _ in theta] == [(5, o, i) for o, i in hs.target.layer_shapes]
    x = torch.rand(5, 30, 3, dtype=torch.float64) * 2 - 1
    disp = mlp_forward(hd(alpha), hd.target, x)
    assert disp.abs().max() < 0.1
    with pytest.raises(ValueError):
        hs(torch.zeros(3, dtype=torch.float64))


def test_hypernets_differ_and_are_seeded():
    cfg = NetConfig(hidden=8, hidden_layers=2, latent_dim=4, hyper_hidden=8)
    a1, _ = build_hypernets(cfg, 0)
    a2, _ = build_hypernets(cfg, 0)
    b1, _ = build_hypernets(cfg, 1)
    p1, p2, q1 = (torch.cat([p.flatten() for p in h.parameters()]) for h in (a1, a2, b1))
    assert torch.equal(p1, p2) and not torch.equal(p1, q1)
    assert isinstance(a1, HyperNet)
