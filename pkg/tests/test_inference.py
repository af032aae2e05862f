import numpy as np
import pytest
import torch

from conftest import small_config, translation_state
from volcorr.config import RunConfig, apply_ablation
from volcorr.inference import (DenseMap, chamfer, chamfer_refine, correspond, deform_template, fit_latent,
                               load_dense_map, map_estimate, map_objective, save_dense_map)
from volcorr.training import fit, init_model


@pytest.fixture(scope="module")
def trained(family):
    template, recs = family
    cfg = small_config()
    # long enough that each latent actually encodes its shape
    cfg.train.epochs = 150
    state = init_model(recs, template, cfg)
    fit(state, recs, cfg)
    return state, recs


def _cfg(steps=50, lr=1e-2):
    c = RunConfig()
    c.infer.chamfer_steps = steps
    c.infer.map_steps = steps
    c.infer.learning_rate = lr
    return c


def test_deform_template_identity_and_determinism():
    pts = np.random.default_rng(0).normal(size=(9, 3))
    st = translation_state(pts)
    out = deform_template(st, torch.zeros(3, dtype=torch.float64))
    np.testing.assert_array_equal(out, pts)
    a = torch.tensor([0.1, 0.2, -0.3], dtype=torch.float64)
    np.testing.assert_array_equal(deform_template(st, a), deform_template(st, a))
    assert deform_template(st, a).shape == pts.shape


def test_chamfer_zero_when_sets_agree():
    pts = np.random.default_rng(1).normal(size=(12, 3))
    st = translation_state(pts)
    alpha = torch.zeros(3, dtype=torch.float64)
    res = chamfer_refine(st, alpha, pts, _cfg())
    assert res.initial == 0.0 and res.final == 0.0
    assert torch.equal(res.alpha, alpha)


def test_single_point_chamfer_reaches_target():
    t = np.array([[0.2, -0.1, 0.3]])
    s = np.array([[0.5, 0.1, -0.2]])
    st = translation_state(t)
    res = chamfer_refine(st, torch.zeros(3, dtype=torch.float64), s, _cfg(steps=2000, lr=1e-2))
    moved = deform_template(st, res.alpha)
    assert np.linalg.norm(moved - s) < 1e-3
    assert res.final <= res.initial
    assert res.final == min(res.trace)


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(7, 3)), rng.normal(size=(5, 3))
    d2 = ((a[:, None] - b[None]) ** 2).sum(-1)
    ref = d2.min(1).mean() + d2.min(0).mean()
    assert float(chamfer(torch.from_numpy(a), torch.from_numpy(b))) == pytest.approx(ref, rel=1e-14)


def brute_correspond(tx, ty, src, tgt):
    out = []
    for x in src:
        d = [np.sum((x - p) ** 2) for p in tx]
        k = min(range(len(d)), key=lambda i: (d[i], i))
        loc = ty[k]
        e = [np.sum((loc - y) ** 2) for y in tgt]
        out.append(min(range(len(e)), key=lambda i: (e[i], i)))
    return np.array(out)


def test_correspond_matches_brute_force_composition():
    rng = np.random.default_rng(3)
    tmpl = rng.normal(size=(5, 3))
    st = translation_state(tmpl)
    src, tgt = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    ax = torch.tensor([0.3, 0.0, -0.1], dtype=torch.float64)
    ay = torch.tensor([-0.2, 0.4, 0.0], dtype=torch.float64)
    dm = correspond(st, src, ax, tgt, ay)
    ref = brute_correspond(deform_template(st, ax), deform_template(st, ay), src, tgt)
    np.testing.assert_array_equal(dm.assignment, ref)


def test_self_map_is_identity():
    pts = np.random.default_rng(4).normal(size=(30, 3))
    st = translation_state(pts)
    a = torch.tensor([0.1, 0.1, 0.1], dtype=torch.float64)
    dm = correspond(st, pts + 0.1, a, pts + 0.1, a)
    np.testing.assert_array_equal(dm.assignment, np.arange(30))


def test_target_permutation_relabels():
    rng = np.random.default_rng(5)
    tmpl = rng.normal(size=(40, 3))
    st = translation_state(tmpl)
    src, tgt = rng.normal(size=(25, 3)), rng.normal(size=(30, 3))
    a0 = torch.zeros(3, dtype=torch.float64)
    perm = rng.permutation(30)
    base = correspond(st, src, a0, tgt, a0).assignment
    permuted = correspond(st, src, a0, tgt[perm], a0).assignment
    np.testing.assert_array_equal(perm[permuted], base)


def test_swapped_roles_are_inverse_on_bijection():
    rng = np.random.default_rng(6)
    tmpl = rng.normal(size=(20, 3))
    st = translation_state(tmpl)
    ax = torch.tensor([0.05, 0.0, 0.0], dtype=torch.float64)
    ay = torch.tensor([0.0, -0.05, 0.0], dtype=torch.float64)
    X = deform_template(st, ax)
    Y = deform_template(st, ay)[rng.permutation(20)]
    fwd = correspond(st, X, ax, Y, ay).assignment
    bwd = correspond(st, Y, ay, X, ax).assignment
    np.testing.assert_array_equal(bwd[fwd], np.arange(20))


def test_empty_sets_rejected():
    st = translation_state(np.zeros((2, 3)) + [[0, 0, 0], [1, 0, 0]])
    with pytest.raises(ValueError):
        correspond(st, np.zeros((0, 3)), torch.zeros(3), np.ones((3, 3)), torch.zeros(3))


def test_map_estimate_zero_steps_returns_init(trained):
    state, recs = trained
    cfg = RunConfig.from_dict(state.config.to_dict())
    cfg.infer.map_steps = 0
    init = torch.full((cfg.nets.latent_dim,), 0.01, dtype=torch.float64)
    res = map_estimate(state, recs[0], cfg, init)
    assert torch.equal(res.alpha, init)


def test_map_best_iterate_contract(trained):
    state, recs = trained
    res = map_estimate(state, recs[1])
    assert res.final <= res.initial and res.final == min(res.trace)
    obj = map_objective(state, recs[1])
    assert float(obj(res.alpha).detach()) == pytest.approx(res.final, rel=1e-12)


def test_map_warm_start_from_trained_latent(trained):
    state, recs = trained
    cfg = RunConfig.from_dict(state.config.to_dict())
    cfg.infer.latent_init = "zero"
    for rec in recs:
        obj = map_objective(state, rec)
        at_trained = float(obj(state.latents[rec.id].detach()).detach())
        cold = map_estimate(state, rec, cfg)
        assert at_trained <= cold.final, rec.id


def test_fit_latent_with_ablation_and_cloud(trained):
    from volcorr.sampling import cloud_record
    state, recs = trained
    cfg = apply_ablation(state.config, "te_wo_lsdr")
    alpha, info = fit_latent(state, recs[0], cfg)
    assert np.isfinite(list(info.values())).all()
    cloud = cloud_record(recs[0].surface.points, "c", cfg.sampling)
    alpha, info = fit_latent(state, cloud, state.config)
    assert info["map_final"] <= info["map_initial"] and info["chamfer_final"] <= info["chamfer_initial"]


def test_dense_map_roundtrip(tmp_path):
    dm = DenseMap("a", "b", np.array([2, 0, 1]), np.array([0.1, 0.2, 0.0]), {"map_initial": 3.0})
    save_dense_map(dm, tmp_path / "m.txt")
    back = load_dense_map(tmp_path / "m.txt")
    np.testing.assert_array_equal(back.assignment, dm.assignment)
    assert (back.source_id, back.target_id, back.info) == ("a", "b", {"map_initial": 3.0})
    assert (tmp_path / "m.txt").read_text() == "2\n0\n1\n"
