import numpy as np
import pytest
import torch

from volcorr.geometry import icosphere
from volcorr.rbf import (NeighborIndex, RbfConditionError, RbfField, build_system, interpolate, kernel, knn)
from volcorr.sampling import build_volume_samples


def test_collocation_reproduces_data():
    rng = np.random.default_rng(0)
    P = rng.uniform(-1, 1, size=(8, 3))
    delta = rng.normal(size=8)
    sys_ = build_system(P, delta, 1e-2)
    for p, d in zip(P, delta):
        assert interpolate(sys_, p)[0] == pytest.approx(d, abs=1e-8)


def test_two_point_system_matches_cramer():
    P = np.array([[0.1, 0.2, 0.3], [0.5, -0.1, 0.0]])
    delta = np.array([0.03, -0.07])
    eps = 1e-2
    a = np.sqrt(eps)
    b = np.sqrt(eps + np.sum((P[0] - P[1]) ** 2))
    det = a * a - b * b
    c0 = (delta[0] * a - b * delta[1]) / det
    c1 = (a * delta[1] - delta[0] * b) / det
    got = build_system(P, delta, eps).coefficients
    np.testing.assert_allclose(got, [c0, c1], rtol=0, atol=1e-10)


def test_query_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    P = rng.uniform(-1, 1, size=(8, 3))
    sys_ = build_system(P, rng.normal(size=8) * 0.1, 1e-2)
    x = np.array([0.1, -0.2, 0.05])
    _, g = interpolate(sys_, x)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (interpolate(sys_, x + e)[0] - interpolate(sys_, x - e)[0]) / (2 * h)
        assert abs(fd - g[k]) <= 1e-6 * max(abs(g[k]), 1e-12)


def test_knn_matches_brute_force():
    rng = np.random.default_rng(2)
    P = rng.uniform(-1, 1, size=(500, 3))
    Q = rng.uniform(-1, 1, size=(1000, 3))
    got = NeighborIndex(P).query(Q, 8)
    d2 = ((Q[:, None, :] - P[None, :, :]) ** 2).sum(-1)
    ref = np.stack([np.lexsort((np.arange(len(P)), row))[:8] for row in d2])
    np.testing.assert_array_equal(got, ref)
    np.testing.assert_array_equal(knn(NeighborIndex(P), Q[0], 8), ref[0])


def test_knn_ties_to_lower_index():
    P = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, 0, 5.0]])
    np.testing.assert_array_equal(NeighborIndex(P).query(np.zeros(3), 3)[0], [0, 1, 2])


def test_coincident_points_named():
    P = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 0, 0]])
    with pytest.raises(RbfConditionError, match="0 and 2"):
        build_system(P, [0.0, 0.1, 0.0])


def test_kernel_symmetric():
    P = np.random.default_rng(3).normal(size=(5, 3))
    K = kernel(P, P, 1e-2)
    np.testing.assert_array_equal(K, K.T)
    np.testing.assert_allclose(np.diag(K), 0.1)


def test_field_estimates_sphere_sdf_and_gradient():
    m = icosphere(3, 0.5)
    vs = build_volume_samples(m, 4000, seed=0)
    field = RbfField(vs.points, vs.sdf, K=8)
    rng = np.random.default_rng(4)
    q = rng.normal(size=(200, 3))
    q = q / np.linalg.norm(q, axis=1, keepdims=True) * rng.uniform(0.47, 0.53, size=(200, 1))
    x = torch.from_numpy(q).requires_grad_(True)
    est, nbr = field(x)
    assert nbr.shape == (200, 8)
    err = np.abs(est.detach().numpy() - (np.linalg.norm(q, axis=1) - 0.5))
    assert err.mean() < 5e-3
    # autograd gradient agrees with the closed form on pinned neighbours
    est.sum().backward()
    for i in range(5):
        from volcorr.rbf import RbfSystem
        P = vs.points[nbr[i]]
        c = field.coefficients(nbr[i][None])[0]
        _, g = interpolate(RbfSystem(P, vs.sdf[nbr[i]], 1e-2, c), q[i])
        np.testing.assert_allclose(x.grad[i].numpy(), g, rtol=1e-10, atol=1e-12)
