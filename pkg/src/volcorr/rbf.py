"""Shifted-multiquadric RBF interpolation of signed distances.

A query point's signed distance is estimated from its K nearest volume
samples: solve ``Phi c = Delta`` with ``Phi_ij = sqrt(eps0 + |p_i - p_j|^2)``
and evaluate ``sum_j c_j sqrt(eps0 + |x - p_j|^2)``.  Which neighbours are
chosen is piecewise constant; gradients flow only through the kernel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import torch
from scipy.spatial import cKDTree



class RbfConditionError(ArithmeticError):
    pass


class NeighborIndex:
    """K-nearest-neighbour queries over a fixed point set (ties to lower index)."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("neighbor index needs at least one point")
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def query(self, queries, K: int) -> np.ndarray:
        """Indices of shape (M, min(K, n)), nearest first."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        k = min(int(K), n)
        extra = min(n, k + 4)
        _, idx = self._tree.query(q, k=extra)
        idx = idx.reshape(len(q), extra)
        # re-rank with exact float64 distances so ties resolve by index
        diff = self.points[idx] - q[:, None, :]
        d2 = np.einsum("mkd,mkd->mk", diff, diff)
        order = np.lexsort((idx, d2), axis=-1)
        return np.take_along_axis(idx, order, axis=1)[:, :k]


def knn(index: NeighborIndex, query, K: int) -> np.ndarray:
    return index.query(np.asarray(query).reshape(1, 3), K)[0]


def kernel(a, b, epsilon0: float):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = a[..., :, None, :] - b[..., None, :, :]
    return np.sqrt(epsilon0 + np.einsum("...ijd,...ijd->...ij", d, d))


@dataclass(frozen=True, eq=False)
class RbfSystem:
    neighbor_points: np.ndarray
    neighbor_sdf: np.ndarray
    epsilon0: float
    coefficients: np.ndarray


def _check_distinct(points, scale_tol=1e-10):
    P = np.asarray(points)
    d = np.linalg.norm(P[..., :, None, :] - P[..., None, :, :], axis=-1)
    K = P.shape[-2]
    d = d + np.where(np.eye(K, dtype=bool), np.inf, 0.0)
    bad = np.argwhere(d <= scale_tol)
    return bad


def build_system(points, sdf, epsilon0: float = 1e-2) -> RbfSystem:
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    delta = np.asarray(sdf, dtype=np.float64).reshape(-1)
    if len(P) == 0 or len(P) != len(delta):
        raise ValueError("need matching, non-empty neighbour points and values")
    if not epsilon0 > 0:
        raise ValueError("epsilon0 must be positive")
    bad = _check_distinct(P)
    if len(bad):
        i, j = sorted(bad[0])
        raise RbfConditionError(f"neighbour points {i} and {j} coincide; kernel matrix is singular")
    Phi = kernel(P, P, epsilon0)
    c = scipy.linalg.solve(Phi, delta, assume_a="gen")
    _check_residual(Phi, c, delta)
    return RbfSystem(P, delta, float(epsilon0), c)


def _check_residual(Phi, c, delta, where=""):
    res = np.linalg.norm(np.einsum("...ij,...j->...i", Phi, c) - delta, axis=-1)
    tol = 1e-8 * np.linalg.norm(delta, axis=-1) + 1e-300
    bad = np.nonzero(np.atleast_1d(res > tol))[0]
    if len(bad):
        raise RbfConditionError(
            f"RBF system{where} {int(bad[0])} is ill-conditioned "
            f"(residual {float(np.atleast_1d(res)[bad[0]]):.3e})")


def interpolate(system: RbfSystem, query):
    """Estimated signed distance at ``query`` and its exact gradient."""
    x = np.asarray(query, dtype=np.float64).reshape(3)
    diff = x - system.neighbor_points
    r = np.sqrt(system.epsilon0 + np.einsum("kd,kd->k", diff, diff))
    value = float(r @ system.coefficients)
    grad = (system.coefficients / r) @ diff
    return value, grad


class RbfField:
    """Batched, differentiable SDF estimate against one shape's volume samples."""

    def __init__(self, points, sdf, K: int = 8, epsilon0: float = 1e-2, check: bool = True):
        self.index = NeighborIndex(points)
        self.sdf = np.asarray(sdf, dtype=np.float64).reshape(-1)
        self.K = int(K)
        self.epsilon0 = float(epsilon0)
        self.check = check
        self._points_t = torch.from_numpy(self.index.points.copy())

    def neighbors(self, queries) -> np.ndarray:
        return self.index.query(queries, self.K)

    def coefficients(self, nbr: np.ndarray) -> np.ndarray:
        P = self.index.points[nbr]
        delta = self.sdf[nbr]
        Phi = kernel(P, P, self.epsilon0)
        try:
            c = np.linalg.solve(Phi, delta[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise RbfConditionError(f"singular RBF system: {exc}") from exc
        if self.check:
            _check_residual(Phi, c, delta, where=" for query")
        return c

    def __call__(self, x, nbr: np.ndarray | None = None):
        """Estimate at points ``x`` (torch, (M, 3)); returns (values, neighbours used)."""
        if nbr is None:
            nbr = self.neighbors(x.detach().cpu().numpy())
        c = torch.from_numpy(self.coefficients(nbr))
        P = self._points_t[torch.from_numpy(nbr)]
        diff = x.unsqueeze(-2) - P
        r = torch.sqrt(self.epsilon0 + (diff * diff).sum(-1))
        return (r * c).sum(-1), nbr
