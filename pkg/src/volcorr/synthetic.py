"""Smoothly deformed icospheres with known (identity) vertex correspondence."""
from __future__ import annotations

import numpy as np

from .geometry import TriangleMesh, icosphere, normalize_to_unit_sphere


def bend_stretch(vertices, stretch, bend, twist) -> np.ndarray:
    """Axis stretch, then quadratic bends along y, then a twist about y."""
    v = np.asarray(vertices, dtype=np.float64) * np.asarray(stretch)
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    x = x + bend[0] * y * y
    z = z + bend[1] * y * y
    ang = twist * y
    c, s = np.cos(ang), np.sin(ang)
    return np.stack([c * x + s * z, y, -s * x + c * z], axis=1)


def random_deformation(rng: np.random.Generator, strength: float = 1.0) -> dict:
    return {
        "stretch": 1.0 + strength * rng.uniform(-0.25, 0.3, size=3),
        "bend": strength * rng.uniform(-0.4, 0.4, size=2),
        "twist": float(strength * rng.uniform(-0.6, 0.6)),
    }


def deformed_family(n: int, seed: int = 0, subdivisions: int = 3, strength: float = 1.0):
    """Template plus ``n`` normalized deformed copies sharing its indexing."""
    template, _ = normalize_to_unit_sphere(icosphere(subdivisions))
    rng = np.random.default_rng(seed)
    shapes = []
    for _ in range(n):
        p = random_deformation(rng, strength)
        v = bend_stretch(template.vertices, p["stretch"], p["bend"], p["twist"])
        mesh, _ = normalize_to_unit_sphere(TriangleMesh(v, template.faces))
        shapes.append(mesh)
    return template, shapes
