import numpy as np
import pytest

from volcorr.geometry import (GeometryError, SignedDistanceOracle, TriangleMesh, box, edge_graph,
                              geodesic_distances, geodesic_matrix, icosphere, load_mesh, load_points,
                              normalize_to_unit_sphere, sample_surface, save_mesh, save_points,
                              signed_distance, surface_area, vertex_normals)


def _seg_dist(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t * ab))


def brute_unsigned(mesh, p):
    """Distance to a mesh by per-triangle plane projection or edge fallback."""
    best = np.inf
    for a, b, c in mesh.triangles():
        n = np.cross(b - a, c - a)
        n = n / np.linalg.norm(n)
        q = p - np.dot(p - a, n) * n
        # barycentric containment by Cramer's rule
        v0, v1, v2 = b - a, c - a, q - a
        d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
        d20, d21 = v2 @ v0, v2 @ v1
        den = d00 * d11 - d01 * d01
        v = (d11 * d20 - d01 * d21) / den
        w = (d00 * d21 - d01 * d20) / den
        if v >= 0 and w >= 0 and v + w <= 1:
            d = abs(np.dot(p - a, n))
        else:
            d = min(_seg_dist(p, a, b), _seg_dist(p, b, c), _seg_dist(p, c, a))
        best = min(best, d)
    return best


def test_box_sdf_values():
    m = box(0.5)
    assert signed_distance(m, [0, 0, 0]) == pytest.approx(-0.5, abs=1e-12)
    assert signed_distance(m, [1, 0, 0]) == pytest.approx(0.5, abs=1e-12)
    # corner region: distance to the vertex
    assert signed_distance(m, [1, 1, 1]) == pytest.approx(np.sqrt(3) * 0.5, abs=1e-12)


def test_sdf_matches_brute_force_on_random_queries():
    m = icosphere(1, 0.7)
    rng = np.random.default_rng(0)
    q = rng.uniform(-1, 1, size=(60, 3))
    got = SignedDistanceOracle(m).query(q, signed=False)
    ref = np.array([brute_unsigned(m, p) for p in q])
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_sdf_sign_inside_outside():
    m = icosphere(2, 0.5)
    d = SignedDistanceOracle(m).query(np.array([[0, 0, 0], [0, 0, 0.9]]))
    assert d[0] < 0 < d[1]


def test_orientation_reversal_flips_sign_exactly():
    m = icosphere(2, 0.5)
    q = np.random.default_rng(1).uniform(-0.8, 0.8, size=(300, 3))
    a = SignedDistanceOracle(m).query(q)
    b = SignedDistanceOracle(m.flipped()).query(q)
    np.testing.assert_array_equal(a, -b)


def test_mesh_validation():
    with pytest.raises(GeometryError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 5]])
    with pytest.raises(GeometryError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 1]])
    with pytest.raises(GeometryError):
        TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3)))


@pytest.mark.parametrize("ext", [".off", ".obj"])
def test_mesh_roundtrip(tmp_path, ext):
    m = icosphere(1)
    p = tmp_path / ("m" + ext)
    save_mesh(m, p)
    back = load_mesh(p)
    np.testing.assert_array_equal(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.faces, m.faces)


def test_malformed_off(tmp_path):
    p = tmp_path / "bad.off"
    p.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n")
    with pytest.raises(GeometryError):
        load_mesh(p)


def test_points_roundtrip(tmp_path):
    pts = np.random.default_rng(0).normal(size=(20, 3))
    save_points(pts, tmp_path / "c.xyz")
    np.testing.assert_array_equal(load_points(tmp_path / "c.xyz").points, pts)


def test_normalization():
    m = TriangleMesh(icosphere(1).vertices * 3 + 5, icosphere(1).faces)
    n, tf = normalize_to_unit_sphere(m)
    assert np.abs(n.vertices.mean(axis=0)).max() < 1e-12
    assert np.linalg.norm(n.vertices, axis=1).max() == pytest.approx(1.0)
    np.testing.assert_allclose(tf.invert(n.vertices), m.vertices, atol=1e-12)


def test_area_and_normals():
    assert surface_area(box(0.5)) == pytest.approx(6.0)
    sph = icosphere(3)
    nrm = vertex_normals(sph)
    np.testing.assert_allclose(np.linalg.norm(nrm, axis=1), 1.0, atol=1e-12)
    assert np.min(np.sum(nrm * sph.vertices, axis=1)) > 0.99


def test_sample_surface_on_mesh():
    m = icosphere(2)
    s = sample_surface(m, 500, seed=0)
    d = SignedDistanceOracle(m).query(s.points, signed=False)
    assert d.max() < 1e-12
    s2 = sample_surface(m, 500, seed=0)
    np.testing.assert_array_equal(s.points, s2.points)


def bellman_ford(n, edges, src):
    d = np.full(n, np.inf)
    d[src] = 0.0
    for _ in range(n - 1):
        for a, b, w in edges:
            if d[a] + w < d[b]:
                d[b] = d[a] + w
            if d[b] + w < d[a]:
                d[a] = d[b] + w
    return d


def test_geodesics_match_bellman_ford():
    m = icosphere(1)
    g = edge_graph(m).tocoo()
    edges = list(zip(g.row, g.col, g.data))
    D = geodesic_matrix(m, [0, 5, 17])
    for row, s in zip(D, [0, 5, 17]):
        np.testing.assert_allclose(row, bellman_ford(m.n_vertices, edges, s), rtol=0, atol=1e-12)
    f = geodesic_distances(m, 5)
    np.testing.assert_array_equal(f.distances, D[1])


def test_geodesic_source_out_of_range():
    with pytest.raises(GeometryError):
        geodesic_matrix(icosphere(0), [99])
