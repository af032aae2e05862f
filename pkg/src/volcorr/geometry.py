"""Triangle meshes, point clouds and the geometric primitives built on them.

Everything here works in float64.  Meshes are immutable after construction;
operations return new objects.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree


class GeometryError(ValueError):
    """Raised for malformed or degenerate geometric input."""


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        v = _frozen(self.vertices, np.float64).reshape(-1, 3)
        f = _frozen(self.faces, np.int64).reshape(-1, 3)
        if len(v) == 0:
            raise GeometryError("mesh has no vertices")
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                bad = int(f.max()) if f.max() >= len(v) else int(f.min())
                raise GeometryError(f"face index {bad} out of range for {len(v)} vertices")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise GeometryError("degenerate face with repeated vertex index")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.labels is not None:
            lab = _frozen(self.labels, np.int64)
            if len(lab) != len(v):
                raise GeometryError("labels must have one entry per vertex")
            object.__setattr__(self, "labels", lab)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def flipped(self) -> "TriangleMesh":
        """Same surface with every face orientation reversed."""
        return TriangleMesh(self.vertices, self.faces[:, ::-1], self.labels)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        p = _frozen(self.points, np.float64).reshape(-1, 3)
        if len(p) == 0:
            raise GeometryError("point cloud is empty")
        object.__setattr__(self, "points", p)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class SurfaceSamples:
    """On-surface points with unit normals.

    ``template_index[i]`` is the template surface sample that point ``i``
    corresponds to, or -1 when the correspondence is unknown.
    ``normals`` may be None for raw point clouds.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    template_index: np.ndarray | None = None

    def __post_init__(self):
        p = _frozen(self.points, np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", p)
        if self.normals is not None:
            n = _frozen(self.normals, np.float64).reshape(-1, 3)
            if len(n) != len(p):
                raise GeometryError("normals and points differ in length")
            if len(n) and np.max(np.abs(np.linalg.norm(n, axis=1) - 1.0)) > 1e-6:
                raise GeometryError("normals must be unit length")
            object.__setattr__(self, "normals", n)
        if self.template_index is not None:
            t = _frozen(self.template_index, np.int64)
            if len(t) != len(p):
                raise GeometryError("template_index and points differ in length")
            object.__setattr__(self, "template_index", t)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class NormalizeTransform:
    center: np.ndarray
    scale: float

    def apply(self, points):
        return (np.asarray(points, dtype=np.float64) - self.center) / self.scale

    def invert(self, points):
        return np.asarray(points, dtype=np.float64) * self.scale + self.center


@dataclass(frozen=True, eq=False)
class GeodesicField:
    source_vertex: int
    distances: np.ndarray = field(repr=False)


# ---------------------------------------------------------------------------
# I/O

def _mesh_format(path, fmt):
    if fmt is None:
        fmt = os.path.splitext(str(path))[1].lstrip(".")
    fmt = fmt.upper()
    if fmt not in ("OFF", "OBJ"):
        raise GeometryError(f"unsupported mesh format {fmt!r}")
    return fmt


def _parse_off(text):
    tokens = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.append(line.split())
    if not tokens:
        raise GeometryError("empty OFF file")
    head = tokens[0]
    if head[0].upper() != "OFF" and not head[0].upper().endswith("OFF"):
        raise GeometryError("missing OFF header")
    rest = tokens[1:]
    if len(head) > 1:
        rest = [head[1:]] + rest
    try:
        nv, nf = int(rest[0][0]), int(rest[0][1])
        verts = np.array([[float(x) for x in row[:3]] for row in rest[1:1 + nv]])
        faces = []
        for row in rest[1 + nv:1 + nv + nf]:
            k = int(row[0])
            idx = [int(x) for x in row[1:1 + k]]
            if len(idx) != k or k < 3:
                raise GeometryError("malformed OFF face")
            faces.extend([idx[0], idx[i], idx[i + 1]] for i in range(1, k - 1))
    except (IndexError, ValueError) as exc:
        raise GeometryError(f"malformed OFF file: {exc}") from exc
    if len(verts) != nv or len(rest) < 1 + nv + nf:
        raise GeometryError("OFF file truncated")
    return verts, np.array(faces, dtype=np.int64).reshape(-1, 3)


def _parse_obj(text):
    verts, faces = [], []
    try:
        for line in text.splitlines():
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                faces.extend([idx[0], idx[i], idx[i + 1]] for i in range(1, len(idx) - 1))
    except ValueError as exc:
        raise GeometryError(f"malformed OBJ file: {exc}") from exc
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def load_mesh(path, format: str | None = None) -> TriangleMesh:
    fmt = _mesh_format(path, format)
    with open(path) as fh:
        text = fh.read()
    verts, faces = _parse_off(text) if fmt == "OFF" else _parse_obj(text)
    if len(verts) == 0:
        raise GeometryError(f"{path}: mesh is empty")
    return TriangleMesh(verts, faces)


def save_mesh(mesh: TriangleMesh, path, format: str | None = None) -> None:
    fmt = _mesh_format(path, format)
    lines = []
    if fmt == "OFF":
        lines.append("OFF")
        lines.append(f"{mesh.n_vertices} {mesh.n_faces} 0")
        lines.extend(" ".join(repr(float(x)) for x in v) for v in mesh.vertices)
        lines.extend("3 " + " ".join(str(int(i)) for i in f) for f in mesh.faces)
    else:
        lines.extend("v " + " ".join(repr(float(x)) for x in v) for v in mesh.vertices)
        lines.extend("f " + " ".join(str(int(i) + 1) for i in f) for f in mesh.faces)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_points(path) -> PointCloud:
    """Read a cloud from ``.xyz``/``.txt``/``.pts`` (x y z per line) or a mesh's vertices."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".off", ".obj"):
        return PointCloud(load_mesh(path).vertices)
    try:
        data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise GeometryError(f"malformed point file {path}: {exc}") from exc
    if data.size == 0:
        raise GeometryError(f"{path}: point cloud is empty")
    if data.shape[1] < 3:
        raise GeometryError(f"{path}: expected 3 columns")
    return PointCloud(data[:, :3])


def save_points(points, path) -> None:
    np.savetxt(path, np.asarray(points, dtype=np.float64).reshape(-1, 3), fmt="%.17g")


# ---------------------------------------------------------------------------
# Basic measures

def face_normals(mesh: TriangleMesh, unit: bool = True) -> np.ndarray:
    tri = mesh.triangles()
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    if not unit:
        return n
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(norm > 0, n / np.where(norm > 0, norm, 1.0), 0.0)
    return out


def face_areas(mesh: TriangleMesh) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_normals(mesh, unit=False), axis=1)


def surface_area(mesh: TriangleMesh) -> float:
    return float(face_areas(mesh).sum())


def _corner_angles(mesh: TriangleMesh) -> np.ndarray:
    tri = mesh.triangles()
    angles = np.zeros((mesh.n_faces, 3))
    for k in range(3):
        u = tri[:, (k + 1) % 3] - tri[:, k]
        w = tri[:, (k + 2) % 3] - tri[:, k]
        cross = np.linalg.norm(np.cross(u, w), axis=1)
        angles[:, k] = np.arctan2(cross, np.einsum("ij,ij->i", u, w))
    return angles


def vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    """Angle-weighted vertex normals (unit length; isolated vertices get +z)."""
    acc = np.zeros((mesh.n_vertices, 3))
    fn = face_normals(mesh)
    ang = _corner_angles(mesh)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], ang[:, k, None] * fn)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    out = np.tile([0.0, 0.0, 1.0], (mesh.n_vertices, 1))
    ok = norm[:, 0] > 0
    out[ok] = acc[ok] / norm[ok]
    return out


def normalize_to_unit_sphere(mesh: TriangleMesh) -> tuple[TriangleMesh, NormalizeTransform]:
    center = mesh.vertices.mean(axis=0)
    scale = float(np.linalg.norm(mesh.vertices - center, axis=1).max())
    if not scale > 0:
        raise GeometryError("cannot normalize: all vertices coincide")
    tf = NormalizeTransform(center=center, scale=scale)
    return TriangleMesh(tf.apply(mesh.vertices), mesh.faces, mesh.labels), tf


# ---------------------------------------------------------------------------
# Surface sampling

def sample_barycentric(mesh: TriangleMesh, n: int, rng: np.random.Generator):
    """Area-weighted face choice plus uniform barycentric coordinates."""
    areas = face_areas(mesh)
    total = areas.sum()
    if not total > 0:
        raise GeometryError("mesh has zero surface area")
    fidx = rng.choice(mesh.n_faces, size=n, p=areas / total)
    r1 = rng.random(n)
    r2 = rng.random(n)
    s = np.sqrt(r1)
    bary = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
    return fidx, bary


def points_from_barycentric(mesh: TriangleMesh, fidx, bary) -> np.ndarray:
    tri = mesh.vertices[mesh.faces[fidx]]
    return np.einsum("nk,nkd->nd", bary, tri)


def sample_surface(mesh: TriangleMesh, n: int, seed: int) -> SurfaceSamples:
    rng = np.random.default_rng(seed)
    fidx, bary = sample_barycentric(mesh, n, rng)
    pts = points_from_barycentric(mesh, fidx, bary)
    return SurfaceSamples(pts, face_normals(mesh)[fidx])


# ---------------------------------------------------------------------------
# Signed distance oracle

def _closest_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to p, all (N, 3).

    Returns (closest, region) with region 0 = interior, 1/2/3 = vertex a/b/c,
    4/5/6 = edge ab/bc/ca.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    bp = p - b
    cp = p - c
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ca = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    region = np.select(conds, [1, 2, 4, 3, 6, 5], default=0)
    # degenerate triangles fall through to non-finite interior weights: snap to a
    region = np.where((region == 0) & ~np.isfinite(denom), 1, region)

    out = np.empty_like(p)
    m = region == 0
    v = (vb * denom)[m, None]
    w = (vc * denom)[m, None]
    out[m] = a[m] + ab[m] * v + ac[m] * w
    for r, base in ((1, a), (2, b), (3, c)):
        m = region == r
        out[m] = base[m]
    m = region == 4
    out[m] = a[m] + t_ab[m, None] * ab[m]
    m = region == 6
    out[m] = a[m] + t_ca[m, None] * ac[m]
    m = region == 5
    out[m] = b[m] + t_bc[m, None] * (c[m] - b[m])
    return out, region


class SignedDistanceOracle:
    """Exact distance to a triangle mesh, signed by angle-weighted pseudo-normals.

    Distances are computed on a canonical (sorted) vertex order of each face,
    so reversing face orientation flips the sign and leaves the magnitude
    bitwise unchanged.  Open meshes get a best-effort sign from whatever
    faces touch the closest feature.
    """

    def __init__(self, mesh: TriangleMesh):
        if mesh.n_faces == 0:
            raise GeometryError("signed distance needs at least one face")
        self.mesh = mesh
        V = mesh.vertices
        self._sorted = np.sort(mesh.faces, axis=1)
        fn = face_normals(mesh)
        self._face_normal = fn

        ang = _corner_angles(mesh)
        vn = np.zeros_like(V)
        for k in range(3):
            np.add.at(vn, mesh.faces[:, k], ang[:, k, None] * fn)
        self._vertex_normal = vn

        s = self._sorted
        edges = np.concatenate([s[:, [0, 1]], s[:, [1, 2]], s[:, [0, 2]]])
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        en = np.zeros((len(uniq), 3))
        np.add.at(en, inv, np.tile(fn, (3, 1)))
        self._edge_normal = en
        F = mesh.n_faces
        # face -> edge id for regions ab, bc, ca of the sorted triangle
        self._face_edges = np.stack([inv[:F], inv[F:2 * F], inv[2 * F:]], axis=1)

        tri = V[s]
        self._centroids = tri.mean(axis=1)
        self._radius = np.linalg.norm(tri - self._centroids[:, None], axis=2).max(axis=1)
        self._ctree = cKDTree(self._centroids)
        self._vtree = cKDTree(V)

    def _candidate_pairs(self, q):
        d_up, _ = self._vtree.query(q)
        rad = d_up + self._radius.max() + 1e-12
        lists = self._ctree.query_ball_point(q, rad, return_sorted=True)
        counts = np.fromiter((len(x) for x in lists), dtype=np.int64, count=len(lists))
        qi = np.repeat(np.arange(len(q)), counts)
        ti = np.fromiter((t for x in lists for t in x), dtype=np.int64, count=int(counts.sum()))
        return qi, ti

    def query(self, points, signed: bool = True, chunk: int = 200_000) -> np.ndarray:
        q = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        qi, ti = self._candidate_pairs(q)
        dist2 = np.empty(len(qi))
        closest = np.empty((len(qi), 3))
        region = np.empty(len(qi), dtype=np.int64)
        V = self.mesh.vertices
        for lo in range(0, len(qi), chunk):
            sl = slice(lo, lo + chunk)
            tri = self._sorted[ti[sl]]
            cp, rg = _closest_on_triangles(q[qi[sl]], V[tri[:, 0]], V[tri[:, 1]], V[tri[:, 2]])
            diff = q[qi[sl]] - cp
            dist2[sl] = np.einsum("ij,ij->i", diff, diff)
            closest[sl] = cp
            region[sl] = rg
        order = np.lexsort((ti, dist2, qi))
        first = np.ones(len(order), dtype=bool)
        first[1:] = qi[order][1:] != qi[order][:-1]
        best = order[first]
        dist = np.sqrt(dist2[best])
        if not signed:
            return dist
        t = ti[best]
        rg = region[best]
        normal = self._face_normal[t].copy()
        s = self._sorted[t]
        for r, k in ((1, 0), (2, 1), (3, 2)):
            m = rg == r
            normal[m] = self._vertex_normal[s[m, k]]
        for r, k in ((4, 0), (5, 1), (6, 2)):
            m = rg == r
            normal[m] = self._edge_normal[self._face_edges[t[m], k]]
        side = np.einsum("ij,ij->i", q - closest[best], normal)
        return np.where(side < 0, -dist, dist)


def signed_distance(mesh: TriangleMesh, query) -> float:
    return float(SignedDistanceOracle(mesh).query(np.asarray(query).reshape(1, 3))[0])


def signed_distances(mesh: TriangleMesh, queries) -> np.ndarray:
    return SignedDistanceOracle(mesh).query(queries)


# ---------------------------------------------------------------------------
# Geodesics on the edge graph

def edge_graph(mesh: TriangleMesh) -> sparse.csr_matrix:
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e = np.unique(np.sort(e, axis=1), axis=0)
    w = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    # csgraph drops explicit zeros; keep coincident vertices connected
    w = np.where(w > 0, w, np.finfo(np.float64).tiny)
    n = mesh.n_vertices
    return sparse.csr_matrix((w, (e[:, 0], e[:, 1])), shape=(n, n))


def geodesic_matrix(mesh: TriangleMesh, sources, graph=None) -> np.ndarray:
    """Rows of edge-graph shortest-path distances, one per source vertex."""
    sources = np.asarray(sources, dtype=np.int64).reshape(-1)
    if sources.size and (sources.min() < 0 or sources.max() >= mesh.n_vertices):
        raise GeometryError("geodesic source index out of range")
    g = edge_graph(mesh) if graph is None else graph
    return np.atleast_2d(dijkstra(g, directed=False, indices=sources))


def geodesic_distances(mesh: TriangleMesh, source: int) -> GeodesicField:
    if not 0 <= int(source) < mesh.n_vertices:
        raise GeometryError(f"source vertex {source} out of range")
    d = geodesic_matrix(mesh, [int(source)])[0]
    return GeodesicField(int(source), _frozen(d, np.float64))


# ---------------------------------------------------------------------------
# Procedural shapes

def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    """Geodesic sphere by repeated midpoint subdivision of an icosahedron."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
             [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
             [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    faces = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
             [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
             [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
             [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [list(np.asarray(v, float) / np.linalg.norm(v)) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = np.add(verts[i], verts[j]) / 2.0
                verts.append(list(m / np.linalg.norm(m)))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    return TriangleMesh(np.asarray(verts) * radius, np.asarray(faces))


def box(half: float = 0.5) -> TriangleMesh:
    """Axis-aligned cube [-half, half]^3 with outward-facing triangles."""
    v = np.array([[x, y, z] for x in (-half, half) for y in (-half, half) for z in (-half, half)])
    quads = [[0, 1, 3, 2], [4, 6, 7, 5], [0, 4, 5, 1], [2, 3, 7, 6], [0, 2, 6, 4], [1, 5, 7, 3]]
    faces = []
    for a, b, c, d in quads:
        faces += [[a, b, c], [a, c, d]]
    return TriangleMesh(v, faces)
