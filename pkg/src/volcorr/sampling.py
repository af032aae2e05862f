"""Shape and template volumes: near-surface samples with signed distances."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .config import SamplingConfig
from .geometry import (
    GeometryError,
    SignedDistanceOracle,
    SurfaceSamples,
    TriangleMesh,
    face_normals,
    points_from_barycentric,
    sample_barycentric,
    save_mesh,
    vertex_normals,
)
from .store import read_store, write_store


@dataclass(frozen=True, eq=False)
class VolumeSamples:
    points: np.ndarray
    sdf: np.ndarray
    zeta: float

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        s = np.array(self.sdf, dtype=np.float64).reshape(-1)
        if len(p) != len(s):
            raise GeometryError("volume points and sdf differ in length")
        if not self.zeta > 0:
            raise GeometryError("zeta must be positive")
        if len(s) and np.abs(s).max() >= self.zeta:
            raise GeometryError("volume sample outside the |sdf| < zeta band")
        p.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "sdf", s)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class ShapeRecord:
    """Everything the losses need about one shape.

    ``off_surface`` is a pool of points in [-1, 1]^3 outside the band.
    ``reliable_sdf`` is False for point clouds and corrupted inputs; such
    records skip the SDR term and the normal term at inference.
    ``surface_faces``/``surface_bary`` locate the non-vertex surface samples
    on the template so registered shapes can reuse them.
    """

    id: str
    surface: SurfaceSamples
    volume: VolumeSamples
    off_surface: np.ndarray
    source_mesh: TriangleMesh | None = None
    reliable_sdf: bool = True
    surface_faces: np.ndarray | None = None
    surface_bary: np.ndarray | None = None

    @property
    def is_cloud(self) -> bool:
        return self.source_mesh is None


def build_volume_samples(mesh: TriangleMesh, n: int, noise_stddevs=(0.05, 0.005),
                         zeta: float = 0.1, seed: int = 0, max_rounds: int = 50,
                         oracle: SignedDistanceOracle | None = None) -> VolumeSamples:
    """Displace surface samples by Gaussian noise at two scales, keep |sdf| < zeta.

    Half of the budget goes to each noise scale.  Raises GeometryError when
    fewer than 1% of candidates land in the band.
    """
    rng = np.random.default_rng(seed)
    oracle = oracle or SignedDistanceOracle(mesh)
    quotas = [n // 2, n - n // 2]
    pts_out, sdf_out = [], []
    tried = accepted = 0
    for std, quota in zip(noise_stddevs, quotas):
        got_p, got_s, have = [], [], 0
        rounds = 0
        while have < quota:
            if rounds >= max_rounds:
                raise GeometryError("volume sampling exhausted its retry budget")
            rounds += 1
            m = max(2 * (quota - have), 64)
            fidx, bary = sample_barycentric(mesh, m, rng)
            cand = points_from_barycentric(mesh, fidx, bary) + std * rng.standard_normal((m, 3))
            sdf = oracle.query(cand)
            keep = np.abs(sdf) < zeta
            tried += m
            accepted += int(keep.sum())
            if tried >= 1000 and accepted < 0.01 * tried:
                raise GeometryError(
                    f"rejection rate above 99% (noise {std} too large for zeta {zeta})")
            got_p.append(cand[keep])
            got_s.append(sdf[keep])
            have += int(keep.sum())
        pts_out.append(np.concatenate(got_p)[:quota])
        sdf_out.append(np.concatenate(got_s)[:quota])
    return VolumeSamples(np.concatenate(pts_out), np.concatenate(sdf_out), zeta)


def off_surface_pool(n: int, zeta: float, rng: np.random.Generator, distance_fn) -> np.ndarray:
    """Uniform points of [-1, 1]^3 whose |distance| to the surface is at least zeta."""
    out, have = [], 0
    for _ in range(1000):
        if have >= n:
            break
        cand = rng.uniform(-1.0, 1.0, size=(max(2 * (n - have), 64), 3))
        keep = np.abs(distance_fn(cand)) >= zeta
        out.append(cand[keep])
        have += int(keep.sum())
    else:
        raise GeometryError("could not draw off-surface points outside the band")
    return np.concatenate(out)[:n] if n else np.zeros((0, 3))


def read_correspondence(path) -> np.ndarray:
    """One 0-based template index per line; line i is the image of shape vertex i."""
    with open(path) as fh:
        rows = [ln.strip() for ln in fh if ln.strip()]
    try:
        return np.array([int(r) for r in rows], dtype=np.int64)
    except ValueError as exc:
        raise GeometryError(f"malformed correspondence file {path}: {exc}") from exc


def build_shape_record(mesh: TriangleMesh, template: ShapeRecord | None,
                       config: SamplingConfig | None = None, seed: int = 0,
                       shape_id: str = "shape",
                       correspondence: np.ndarray | None = None) -> ShapeRecord:
    """Sample surface, volume and off-surface sets for a normalized mesh.

    Surface samples are the mesh vertices (angle-weighted normals) followed by
    ``n_surface`` area-weighted samples.  With ``template=None`` the mesh is the
    template itself and ``template_index`` is the identity.  A registered
    shape (same vertex count and faces as the template) reuses the template's
    barycentric samples, so the identity map holds throughout.  With an
    explicit ``correspondence`` only the vertex part is supervised; the rest
    are marked -1.
    """
    cfg = config or SamplingConfig()
    rng = np.random.default_rng(seed)
    V = mesh.n_vertices
    vn = vertex_normals(mesh)
    fn = face_normals(mesh)

    if template is None:
        fidx, bary = sample_barycentric(mesh, cfg.n_surface, rng)
        tindex = np.arange(V + cfg.n_surface)
    else:
        tmesh = template.source_mesh
        registered = (
            correspondence is None and tmesh is not None and tmesh.n_vertices == V
            and tmesh.n_faces == mesh.n_faces and np.array_equal(tmesh.faces, mesh.faces)
        )
        if registered:
            fidx, bary = template.surface_faces, template.surface_bary
            tindex = np.arange(V + len(fidx))
        else:
            if correspondence is None:
                if tmesh is not None and tmesh.n_vertices == V:
                    correspondence = np.arange(V)
                else:
                    raise GeometryError(
                        f"{shape_id}: vertex count {V} differs from template "
                        f"and no correspondence file was given")
            correspondence = np.asarray(correspondence, dtype=np.int64)
            if len(correspondence) != V:
                raise GeometryError(f"{shape_id}: correspondence has {len(correspondence)} "
                                    f"entries for {V} vertices")
            n_tmpl = len(template.surface)
            if correspondence.size and (correspondence.min() < 0 or correspondence.max() >= n_tmpl):
                raise GeometryError(f"{shape_id}: correspondence index out of range")
            fidx, bary = sample_barycentric(mesh, cfg.n_surface, rng)
            tindex = np.concatenate([correspondence, -np.ones(cfg.n_surface, dtype=np.int64)])

    pts = np.concatenate([mesh.vertices, points_from_barycentric(mesh, fidx, bary)])
    normals = np.concatenate([vn, fn[fidx]])
    surface = SurfaceSamples(pts, normals, tindex)

    oracle = SignedDistanceOracle(mesh)
    volume = build_volume_samples(mesh, cfg.n_volume, cfg.noise_stddevs, cfg.zeta,
                                  seed=int(rng.integers(2**31)), max_rounds=cfg.max_rounds,
                                  oracle=oracle)
    off = off_surface_pool(cfg.n_off_surface, cfg.zeta, rng, oracle.query)
    return ShapeRecord(shape_id, surface, volume, off, mesh, True,
                       np.asarray(fidx, dtype=np.int64), np.asarray(bary, dtype=np.float64))


def cloud_record(points, shape_id: str = "cloud", config: SamplingConfig | None = None,
                 seed: int = 0) -> ShapeRecord:
    """Record for a raw point cloud: every point is on the surface with sdf 0."""
    cfg = config or SamplingConfig()
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise GeometryError("point cloud is empty")
    tree = cKDTree(pts)
    rng = np.random.default_rng(seed)
    off = off_surface_pool(cfg.n_off_surface, cfg.zeta, rng, lambda q: tree.query(q)[0])
    return ShapeRecord(shape_id, SurfaceSamples(pts), VolumeSamples(pts, np.zeros(len(pts)), cfg.zeta),
                       off, None, False)


# ---------------------------------------------------------------------------
# Persistence

def _record_arrays(rec: ShapeRecord, prefix: str = "") -> dict:
    arrays = {
        prefix + "surface_points": rec.surface.points,
        prefix + "volume_points": rec.volume.points,
        prefix + "volume_sdf": rec.volume.sdf,
        prefix + "off_surface": rec.off_surface,
    }
    if rec.surface.normals is not None:
        arrays[prefix + "surface_normals"] = rec.surface.normals
    if rec.surface.template_index is not None:
        arrays[prefix + "template_index"] = rec.surface.template_index
    if rec.source_mesh is not None:
        arrays[prefix + "mesh_vertices"] = rec.source_mesh.vertices
        arrays[prefix + "mesh_faces"] = rec.source_mesh.faces
    if rec.surface_faces is not None:
        arrays[prefix + "surface_faces"] = rec.surface_faces
        arrays[prefix + "surface_bary"] = rec.surface_bary
    return arrays


def _record_meta(rec: ShapeRecord) -> dict:
    return {"id": rec.id, "zeta": rec.volume.zeta, "reliable_sdf": rec.reliable_sdf}


def _record_from(arrays: dict, meta: dict, prefix: str = "") -> ShapeRecord:
    g = lambda k: arrays.get(prefix + k)  # noqa: E731
    mesh = None
    if g("mesh_vertices") is not None:
        mesh = TriangleMesh(g("mesh_vertices"), g("mesh_faces"))
    return ShapeRecord(
        meta["id"],
        SurfaceSamples(g("surface_points"), g("surface_normals"), g("template_index")),
        VolumeSamples(g("volume_points"), g("volume_sdf"), meta["zeta"]),
        g("off_surface"),
        mesh,
        bool(meta["reliable_sdf"]),
        g("surface_faces"),
        g("surface_bary"),
    )


def save_record(rec: ShapeRecord, path, extra_meta: dict | None = None) -> None:
    meta = _record_meta(rec)
    meta.update(extra_meta or {})
    write_store(path, _record_arrays(rec), meta)
    if rec.source_mesh is not None:
        save_mesh(rec.source_mesh, os.path.join(path, "mesh.off"))


def load_record(path) -> ShapeRecord:
    arrays, meta = read_store(path)
    return _record_from(arrays, meta)
