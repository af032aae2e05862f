"""Correspondence metrics, accuracy curves and corruption generators."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud, TriangleMesh, edge_graph, geodesic_matrix, surface_area
from .rbf import NeighborIndex

THRESHOLDS = np.linspace(0.0, 0.25, 101)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GroundTruth:
    correspondence: np.ndarray | None = None  # source vertex -> target vertex
    source_keypoints: dict | None = None  # label -> xyz
    target_keypoints: dict | None = None


@dataclass(frozen=True, eq=False)
class MetricReport:
    errors: np.ndarray
    mean: float
    thresholds: np.ndarray = field(default_factory=lambda: THRESHOLDS.copy())
    curve: np.ndarray = None
    protocol: str = "geodesic"

    def __post_init__(self):
        if self.curve is None:
            object.__setattr__(self, "curve", accuracy_curve(self.errors, self.thresholds))


def accuracy_curve(errors, thresholds=THRESHOLDS) -> np.ndarray:
    """Fraction of errors at or below each threshold."""
    e = np.sort(np.asarray(errors, dtype=np.float64))
    if len(e) == 0:
        return np.ones(len(thresholds))
    return np.searchsorted(e, thresholds, side="right") / len(e)


def make_report(errors, protocol="geodesic") -> MetricReport:
    e = np.asarray(errors, dtype=np.float64)
    return MetricReport(e, float(e.mean()) if len(e) else 0.0, protocol=protocol)


def _check_range(idx, n, what):
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise EvaluationError(f"{what} index out of range [0, {n})")
    return idx


def geodesic_error(predicted, gt, eval_mesh: TriangleMesh, present=None) -> MetricReport:
    """Per-source-vertex geodesic distance (on ``eval_mesh``) between the
    predicted and ground-truth images, over sqrt of the mesh area.

    ``predicted`` is a DenseMap or an index array; ``present`` optionally
    restricts evaluation to a subset of source vertices.
    """
    pred = getattr(predicted, "assignment", predicted)
    corr = gt.correspondence if isinstance(gt, GroundTruth) else gt
    n = eval_mesh.n_vertices
    pred = _check_range(pred, n, "predicted")
    corr = _check_range(corr, n, "ground-truth")
    if pred.shape != corr.shape:
        raise EvaluationError(f"map has {len(pred)} entries, ground truth {len(corr)}")
    keep = np.arange(len(pred)) if present is None else np.asarray(present, dtype=np.int64)
    p, g = pred[keep], corr[keep]
    sources, inv = np.unique(g, return_inverse=True)
    D = geodesic_matrix(eval_mesh, sources, graph=edge_graph(eval_mesh))
    d = D[inv, p]
    return make_report(d / np.sqrt(surface_area(eval_mesh)), "geodesic")


def nearest_vertex_map(points, mesh: TriangleMesh) -> np.ndarray:
    """Euclidean nearest mesh vertex per point, ties to the lower index."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EvaluationError("empty point cloud")
    return NeighborIndex(mesh.vertices).query(pts, 1)[:, 0]


def pc_error(predicted, gt, source_points, target_points, source_mesh: TriangleMesh,
             target_mesh: TriangleMesh, present=None) -> MetricReport:
    """Composite error for cloud maps: F_Y after the prediction against the
    ground truth after F_X, measured on the target mesh."""
    pred = getattr(predicted, "assignment", predicted)
    corr = gt.correspondence if isinstance(gt, GroundTruth) else gt
    fx = nearest_vertex_map(source_points, source_mesh)
    fy = nearest_vertex_map(target_points, target_mesh)
    pred = _check_range(pred, len(fy), "predicted")
    corr = _check_range(corr, target_mesh.n_vertices, "ground-truth")
    rep = geodesic_error(fy[pred], corr[fx], target_mesh, present)
    return MetricReport(rep.errors, rep.mean, protocol="pc")


def keypoint_error(predicted, source_points, target_points, source_keypoints: dict,
                   target_keypoints: dict, K: int = 32) -> MetricReport:
    """Neighbourhood vote: K source points around each keypoint are pushed
    through the map and snapped to their nearest target keypoint; the
    majority keypoint (ties: smallest mean snap distance) is compared with
    the ground-truth keypoint position."""
    pred = getattr(predicted, "assignment", predicted)
    src = np.asarray(source_points, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(target_points, dtype=np.float64).reshape(-1, 3)
    if K > len(src):
        raise EvaluationError(f"K={K} exceeds the {len(src)} source points")
    pred = _check_range(pred, len(tgt), "predicted")
    labels = sorted(source_keypoints)
    for lab in labels:
        if lab not in target_keypoints:
            raise EvaluationError(f"keypoint label {lab!r} missing from target")
    t_labels = sorted(target_keypoints)
    t_pos = np.array([target_keypoints[lab] for lab in t_labels], dtype=np.float64).reshape(-1, 3)
    src_index = NeighborIndex(src)
    kp_index = NeighborIndex(t_pos)
    errors = []
    for lab in labels:
        nbr = src_index.query(np.asarray(source_keypoints[lab]), K)[0]
        images = tgt[pred[nbr]]
        snap = kp_index.query(images, 1)[:, 0]
        dist = np.linalg.norm(images - t_pos[snap], axis=1)
        cand = np.unique(snap)
        counts = np.array([(snap == c).sum() for c in cand])
        means = np.array([dist[snap == c].mean() for c in cand])
        top = cand[counts == counts.max()]
        chosen = top[np.argmin(means[counts == counts.max()])]
        errors.append(np.linalg.norm(t_pos[chosen] - np.asarray(target_keypoints[lab], dtype=np.float64)))
    return make_report(errors, "keypoint")


def random_map_baseline(gt, eval_mesh: TriangleMesh, seed: int = 0, trials: int = 5) -> float:
    """Mean geodesic error of uniformly random assignments (brute force)."""
    corr = gt.correspondence if isinstance(gt, GroundTruth) else np.asarray(gt)
    rng = np.random.default_rng(seed)
    vals = [geodesic_error(rng.integers(0, eval_mesh.n_vertices, size=len(corr)), corr, eval_mesh).mean
            for _ in range(trials)]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Corruptions

SCENARIOS = ("noise", "outliers", "clutter", "partial")


def _check_fraction(fraction):
    if not 0.0 <= fraction <= 1.0:
        raise EvaluationError(f"fraction {fraction} outside [0, 1]")


def perturb(shape, scenario: str, seed: int = 0, std: float = 0.01, fraction: float = 0.2,
            center=None, radius: float | None = None, normal=None, offset: float = 0.0):
    """Corrupt a mesh or point set; returns (shape, kept) where ``kept[i]``
    is the original index of output point i, or -1 for appended clutter.

    Partial removal drops points inside the sphere (center, radius) if given,
    otherwise those with ``normal . x > offset``.
    """
    is_mesh = isinstance(shape, TriangleMesh)
    pts = shape.vertices if is_mesh else np.asarray(getattr(shape, "points", shape), dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    rng = np.random.default_rng(seed)
    kept = np.arange(n)
    if scenario == "noise":
        if std < 0:
            raise EvaluationError("noise std must be non-negative")
        out = pts + rng.normal(0.0, std, size=pts.shape) if std > 0 else pts.copy()
    elif scenario == "outliers":
        _check_fraction(fraction)
        out = pts.copy()
        sel = rng.choice(n, size=int(round(fraction * n)), replace=False)
        out[sel] += rng.normal(0.0, std, size=(len(sel), 3))
    elif scenario == "clutter":
        _check_fraction(fraction)
        if is_mesh:
            raise EvaluationError("clutter applies to point clouds")
        extra = rng.uniform(-1.0, 1.0, size=(int(round(fraction * n)), 3))
        out = np.concatenate([pts, extra])
        kept = np.concatenate([kept, -np.ones(len(extra), dtype=np.int64)])
    elif scenario == "partial":
        if radius is not None:
            c = np.zeros(3) if center is None else np.asarray(center, dtype=np.float64)
            drop = np.linalg.norm(pts - c, axis=1) < radius
        else:
            nrm = np.array([1.0, 0.0, 0.0]) if normal is None else np.asarray(normal, dtype=np.float64)
            drop = pts @ nrm > offset
        kept = np.nonzero(~drop)[0]
        out = pts[kept]
        if is_mesh:
            remap = -np.ones(n, dtype=np.int64)
            remap[kept] = np.arange(len(kept))
            faces = remap[shape.faces]
            faces = faces[(faces >= 0).all(axis=1)]
            return TriangleMesh(out, faces), kept
    else:
        raise EvaluationError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    if is_mesh:
        return TriangleMesh(out, shape.faces, shape.labels), kept
    return PointCloud(out), kept


# ---------------------------------------------------------------------------
# Report files

def write_report(report: MetricReport, path, extra: dict | None = None) -> dict:
    """JSON summary plus ``<stem>_curve.csv`` and ``<stem>_errors.txt`` beside it."""
    stem = os.path.splitext(str(path))[0]
    curve_path, err_path = stem + "_curve.csv", stem + "_errors.txt"
    write_curve(report, curve_path)
    np.savetxt(err_path, report.errors, fmt="%.17g")
    doc = {
        "protocol": report.protocol,
        "mean": report.mean,
        "n_points": int(len(report.errors)),
        "max": float(report.errors.max()) if len(report.errors) else 0.0,
        "errors_file": os.path.basename(err_path),
        "curve_file": os.path.basename(curve_path),
    }
    doc.update(extra or {})
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return doc


def write_curve(report: MetricReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("threshold", "fraction"))
        for t, f in zip(report.thresholds, report.curve):
            w.writerow((repr(float(t)), repr(float(f))))


def read_keypoints(path) -> dict:
    """``label x y z`` per line."""
    out = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 4:
                raise EvaluationError(f"{path}:{ln}: expected 'label x y z'")
            if parts[0] in out:
                raise EvaluationError(f"{path}:{ln}: duplicate keypoint label {parts[0]!r}")
            out[parts[0]] = np.array([float(v) for v in parts[1:]])
    return out
