"""Command-line entry points: preprocess, train, match, eval, perturb, gradcheck, synth.

Exit codes: 0 success, 1 validation or usage error, 2 numerical failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import shutil
import sys

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, apply_ablation
from .evaluation import (EvaluationError, GroundTruth, SCENARIOS, geodesic_error, keypoint_error, pc_error,
                         perturb, read_keypoints, write_report)
from .geometry import (GeometryError, NormalizeTransform, TriangleMesh, load_mesh, load_points,
                       normalize_to_unit_sphere, save_mesh, save_points)
from .nets import NonFiniteError
from .rbf import RbfConditionError
from .sampling import build_shape_record, cloud_record, load_record, read_correspondence, save_record
from .store import StoreError
from .training import CheckpointError, fit, init_model, load_checkpoint

log = logging.getLogger("volcorr")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
MESH_EXT = (".off", ".obj")


class UsageError(Exception):
    pass


def _load_config(path, base: RunConfig | None = None) -> RunConfig:
    if path:
        return RunConfig.load(path)
    return base if base is not None else RunConfig()


def _prepare_out(path, force: bool, is_dir: bool = True):
    if os.path.exists(path):
        if not force:
            raise UsageError(f"{path} exists; pass --force to overwrite")
        if os.path.isdir(path) and is_dir:
            shutil.rmtree(path)
    if is_dir:
        os.makedirs(path, exist_ok=True)
    else:
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _provenance(cfg: RunConfig, command: str, args: dict) -> dict:
    return {"tool": "volcorr", "version": __version__, "command": command,
            "arguments": {k: v for k, v in args.items() if k not in ("func",)},
            "config": cfg.to_dict()}


def normalize_points(points):
    pts = np.asarray(points, dtype=np.float64)
    center = pts.mean(axis=0)
    scale = float(np.linalg.norm(pts - center, axis=1).max())
    if not scale > 0:
        raise GeometryError("point cloud has zero extent")
    t = NormalizeTransform(center, scale)
    return t.apply(pts), t


def _shape_files(directory):
    files = []
    for ext in MESH_EXT:
        files.extend(glob.glob(os.path.join(directory, "*" + ext)))
    return sorted(files)


# ---------------------------------------------------------------------------
# preprocess

def cmd_preprocess(args) -> int:
    if not args.template or not os.path.isfile(args.template):
        raise UsageError(f"template mesh {args.template!r} not found")
    if not os.path.isdir(args.mesh_dir):
        raise UsageError(f"mesh directory {args.mesh_dir!r} not found")
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    files = [f for f in _shape_files(args.mesh_dir) if os.path.abspath(f) != os.path.abspath(args.template)]
    _prepare_out(args.out, args.force)
    tmesh, _ = normalize_to_unit_sphere(load_mesh(args.template))
    template = build_shape_record(tmesh, None, cfg.sampling, seed=cfg.seed, shape_id="template")
    save_record(template, os.path.join(args.out, "template"))
    stats = {"template": _band_stats(template)}
    ids = []
    for i, path in enumerate(files):
        sid = os.path.splitext(os.path.basename(path))[0]
        mesh, _ = normalize_to_unit_sphere(load_mesh(path))
        corr_path = os.path.splitext(path)[0] + ".corr"
        corr = read_correspondence(corr_path) if os.path.exists(corr_path) else None
        rec = build_shape_record(mesh, template, cfg.sampling, seed=cfg.seed + i + 1, shape_id=sid,
                                 correspondence=corr)
        save_record(rec, os.path.join(args.out, "records", sid))
        stats[sid] = _band_stats(rec)
        ids.append(sid)
        log.info("preprocessed %s", sid)
    summary = _provenance(cfg, "preprocess", vars(args))
    summary.update({"n_shapes": len(ids), "n_records": len(ids) + 1, "shape_ids": ids, "band_stats": stats})
    _dump(summary, os.path.join(args.out, "summary.json"))
    print(f"preprocessed {len(ids)} shapes plus template into {args.out}")
    return EXIT_OK


def _band_stats(rec) -> dict:
    s = rec.volume.sdf
    return {"n_volume": int(len(s)), "n_surface": int(len(rec.surface)), "sdf_min": float(s.min()),
            "sdf_max": float(s.max()), "sdf_mean_abs": float(np.abs(s).mean()),
            "inside_fraction": float((s < 0).mean())}


def load_dataset(data_dir):
    template = load_record(os.path.join(data_dir, "template"))
    rec_dirs = sorted(glob.glob(os.path.join(data_dir, "records", "*")))
    records = [load_record(d) for d in rec_dirs]
    if not records:
        raise UsageError(f"no shape records under {data_dir}/records")
    return template, records


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    from .plotting import plot_history
    from .training import write_history

    cfg = _load_config(args.config)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.ablation:
        cfg = apply_ablation(cfg, args.ablation)
    template, records = load_dataset(args.data)
    _prepare_out(args.out, args.force)
    _dump(_provenance(cfg, "train", vars(args)), os.path.join(args.out, "run.json"))
    state = init_model(records, template, cfg)

    def progress(row):
        log.info("step %d epoch %d total %.6g", row["step"], row["epoch"], row["total"])

    try:
        fit(state, records, cfg, checkpoint_dir=args.out, progress=progress)
    finally:
        if state.history:
            write_history(state.history, os.path.join(args.out, "history.csv"))
            plot_history(state.history, os.path.join(args.out, "history.png"))
    last = state.history[-1] if state.history else {"total": float("nan")}
    print(f"trained {state.step} steps over {state.epoch} epochs; final total {last['total']:.6g}")
    return EXIT_OK


def resolve_checkpoint(path) -> str:
    if os.path.isfile(os.path.join(path, "manifest.json")):
        return path
    cands = sorted(glob.glob(os.path.join(path, "epoch_*")))
    if not cands:
        raise StoreError(f"no checkpoint found at {path}")
    return cands[-1]


# ---------------------------------------------------------------------------
# match

def shape_from_file(path, shape_id, cfg: RunConfig, seed: int):
    """Record for a mesh file, point file, or preprocessed record directory."""
    if os.path.isdir(path):
        return load_record(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such shape file: {path}")
    if os.path.splitext(path)[1].lower() in MESH_EXT:
        mesh, _ = normalize_to_unit_sphere(load_mesh(path))
        return build_shape_record(mesh, None, cfg.sampling, seed=seed, shape_id=shape_id)
    pts, _ = normalize_points(load_points(path).points)
    return cloud_record(pts, shape_id, cfg.sampling, seed=seed)


def cmd_match(args) -> int:
    from .inference import correspond, fit_latent, save_dense_map, shape_points

    for p in (args.source, args.target):
        if not os.path.exists(p):
            raise FileNotFoundError(f"no such shape file: {p}")
    ckpt = resolve_checkpoint(args.ckpt)
    state = load_checkpoint(ckpt, RunConfig.load(args.config) if args.config else None)
    cfg = state.config
    if os.path.exists(args.out) and not args.force:
        raise UsageError(f"{args.out} exists; pass --force to overwrite")
    src = shape_from_file(args.source, _stem(args.source), cfg, cfg.infer.seed)
    tgt = shape_from_file(args.target, _stem(args.target), cfg, cfg.infer.seed)
    ax, info_x = fit_latent(state, src, cfg)
    ay, info_y = fit_latent(state, tgt, cfg)
    dm = correspond(state, shape_points(src), ax, shape_points(tgt), ay, src.id, tgt.id)
    dm.info.update({"source": info_x, "target": info_y})
    _prepare_out(args.out, True, is_dir=False)
    extra = _provenance(cfg, "match", vars(args))
    extra["checkpoint"] = ckpt
    save_dense_map(dm, args.out, extra)
    print(f"wrote {len(dm)} correspondences to {args.out}")
    return EXIT_OK


def _stem(path):
    return os.path.splitext(os.path.basename(os.path.normpath(path)))[0]


# ---------------------------------------------------------------------------
# eval

def _read_index_file(path):
    return np.loadtxt(path, dtype=np.int64, ndmin=1)


def cmd_eval(args) -> int:
    from .inference import load_dense_map
    from .plotting import plot_accuracy_curve

    if args.protocol == "keypoint":
        missing = [n for n in ("source_keypoints", "target_keypoints", "source_points", "target_points")
                   if getattr(args, n) is None]
        if missing:
            raise UsageError("protocol keypoint needs " + ", ".join("--" + m.replace("_", "-") for m in missing))
    elif args.gt is None or args.mesh is None:
        raise UsageError(f"protocol {args.protocol} needs --gt and --mesh")
    if args.protocol == "pc" and (args.source_points is None or args.target_points is None
                                  or args.source_mesh is None):
        raise UsageError("protocol pc needs --source-points, --target-points and --source-mesh")
    if os.path.exists(args.out) and not args.force:
        raise UsageError(f"{args.out} exists; pass --force to overwrite")
    dm = load_dense_map(args.map)
    pred = dm.assignment
    rows = np.arange(len(pred))
    kept = None
    if args.source_kept:
        kept = _read_index_file(args.source_kept)
        if len(kept) != len(pred):
            raise EvaluationError("kept-index file does not match the map length")
        rows = np.nonzero(kept >= 0)[0]
    if args.protocol == "keypoint":
        src_pts = load_points(args.source_points).points
        report = keypoint_error(pred, src_pts, load_points(args.target_points).points,
                                read_keypoints(args.source_keypoints), read_keypoints(args.target_keypoints),
                                K=args.K)
    else:
        gt_full = _read_index_file(args.gt)
        mesh = load_mesh(args.mesh)
        if args.protocol == "geodesic":
            gt = gt_full[kept[rows]] if kept is not None else gt_full
            report = geodesic_error(pred[rows], GroundTruth(gt), mesh)
        else:
            src_pts = load_points(args.source_points).points[rows]
            report = pc_error(pred[rows], GroundTruth(gt_full), src_pts, load_points(args.target_points).points,
                              load_mesh(args.source_mesh), mesh)
    _prepare_out(args.out, True, is_dir=False)
    extra = {"provenance": {"tool": "volcorr", "version": __version__, "command": "eval",
                            "arguments": {k: v for k, v in vars(args).items() if k != "func"}}}
    write_report(report, args.out, extra)
    plot_accuracy_curve(report, os.path.splitext(args.out)[0] + "_curve.png")
    print(f"{args.protocol} error: mean {report.mean:.6g} over {len(report.errors)} points")
    return EXIT_OK


# ---------------------------------------------------------------------------
# perturb / gradcheck / synth

def cmd_perturb(args) -> int:
    if args.fraction is not None and not 0.0 <= args.fraction <= 1.0:
        raise UsageError(f"--fraction {args.fraction} outside [0, 1]")
    if os.path.exists(args.out) and not args.force:
        raise UsageError(f"{args.out} exists; pass --force to overwrite")
    ext = os.path.splitext(args.input)[1].lower()
    shape = load_mesh(args.input) if ext in MESH_EXT else load_points(args.input)
    kw = {"std": args.std, "fraction": 0.2 if args.fraction is None else args.fraction,
          "offset": args.offset, "radius": args.radius}
    if args.center:
        kw["center"] = [float(v) for v in args.center.split(",")]
    if args.normal:
        kw["normal"] = [float(v) for v in args.normal.split(",")]
    out, kept = perturb(shape, args.scenario, seed=args.seed, **kw)
    _prepare_out(args.out, True, is_dir=False)
    out_ext = os.path.splitext(args.out)[1].lower()
    if isinstance(out, TriangleMesh) and out_ext in MESH_EXT:
        save_mesh(out, args.out)
    else:
        save_points(out.vertices if isinstance(out, TriangleMesh) else out.points, args.out)
    np.savetxt(args.out + ".kept.txt", kept, fmt="%d")
    print(f"{args.scenario}: {len(kept)} points written ({int((kept < 0).sum())} flagged)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    res = run_gradcheck(seeds=tuple(range(args.seed, args.seed + args.seeds)), per_tensor=args.per_tensor)
    for line in res.lines():
        print(line)
    print(f"gradcheck {'passed' if res.passed else 'FAILED'} in {res.seconds:.1f}s")
    return EXIT_OK if res.passed else EXIT_NUMERIC


def cmd_synth(args) -> int:
    from .synthetic import deformed_family

    _prepare_out(args.out, args.force)
    tm, shapes = deformed_family(args.n, seed=args.seed, subdivisions=args.subdivisions)
    save_mesh(tm, os.path.join(args.out, "template.off"))
    os.makedirs(os.path.join(args.out, "shapes"), exist_ok=True)
    ident = np.arange(tm.n_vertices)
    for i, m in enumerate(shapes):
        base = os.path.join(args.out, "shapes", f"shape_{i:03d}")
        save_mesh(m, base + ".off")
        np.savetxt(base + ".corr", ident, fmt="%d")
    print(f"wrote template and {len(shapes)} shapes to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="volcorr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", help="sample surface/volume data for a mesh directory")
    s.add_argument("--mesh-dir", required=True, help="directory of .off/.obj shapes (optional <stem>.corr next to each)")
    s.add_argument("--template", required=True, help="template mesh file")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="RunConfig JSON")
    s.add_argument("--seed", type=int)
    s.add_argument("--force", action="store_true", help="overwrite existing output")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="fit hypernetworks and latents")
    s.add_argument("--data", required=True, help="output directory of preprocess")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="RunConfig JSON")
    s.add_argument("--ablation", help="loss mask preset, e.g. te_wo_lsdr")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--force", action="store_true", help="overwrite existing output")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("match", help="dense map between two shapes")
    s.add_argument("--ckpt", required=True, help="checkpoint directory, or a train output dir (latest epoch)")
    s.add_argument("--source", required=True, help="mesh, point file or record directory")
    s.add_argument("--target", required=True, help="mesh, point file or record directory")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="RunConfig JSON")
    s.add_argument("--force", action="store_true", help="overwrite existing output")
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("eval", help="score a map against ground truth")
    s.add_argument("--map", required=True)
    s.add_argument("--gt", help="ground-truth target index per source point")
    s.add_argument("--mesh", help="target mesh the errors are measured on")
    s.add_argument("--protocol", choices=("geodesic", "pc", "keypoint"), default="geodesic")
    s.add_argument("--out", required=True)
    s.add_argument("--source-mesh")
    s.add_argument("--source-points")
    s.add_argument("--target-points")
    s.add_argument("--source-keypoints")
    s.add_argument("--target-keypoints")
    s.add_argument("--source-kept", help="kept-index file from perturb; -1 rows are ignored")
    s.add_argument("-K", type=int, default=32, help="neighbourhood size for the keypoint vote")
    s.add_argument("--force", action="store_true", help="overwrite existing output")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("perturb", help="corrupt a shape")
    s.add_argument("--input", required=True)
    s.add_argument("--scenario", choices=SCENARIOS, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--std", type=float, default=0.01)
    s.add_argument("--fraction", type=float)
    s.add_argument("--center", help="x,y,z of the removed sphere (partial)")
    s.add_argument("--radius", type=float)
    s.add_argument("--normal", help="x,y,z of the cutting half-space (partial)")
    s.add_argument("--offset", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--force", action="store_true", help="overwrite existing output")
    s.set_defaults(func=cmd_perturb)

    s = sub.add_parser("gradcheck", help="finite-difference gradient check on tiny nets")
    s.add_argument("--seeds", type=int, default=3, help="number of random networks")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--per-tensor", type=int, default=12, help="hypernet entries checked per tensor")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic deformed-sphere family")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=20, help="number of deformed shapes")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--subdivisions", type=int, default=3)
    s.add_argument("--force", action="store_true", help="overwrite existing output")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError, GeometryError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, RbfConditionError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, StoreError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
