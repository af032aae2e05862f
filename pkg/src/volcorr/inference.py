"""Test-time pipeline: latent MAP fit, Chamfer refinement, map composition."""
from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import LossWeights, RunConfig
from .losses import draw_term_batch, evaluate_terms, field_for
from .nets import DTYPE, NonFiniteError, mlp_forward
from .rbf import NeighborIndex
from .sampling import ShapeRecord


@dataclass(frozen=True, eq=False)
class DenseMap:
    source_id: str
    target_id: str
    assignment: np.ndarray
    distances: np.ndarray
    info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.assignment)


@dataclass
class StageResult:
    alpha: torch.Tensor
    initial: float
    final: float
    trace: list


@contextlib.contextmanager
def frozen(*modules):
    prev = [[p.requires_grad for p in m.parameters()] for m in modules]
    for m in modules:
        m.requires_grad_(False)
    try:
        yield
    finally:
        for m, flags in zip(modules, prev):
            for p, f in zip(m.parameters(), flags):
                p.requires_grad_(f)


def initial_latent(state, config: RunConfig) -> torch.Tensor:
    d = state.config.nets.latent_dim
    if config.infer.latent_init == "zero" or not state.latents:
        return torch.zeros(d, dtype=DTYPE)
    if config.infer.latent_init == "mean":
        return torch.from_numpy(state.latent_matrix().mean(axis=0))
    raise ValueError(f"unknown latent_init {config.infer.latent_init!r}")


def _inference_weights(cfg: RunConfig, record: ShapeRecord) -> LossWeights:
    w = LossWeights(**{k: getattr(cfg.weights, k) for k in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda5")})
    w.mask = {"sdf": cfg.infer.use_sdf, "surf": False,
              "sdr": cfg.infer.use_sdr and record.reliable_sdf, "smooth": False, "vol": False}
    return w


def _optimize(alpha0, objective, steps: int, lr: float) -> StageResult:
    """Adam on the latent alone, keeping the best iterate seen."""
    alpha = torch.nn.Parameter(alpha0.detach().clone())
    opt = torch.optim.Adam([alpha], lr=lr, foreach=False)
    best_alpha = alpha.detach().clone()
    initial = None
    best = np.inf
    trace = []
    for it in range(steps + 1):
        opt.zero_grad(set_to_none=True)
        value = objective(alpha)
        v = float(value.detach())
        if not np.isfinite(v):
            raise NonFiniteError("inference objective", f"iteration {it}")
        trace.append(v)
        if initial is None:
            initial = v
        if v < best:
            best = v
            best_alpha = alpha.detach().clone()
        if it == steps:
            break
        if value.requires_grad:
            value.backward()
            opt.step()
    return StageResult(best_alpha, initial, best, trace)


def map_objective(state, target: ShapeRecord, config: RunConfig | None = None):
    """Fixed-sample objective Lambda1 L_SDF + Lambda3 L_SDR + prior * |alpha|^2 for ``target``."""
    cfg = config or state.config
    loss_cfg = type(cfg.loss)(**{**vars(cfg.loss), "n_surface": cfg.infer.n_points, "n_sdr": cfg.infer.n_points})
    weights = _inference_weights(cfg, target)
    rng = np.random.default_rng(cfg.infer.seed)
    fld = field_for(target, cfg.loss) if weights.enabled("sdr") else None
    batch = draw_term_batch([target], state.template, loss_cfg, [fld], rng)
    prior = cfg.infer.latent_prior_weight

    def objective(alpha):
        total, _ = evaluate_terms(state.hyper_s, state.hyper_d, alpha.unsqueeze(0), batch, loss_cfg, weights)
        return total + prior * (alpha * alpha).sum()

    return objective


def map_estimate(state, target: ShapeRecord, config: RunConfig | None = None,
                 init: torch.Tensor | None = None) -> StageResult:
    cfg = config or state.config
    alpha0 = initial_latent(state, cfg) if init is None else torch.as_tensor(init, dtype=DTYPE)
    objective = map_objective(state, target, cfg)
    with frozen(state.hyper_s, state.hyper_d):
        return _optimize(alpha0, objective, cfg.infer.map_steps, cfg.infer.learning_rate)


def deform_points(state, alpha, points) -> torch.Tensor:
    """Apply the deformation field of ``alpha`` to ``points`` (no dropout)."""
    t = torch.from_numpy(np.array(points, dtype=np.float64))
    omega = state.hyper_d(torch.as_tensor(alpha, dtype=DTYPE))
    return t + mlp_forward(omega, state.hyper_d.target, t)


def deform_template(state, alpha, volume: bool = False):
    with torch.no_grad():
        surf = deform_points(state, alpha, state.template.surface.points).numpy()
        if volume:
            return surf, deform_points(state, alpha, state.template.volume.points).numpy()
    return surf


def chamfer(a, b):
    """Mean-form bidirectional Chamfer distance with squared Euclidean residuals."""
    d2 = ((a.unsqueeze(1) - b.unsqueeze(0)) ** 2).sum(-1)
    return d2.min(dim=1).values.mean() + d2.min(dim=0).values.mean()


def chamfer_refine(state, alpha, target_points, config: RunConfig | None = None) -> StageResult:
    cfg = config or state.config
    tmpl = torch.from_numpy(np.asarray(state.template.surface.points, dtype=np.float64).copy())
    tgt = torch.from_numpy(np.array(target_points, dtype=np.float64))
    spec = state.hyper_d.target

    def objective(a):
        moved = tmpl + mlp_forward(state.hyper_d(a), spec, tmpl)
        return chamfer(moved, tgt)

    with frozen(state.hyper_s, state.hyper_d):
        return _optimize(torch.as_tensor(alpha, dtype=DTYPE), objective, cfg.infer.chamfer_steps,
                         cfg.infer.learning_rate)


def shape_points(record: ShapeRecord) -> np.ndarray:
    """Points a map is defined on: mesh vertices, or the raw cloud."""
    if record.source_mesh is not None:
        return record.source_mesh.vertices
    return record.surface.points


def fit_latent(state, record: ShapeRecord, config: RunConfig | None = None,
               init: torch.Tensor | None = None) -> tuple[torch.Tensor, dict]:
    """MAP estimate followed (unless disabled) by Chamfer refinement."""
    cfg = config or state.config
    m = map_estimate(state, record, cfg, init)
    info = {"map_initial": m.initial, "map_final": m.final}
    alpha = m.alpha
    if cfg.infer.chamfer and cfg.infer.chamfer_steps > 0:
        c = chamfer_refine(state, alpha, record.surface.points, cfg)
        info.update(chamfer_initial=c.initial, chamfer_final=c.final)
        alpha = c.alpha
    return alpha, info


def correspond(state, source_points, alpha_x, target_points, alpha_y,
               source_id: str = "source", target_id: str = "target") -> DenseMap:
    """Compose source -> deformed template (alpha_x) -> deformed template (alpha_y) -> target."""
    src = np.asarray(source_points, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(target_points, dtype=np.float64).reshape(-1, 3)
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("correspondence needs non-empty source and target point sets")
    tx = deform_template(state, alpha_x)
    ty = deform_template(state, alpha_y)
    k = NeighborIndex(tx).query(src, 1)[:, 0]
    loc = ty[k]
    assign = NeighborIndex(tgt).query(loc, 1)[:, 0]
    dist = np.linalg.norm(tgt[assign] - loc, axis=1)
    return DenseMap(source_id, target_id, assign, dist)


def match(state, source: ShapeRecord, target: ShapeRecord, config: RunConfig | None = None) -> DenseMap:
    cfg = config or state.config
    ax, info_x = fit_latent(state, source, cfg)
    ay, info_y = fit_latent(state, target, cfg)
    dm = correspond(state, shape_points(source), ax, shape_points(target), ay, source.id, target.id)
    info = {"source": info_x, "target": info_y}
    return DenseMap(dm.source_id, dm.target_id, dm.assignment, dm.distances, info)


# ---------------------------------------------------------------------------
# DenseMap files: one target index per line plus a JSON sidecar

def save_dense_map(dm: DenseMap, path, extra: dict | None = None) -> None:
    np.savetxt(path, dm.assignment, fmt="%d")
    side = {
        "source_id": dm.source_id,
        "target_id": dm.target_id,
        "n_points": int(len(dm)),
        "residual_mean": float(np.mean(dm.distances)) if len(dm) else 0.0,
        "residual_max": float(np.max(dm.distances)) if len(dm) else 0.0,
        "stages": dm.info,
    }
    side.update(extra or {})
    with open(str(path) + ".json", "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)


def load_dense_map(path) -> DenseMap:
    assign = np.loadtxt(path, dtype=np.int64, ndmin=1)
    try:
        with open(str(path) + ".json") as fh:
            side = json.load(fh)
    except FileNotFoundError:
        side = {"source_id": "source", "target_id": "target", "stages": {}}
    return DenseMap(side.get("source_id", "source"), side.get("target_id", "target"), assign,
                    np.zeros(len(assign)), side.get("stages", {}))
