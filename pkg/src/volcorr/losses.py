"""Loss terms of the training energy and their batched evaluation.

All per-point sums are means over their batches.  Every function takes and
returns torch tensors so gradients (the adjoints) come from autograd.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import TERMS, LossConfig, LossWeights
from .nets import DTYPE, HyperNet, NonFiniteError, dropout_masks, mlp_forward
from .rbf import RbfField


def clamp(x, eta: float):
    return torch.clamp(torch.as_tensor(x, dtype=DTYPE), -eta, eta)


def _safe_norm(v, dims):
    s = (v * v).sum(dims)
    pos = s > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, s, torch.ones_like(s))), torch.zeros_like(s))


def det3(M):
    """Determinant of (..., 3, 3) matrices by cofactor expansion."""
    a, b, c = M[..., 0, 0], M[..., 0, 1], M[..., 0, 2]
    d, e, f = M[..., 1, 0], M[..., 1, 1], M[..., 1, 2]
    g, h, i = M[..., 2, 0], M[..., 2, 1], M[..., 2, 2]
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


def l_surf(deformed, targets):
    if deformed.shape[-2] == 0:
        raise ValueError("surface loss needs at least one pair")
    return _safe_norm(targets - deformed, -1).mean(-1)


def l_sdr(template_sdf, estimated_sdf, eta: float):
    """Mean |clamp(sigma_t) - clamp(sigma_hat)| over template volume points."""
    return (clamp(template_sdf, eta) - torch.clamp(estimated_sdf, -eta, eta)).abs().mean(-1)


def l_smooth(jacobians):
    return _safe_norm(jacobians, (-2, -1)).mean(-1)


def l_vol(jacobians, literal: bool = False):
    """Mean |det(I + J) - 1|; ``literal`` uses det(J) instead of the full map."""
    M = jacobians if literal else jacobians + torch.eye(3, dtype=jacobians.dtype)
    return (det3(M) - 1.0).abs().mean(-1)


def psi(f, C: float):
    return torch.exp(-C * f.abs())


def l_sdf(f_vol, grad_vol, sdf_vol, grad_surf=None, normals=None, f_off=None, C: float = 100.0):
    """Eikonal + value residual on volume points, normal alignment, off-surface penalty."""
    out = ((_safe_norm(grad_vol, -1) - 1.0).abs() + (f_vol - sdf_vol).abs()).mean(-1)
    if grad_surf is not None and normals is not None and grad_surf.shape[-2]:
        out = out + (1.0 - (grad_surf * normals).sum(-1)).mean(-1)
    if f_off is not None and f_off.shape[-1]:
        out = out + psi(f_off, C).mean(-1)
    return out


def e_train(values: dict, weights: LossWeights):
    """Weighted sum of per-term values honouring the ablation mask."""
    total = 0.0
    for term in TERMS:
        w = weights.weight(term)
        if w and term in values:
            total = total + w * values[term]
    return total


# ---------------------------------------------------------------------------
# Batched evaluation over shapes

@dataclass
class TermBatch:
    """Point subsets for B shapes, stacked along the first axis.

    ``surf_ok``/``normal_ok``/``sdr_ok`` flag which shapes carry the data a
    term needs; ``fields`` holds each shape's RBF estimator (or None) and
    ``nbrs`` optionally pins the RBF neighbour sets.
    """

    surf_t: torch.Tensor
    surf_x: torch.Tensor
    surf_ok: np.ndarray
    sdf_x: torch.Tensor
    sdf_sigma: torch.Tensor
    norm_x: torch.Tensor
    normals: torch.Tensor
    normal_ok: np.ndarray
    off_x: torch.Tensor
    tvol_t: torch.Tensor
    tvol_sigma: torch.Tensor
    fields: list
    sdr_ok: np.ndarray
    nbrs: list | None = None

    def __len__(self):
        return self.sdf_x.shape[0]


def _pick(rng, n_avail, n):
    return rng.integers(0, n_avail, size=n)


def draw_term_batch(records, template, cfg: LossConfig, fields, rng: np.random.Generator) -> TermBatch:
    """Sample each term's points (with replacement) from the records' pools."""
    ns, nv = cfg.n_surface, cfg.n_sdr
    cols = {k: [] for k in ("surf_t", "surf_x", "sdf_x", "sdf_sigma", "norm_x", "normals",
                            "off_x", "tvol_t", "tvol_sigma")}
    surf_ok, normal_ok, sdr_ok = [], [], []
    tpts = template.surface.points
    for rec in records:
        ti = rec.surface.template_index
        sup = np.nonzero(ti >= 0)[0] if ti is not None else np.zeros(0, dtype=np.int64)
        if len(sup):
            sel = sup[_pick(rng, len(sup), ns)]
            cols["surf_x"].append(rec.surface.points[sel])
            cols["surf_t"].append(tpts[ti[sel]])
            surf_ok.append(True)
        else:
            cols["surf_x"].append(np.zeros((ns, 3)))
            cols["surf_t"].append(np.zeros((ns, 3)))
            surf_ok.append(False)
        sel = _pick(rng, len(rec.volume), nv)
        cols["sdf_x"].append(rec.volume.points[sel])
        cols["sdf_sigma"].append(rec.volume.sdf[sel])
        sel = _pick(rng, len(rec.surface), ns)
        cols["norm_x"].append(rec.surface.points[sel])
        if rec.surface.normals is not None and rec.reliable_sdf:
            cols["normals"].append(rec.surface.normals[sel])
            normal_ok.append(True)
        else:
            cols["normals"].append(np.zeros((ns, 3)))
            normal_ok.append(False)
        off = rec.off_surface
        cols["off_x"].append(off[_pick(rng, len(off), nv)] if len(off) else np.zeros((0, 3)))
        sel = _pick(rng, len(template.volume), nv)
        cols["tvol_t"].append(template.volume.points[sel])
        cols["tvol_sigma"].append(template.volume.sdf[sel])
        sdr_ok.append(rec.reliable_sdf)
    if len({len(o) for o in cols["off_x"]}) > 1:
        cols["off_x"] = [o[:0] for o in cols["off_x"]]
    t = {k: torch.from_numpy(np.stack(v).astype(np.float64)) for k, v in cols.items()}
    return TermBatch(t["surf_t"], t["surf_x"], np.array(surf_ok), t["sdf_x"], t["sdf_sigma"],
                     t["norm_x"], t["normals"], np.array(normal_ok), t["off_x"], t["tvol_t"],
                     t["tvol_sigma"], list(fields), np.array(sdr_ok))


def _masked_mean(values, ok):
    ok_t = torch.from_numpy(np.asarray(ok, dtype=np.float64))
    if ok_t.sum() == 0:
        return values.sum() * 0.0
    return (values * ok_t).sum() / ok_t.sum()


def evaluate_terms(hyper_s: HyperNet | None, hyper_d: HyperNet | None, alphas, batch: TermBatch,
                   cfg: LossConfig, weights: LossWeights, rng: np.random.Generator | None = None,
                   record_nbrs: bool = False, trace: list | None = None):
    """Per-term values (means over shapes) and the weighted total.

    Dropout (when ``rng`` is given) touches only the deformation net's
    surface-supervision pass; every Jacobian-bearing pass runs without it.
    """
    values = {}
    B = len(batch)
    need_sdf = weights.enabled("sdf")
    need_d = any(weights.enabled(t) for t in ("surf", "sdr", "smooth", "vol"))

    if need_sdf:
        theta = hyper_s(alphas)
        spec = hyper_s.target
        nv, ns = batch.sdf_x.shape[1], batch.norm_x.shape[1]
        x = torch.cat([batch.sdf_x, batch.norm_x, batch.off_x], dim=1)
        f, J = mlp_forward(theta, spec, x, jacobian=True, trace=trace)
        f = f[..., 0]
        g = J[..., 0, :]
        per = l_sdf(f[:, :nv], g[:, :nv], batch.sdf_sigma, f_off=f[:, nv + ns:], C=cfg.C)
        normal = (1.0 - (g[:, nv:nv + ns] * batch.normals).sum(-1)).mean(-1)
        per = per + normal * torch.from_numpy(batch.normal_ok.astype(np.float64))
        values["sdf"] = per.mean()

    if need_d:
        omega = hyper_d(alphas)
        spec = hyper_d.target
        if weights.enabled("surf"):
            masks = dropout_masks(spec, batch.surf_t.shape[:2], rng) if rng is not None else None
            v = mlp_forward(omega, spec, batch.surf_t, dropout_masks=masks, trace=trace)
            values["surf"] = _masked_mean(l_surf(batch.surf_t + v, batch.surf_x), batch.surf_ok)
        if any(weights.enabled(t) for t in ("sdr", "smooth", "vol")):
            v, J = mlp_forward(omega, spec, batch.tvol_t, jacobian=True, trace=trace)
            if weights.enabled("smooth"):
                values["smooth"] = l_smooth(J).mean()
            if weights.enabled("vol"):
                values["vol"] = l_vol(J, literal=cfg.literal_volume).mean()
            if weights.enabled("sdr"):
                moved = batch.tvol_t + v
                per, nbrs = [], []
                for b in range(B):
                    field = batch.fields[b]
                    if field is None or not batch.sdr_ok[b]:
                        per.append(moved[b].sum() * 0.0)
                        nbrs.append(None)
                        continue
                    pinned = batch.nbrs[b] if batch.nbrs is not None else None
                    est, used = field(moved[b], pinned)
                    per.append(l_sdr(batch.tvol_sigma[b], est, cfg.eta))
                    nbrs.append(used)
                values["sdr"] = _masked_mean(torch.stack(per), batch.sdr_ok & np.array(
                    [f is not None for f in batch.fields]))
                if record_nbrs:
                    batch.nbrs = nbrs

    total = e_train(values, weights)
    if not torch.is_tensor(total):
        total = torch.zeros((), dtype=DTYPE)
    for term, val in values.items():
        if not torch.isfinite(val):
            raise NonFiniteError(term, f"value {float(val.detach())}")
    return total, values


def field_for(record, cfg: LossConfig, check: bool = True) -> RbfField | None:
    if not record.reliable_sdf:
        return None
    return RbfField(record.volume.points, record.volume.sdf, cfg.rbf_k, cfg.epsilon0, check=check)
