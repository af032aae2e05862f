"""Finite-difference check of every loss term's gradients on tiny networks."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .config import TERMS, LossWeights, RunConfig
from .losses import draw_term_batch, evaluate_terms, field_for
from .nets import DTYPE, build_hypernets
from .sampling import build_shape_record
from .synthetic import deformed_family

CHECKS = TERMS + ("e_train",)


@dataclass
class Offender:
    term: str
    seed: int
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradcheckResult:
    worst: dict  # term -> Offender (largest relative error seen)
    checked: dict  # term -> number of compared entries
    skipped: dict  # term -> entries skipped for kink crossings
    tolerance: float
    seconds: float
    vanishing: dict = None  # term -> entries where both gradients were ~0

    @property
    def passed(self) -> bool:
        return all(o.rel_error < self.tolerance for o in self.worst.values())

    def lines(self):
        for term in CHECKS:
            o = self.worst.get(term)
            if o is None:
                yield f"{term:8s} no entries compared"
                continue
            flag = "ok" if o.rel_error < self.tolerance else "FAIL"
            yield (f"{term:8s} {flag:4s} worst rel {o.rel_error:.3e} at {o.name}{list(o.index)} seed {o.seed} "
                   f"(analytic {o.analytic:.6e}, numeric {o.numeric:.6e}); "
                   f"{self.checked[term]} checked, {self.skipped[term]} kink skips, "
                   f"{(self.vanishing or {}).get(term, 0)} vanishing")


def tiny_config() -> RunConfig:
    cfg = RunConfig()
    cfg.nets.hidden = 8
    cfg.nets.hidden_layers = 2
    cfg.nets.latent_dim = 4
    cfg.nets.hyper_hidden = 8
    cfg.nets.dropout = 0.0
    cfg.sampling.n_volume = 300
    cfg.sampling.n_surface = 40
    cfg.sampling.n_off_surface = 40
    cfg.loss.n_surface = 8
    cfg.loss.n_sdr = 8
    return cfg


def _weights_for(term: str, base: LossWeights) -> LossWeights:
    w = LossWeights(base.lambda1, base.lambda2, base.lambda3, base.lambda4, base.lambda5)
    w.mask = {t: (term == "e_train" or t == term) for t in TERMS}
    return w


class _ReluProbe:
    """Collects hypernet ReLU inputs so kink crossings can be detected."""

    def __init__(self, modules):
        self.trace = None
        self.handles = []
        for m in modules:
            for sub in m.modules():
                if isinstance(sub, torch.nn.ReLU):
                    self.handles.append(sub.register_forward_hook(self._hook))

    def _hook(self, mod, inp, out):
        if self.trace is not None:
            self.trace.append(inp[0].detach())

    def close(self):
        for h in self.handles:
            h.remove()


def _pattern(trace):
    return [t > 0 for t in trace]


def run_gradcheck(seeds=(0, 1, 2), h: float = 1e-5, tolerance: float = 1e-4, per_tensor: int = 12,
                  config: RunConfig | None = None, floor: float = 1e-8) -> GradcheckResult:
    """Compare autograd gradients with central differences for each term.

    Hypernet tensors are checked on ``per_tensor`` randomly chosen entries
    each, latents on every entry.  Entries whose perturbation moves any ReLU
    pre-activation across zero are skipped (the loss is not differentiable
    there), as are entries where both gradients are below ``floor``.  RBF
    neighbour sets are held at the base point.
    """
    t0 = time.time()
    cfg = config or tiny_config()
    tm, shapes = deformed_family(2, seed=0, subdivisions=1)
    template = build_shape_record(tm, None, cfg.sampling, seed=0, shape_id="template")
    records = [build_shape_record(m, template, cfg.sampling, seed=i + 1, shape_id=f"s{i}")
               for i, m in enumerate(shapes)]
    fields = [field_for(r, cfg.loss) for r in records]
    worst, checked, skipped = {}, {t: 0 for t in CHECKS}, {t: 0 for t in CHECKS}
    skipped_zero = {t: 0 for t in CHECKS}
    torch_prev = torch.is_grad_enabled()
    torch.set_grad_enabled(True)
    try:
        for seed in seeds:
            hs, hd = build_hypernets(cfg.nets, seed)
            g = torch.Generator().manual_seed(1000 + seed)
            alphas = torch.nn.Parameter(torch.randn(len(records), cfg.nets.latent_dim, generator=g, dtype=DTYPE) * 0.5)
            rng = np.random.default_rng(seed)
            batch = draw_term_batch(records, template, cfg.loss, fields, rng)
            probe = _ReluProbe([hs, hd])
            named = [("hyper_s." + n, p) for n, p in hs.named_parameters()]
            named += [("hyper_d." + n, p) for n, p in hd.named_parameters()]
            named.append(("latents", alphas))
            pick_rng = np.random.default_rng(seed + 77)
            picks = {}
            for name, p in named:
                if name == "latents":
                    picks[name] = list(np.ndindex(*p.shape))
                else:
                    flat = pick_rng.choice(p.numel(), size=min(per_tensor, p.numel()), replace=False)
                    picks[name] = [np.unravel_index(i, p.shape) for i in flat]
            for term in CHECKS:
                weights = _weights_for(term, cfg.weights)
                batch.nbrs = None

                def evaluate(trace=None):
                    probe.trace = trace
                    total, _ = evaluate_terms(hs, hd, alphas, batch, cfg.loss, weights,
                                              record_nbrs=batch.nbrs is None, trace=trace)
                    probe.trace = None
                    return total

                for _, p in named:
                    p.grad = None
                base_trace = []
                total = evaluate(base_trace)
                total.backward()
                base_pat = _pattern(base_trace)
                with torch.no_grad():
                    for name, p in named:
                        grad = p.grad if p.grad is not None else torch.zeros_like(p)
                        for idx in picks[name]:
                            idx = tuple(int(i) for i in idx)
                            orig = p[idx].item()
                            vals, pats = [], []
                            for s in (1.0, -1.0):
                                p[idx] = orig + s * h
                                tr = []
                                vals.append(float(evaluate(tr)))
                                pats.append(_pattern(tr))
                            p[idx] = orig
                            if any(not all(torch.equal(a, b) for a, b in zip(pt, base_pat)) for pt in pats):
                                skipped[term] += 1
                                continue
                            num = (vals[0] - vals[1]) / (2 * h)
                            ana = float(grad[idx])
                            denom = max(abs(ana), abs(num))
                            if denom < floor:
                                # both sides vanish: nothing to compare
                                skipped_zero[term] += 1
                                continue
                            rel = abs(ana - num) / denom
                            checked[term] += 1
                            if term not in worst or rel > worst[term].rel_error:
                                worst[term] = Offender(term, seed, name, idx, ana, num, rel)
            probe.close()
    finally:
        torch.set_grad_enabled(torch_prev)
    return GradcheckResult(worst, checked, skipped, tolerance, time.time() - t0, skipped_zero)
