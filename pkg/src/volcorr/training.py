"""Auto-decoder training: hypernetworks and per-shape latents optimized jointly."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import TERMS, RunConfig
from .losses import draw_term_batch, evaluate_terms, field_for
from .nets import DTYPE, HyperNet, NonFiniteError, build_hypernets
from .sampling import ShapeRecord, _record_arrays, _record_from, _record_meta
from .store import StoreError, read_store, write_store

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
HISTORY_COLUMNS = ("step", "epoch") + TERMS + ("total",)


class CheckpointError(StoreError):
    pass


@dataclass
class ModelState:
    hyper_s: HyperNet
    hyper_d: HyperNet
    latents: dict  # shape id -> torch.nn.Parameter, in dataset order
    template: ShapeRecord
    config: RunConfig
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)
    optimizer: torch.optim.Optimizer | None = field(default=None, repr=False)
    _fields: dict = field(default_factory=dict, repr=False)

    @property
    def ids(self) -> list:
        return list(self.latents)

    def latent_matrix(self) -> np.ndarray:
        return torch.stack([p.detach() for p in self.latents.values()]).numpy().copy()

    def named_tensors(self) -> dict:
        out = {}
        for name, p in self.hyper_s.named_parameters():
            out["hyper_s." + name] = p
        for name, p in self.hyper_d.named_parameters():
            out["hyper_d." + name] = p
        for sid, p in self.latents.items():
            out["latent." + sid] = p
        return out

    def field(self, record: ShapeRecord):
        if record.id not in self._fields:
            self._fields[record.id] = field_for(record, self.config.loss)
        return self._fields[record.id]


def init_model(dataset, template: ShapeRecord, config: RunConfig) -> ModelState:
    """Fresh hypernets and N(0, latent_init_std^2) latents, deterministic in the seed."""
    seed = config.train.seed
    hs, hd = build_hypernets(config.nets, seed)
    g = torch.Generator().manual_seed(int(seed) + 7919)
    latents = {}
    for rec in dataset:
        if rec.id in latents:
            raise ValueError(f"duplicate shape id {rec.id!r}")
        z = torch.randn(config.nets.latent_dim, generator=g, dtype=DTYPE) * config.train.latent_init_std
        latents[rec.id] = torch.nn.Parameter(z)
    state = ModelState(hs, hd, latents, template, config, np.random.default_rng(seed))
    state.optimizer = make_optimizer(state)
    return state


def make_optimizer(state: ModelState) -> torch.optim.Adam:
    tc = state.config.train
    return torch.optim.Adam(list(state.named_tensors().values()), lr=tc.learning_rate,
                            betas=tuple(tc.betas), eps=tc.eps, foreach=False)


def train_step(state: ModelState, records, config: RunConfig | None = None) -> dict:
    """One Adam update on the hypernets and the latents of ``records``."""
    cfg = config or state.config
    for rec in records:
        if rec.id not in state.latents:
            raise KeyError(f"shape {rec.id!r} has no latent code")
    opt = state.optimizer
    for group in opt.param_groups:
        group["lr"] = cfg.train.learning_rate
    opt.zero_grad(set_to_none=True)
    fields = [state.field(r) for r in records]
    batch = draw_term_batch(records, state.template, cfg.loss, fields, state.rng)
    alphas = torch.stack([state.latents[r.id] for r in records])
    dropout_rng = state.rng if cfg.nets.dropout > 0 else None
    try:
        total, values = evaluate_terms(state.hyper_s, state.hyper_d, alphas, batch, cfg.loss,
                                       cfg.weights, rng=dropout_rng)
    except NonFiniteError as exc:
        raise NonFiniteError(exc.term, f"step {state.step}") from exc
    if not torch.isfinite(total):
        raise NonFiniteError("total", f"step {state.step}")
    if total.requires_grad:
        total.backward()
        for name, p in state.named_tensors().items():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteError("gradient", f"{name} at step {state.step}")
        opt.step()
    metrics = {"step": state.step, "epoch": state.epoch}
    metrics.update({t: float(values[t].detach()) if t in values else 0.0 for t in TERMS})
    metrics["total"] = float(total.detach())
    state.step += 1
    return metrics


def fit(state: ModelState, dataset, config: RunConfig | None = None, checkpoint_dir=None,
        progress=None) -> tuple[ModelState, list]:
    """Run the remaining epochs of shuffled mini-batches.

    Checkpoints go to ``checkpoint_dir/epoch_XXXX`` every
    ``checkpoint_every`` epochs and after the last one; the loss history is
    kept on the state and written as ``history.csv``.
    """
    cfg = config or state.config
    by_id = {r.id: r for r in dataset}
    ids = [sid for sid in state.ids if sid in by_id]
    bs = max(1, cfg.train.batch_shapes)
    while state.epoch < cfg.train.epochs:
        order = state.rng.permutation(len(ids))
        for lo in range(0, len(order), bs):
            recs = [by_id[ids[i]] for i in order[lo:lo + bs]]
            row = train_step(state, recs, cfg)
            state.history.append(row)
            if progress is not None:
                progress(row)
        state.epoch += 1
        last = state.epoch == cfg.train.epochs
        if checkpoint_dir is not None and (last or state.epoch % max(1, cfg.train.checkpoint_every) == 0):
            save_checkpoint(state, os.path.join(checkpoint_dir, f"epoch_{state.epoch:04d}"))
            write_history(state.history, os.path.join(checkpoint_dir, "history.csv"))
    return state, state.history


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row[c] if c in ("step", "epoch") else repr(float(row[c])) for c in HISTORY_COLUMNS])


def read_history(path) -> list:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in r.items()} for r in rows]


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(state: ModelState, path) -> None:
    arrays = {}
    for name, p in state.named_tensors().items():
        if not name.startswith("latent."):
            arrays["param." + name] = p.detach().numpy()
    ids = state.ids
    arrays["latents"] = state.latent_matrix() if ids else np.zeros((0, state.config.nets.latent_dim))
    opt_steps = {}
    if state.optimizer is not None:
        for name, p in state.named_tensors().items():
            st = state.optimizer.state.get(p)
            if st:
                arrays["adam.exp_avg." + name] = st["exp_avg"].numpy()
                arrays["adam.exp_avg_sq." + name] = st["exp_avg_sq"].numpy()
                opt_steps[name] = float(st["step"])
    arrays["history"] = np.array([[row[c] for c in HISTORY_COLUMNS] for row in state.history],
                                 dtype=np.float64).reshape(-1, len(HISTORY_COLUMNS))
    arrays.update(_record_arrays(state.template, prefix="template."))
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "specs": {"sdf": state.hyper_s.config(), "deform": state.hyper_d.config()},
        "shape_ids": ids,
        "step": state.step,
        "epoch": state.epoch,
        "adam_steps": opt_steps,
        "rng_state": state.rng.bit_generator.state,
        "template": _record_meta(state.template),
    }
    write_store(path, arrays, meta)


def load_checkpoint(path, config: RunConfig | None = None) -> ModelState:
    """Rebuild a ModelState; ``config`` (if given) must agree on the network specs."""
    arrays, meta = read_store(path)
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('checkpoint_version')}")
    stored = RunConfig.from_dict(meta["config"])
    if config is not None and config.nets != stored.nets:
        raise CheckpointError(f"{path}: network spec in checkpoint differs from the requested config")
    cfg = config or stored
    hs, hd = build_hypernets(stored.nets, stored.train.seed)
    for net, key in ((hs, "sdf"), (hd, "deform")):
        if meta["specs"][key] != net.config():
            raise CheckpointError(f"{path}: stored {key} spec does not match its config")
    template = _record_from(arrays, meta["template"], prefix="template.")
    ids = list(meta["shape_ids"])
    lat = arrays["latents"]
    if lat.shape != (len(ids), stored.nets.latent_dim):
        raise CheckpointError(f"{path}: latent table has shape {lat.shape}")
    latents = {sid: torch.nn.Parameter(torch.from_numpy(lat[i].copy())) for i, sid in enumerate(ids)}
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    state = ModelState(hs, hd, latents, template, cfg, rng, int(meta["step"]), int(meta["epoch"]))
    with torch.no_grad():
        for name, p in state.named_tensors().items():
            if name.startswith("latent."):
                continue
            key = "param." + name
            if key not in arrays or tuple(arrays[key].shape) != tuple(p.shape):
                raise CheckpointError(f"{path}: parameter {name} missing or mis-shaped")
            p.copy_(torch.from_numpy(arrays[key]))
    state.optimizer = make_optimizer(state)
    for name, p in state.named_tensors().items():
        if name in meta["adam_steps"]:
            state.optimizer.state[p] = {
                "step": torch.tensor(meta["adam_steps"][name], dtype=torch.float32),
                "exp_avg": torch.from_numpy(arrays["adam.exp_avg." + name].copy()),
                "exp_avg_sq": torch.from_numpy(arrays["adam.exp_avg_sq." + name].copy()),
            }
    hist = arrays["history"]
    state.history = [{c: (int(v) if c in ("step", "epoch") else float(v)) for c, v in zip(HISTORY_COLUMNS, row)}
                     for row in hist]
    return state
