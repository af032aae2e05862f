"""Run configuration: nested dataclasses with strict JSON round-tripping."""
from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field

TERMS = ("sdf", "surf", "sdr", "smooth", "vol")


class ConfigError(ValueError):
    pass


@dataclass
class SamplingConfig:
    n_volume: int = 20_000
    n_surface: int = 2_000
    n_off_surface: int = 4_000
    noise_stddevs: tuple[float, float] = (0.05, 0.005)
    zeta: float = 0.1
    max_rounds: int = 50


@dataclass
class NetConfig:
    hidden: int = 64
    hidden_layers: int = 4
    latent_dim: int = 32
    omega0: float = 30.0
    dropout: float = 0.2
    hyper_hidden: int = 64
    hyper_layers: int = 1
    hyper_out_scale: float = 1e-2


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 500.0
    lambda3: float = 50.0
    lambda4: float = 5.0
    lambda5: float = 20.0
    mask: dict = field(default_factory=lambda: {t: True for t in TERMS})

    def weight(self, term: str) -> float:
        if not self.mask.get(term, True):
            return 0.0
        return getattr(self, "lambda%d" % (TERMS.index(term) + 1))

    def enabled(self, term: str) -> bool:
        return self.weight(term) != 0.0


@dataclass
class LossConfig:
    eta: float = 0.1
    C: float = 100.0
    n_surface: int = 256
    n_sdr: int = 512
    rbf_k: int = 8
    epsilon0: float = 1e-2
    literal_volume: bool = False


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 30
    batch_shapes: int = 4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    latent_init_std: float = 0.01
    checkpoint_every: int = 1


@dataclass
class InferConfig:
    map_steps: int = 300
    chamfer_steps: int = 300
    learning_rate: float = 1e-3
    latent_init: str = "mean"  # "zero" or "mean" of the training latents
    latent_prior_weight: float = 1e-4
    use_sdf: bool = True
    use_sdr: bool = True
    chamfer: bool = True
    n_points: int = 512
    seed: int = 0


@dataclass
class RunConfig:
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    nets: NetConfig = field(default_factory=NetConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    ablation: str = "full"
    seed: int = 0

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _from_dict(cls, data, "config")

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(data)


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _from_dict(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _from_dict(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        elif name == "mask":
            bad = set(value) - set(TERMS)
            if bad:
                raise ConfigError(f"{where}.mask: unknown terms {sorted(bad)}")
            kwargs[name] = {t: bool(value.get(t, True)) for t in TERMS}
        else:
            kwargs[name] = value
    return cls(**kwargs)


# Training-time and test-time term sets of the ablation study; "wo_opt" skips
# the Chamfer refinement stage.
ABLATIONS = {
    "full": (TERMS, ("sdf", "sdr"), True),
    "wo_sdfnet": (("surf", "sdr", "smooth", "vol"), ("sdr",), True),
    "wo_lsurf": (("sdr", "smooth", "vol"), ("sdf", "sdr"), True),
    "tr_te_wo_lsdr": (("sdf", "surf", "smooth", "vol"), ("sdf",), True),
    "te_wo_lsdr": (TERMS, ("sdf",), True),
    "wo_field_regul": (("sdf", "surf"), ("sdf",), True),
    "wo_opt": (TERMS, ("sdf", "sdr"), False),
}


def apply_ablation(cfg: RunConfig, name: str) -> RunConfig:
    """Return a copy of ``cfg`` with the named ablation's loss masks applied."""
    # accept spellings like "Te W/O L_SDR" for te_wo_lsdr
    loose = {re.sub(r"[^a-z0-9]", "", k): k for k in ABLATIONS}
    key = loose.get(re.sub(r"[^a-z0-9]", "", name.lower()))
    if key is None:
        raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    train_terms, test_terms, chamfer = ABLATIONS[key]
    out = RunConfig.from_dict(cfg.to_dict())
    out.weights.mask = {t: t in train_terms for t in TERMS}
    out.infer.use_sdf = "sdf" in test_terms
    out.infer.use_sdr = "sdr" in test_terms
    out.infer.chamfer = chamfer
    out.ablation = key
    return out
