"""Target MLPs, their input Jacobians, and the hypernetworks that emit them.

Target-network parameters are plain tensors, a list of ``(W, b)`` per layer
with ``W`` shaped ``(..., out, in)``; a leading batch dimension holds one
network per shape.  Input Jacobians are propagated forward alongside the
activations, so any loss built from outputs and Jacobians stays
differentiable by autograd with respect to parameters and latents.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .config import NetConfig

DTYPE = torch.float64

Params = list  # list[tuple[torch.Tensor, torch.Tensor]]


class NonFiniteError(FloatingPointError):
    def __init__(self, term: str, detail: str = ""):
        super().__init__(f"non-finite value in {term}" + (f" ({detail})" if detail else ""))
        self.term = term


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple
    activation: str = "sine"
    omega0: float = 30.0
    dropout_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        if self.activation not in ("sine", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def layer_shapes(self) -> list:
        s = self.layer_sizes
        return [(s[i + 1], s[i]) for i in range(len(s) - 1)]

    @property
    def layer_param_counts(self) -> list:
        return [o * i + o for o, i in self.layer_shapes]

    @property
    def n_params(self) -> int:
        return sum(self.layer_param_counts)

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activation": self.activation,
                "omega0": self.omega0, "dropout_rate": self.dropout_rate}


def sdf_spec(cfg: NetConfig) -> MlpSpec:
    return MlpSpec((3,) + (cfg.hidden,) * cfg.hidden_layers + (1,), "sine", cfg.omega0, cfg.dropout)


def deform_spec(cfg: NetConfig) -> MlpSpec:
    return MlpSpec((3,) + (cfg.hidden,) * cfg.hidden_layers + (3,), "relu", cfg.omega0, cfg.dropout)


# ---------------------------------------------------------------------------
# Target networks

def _activate(spec: MlpSpec, z):
    if spec.activation == "sine":
        return torch.sin(spec.omega0 * z), spec.omega0 * torch.cos(spec.omega0 * z)
    return torch.relu(z), (z > 0).to(z.dtype)


def mlp_forward(params: Params, spec: MlpSpec, x, dropout_masks=None,
                jacobian: bool = False, trace: list | None = None):
    """Evaluate the MLP at points ``x`` of shape ``(..., N, 3)``.

    Returns ``y`` of shape ``(..., N, O)``, plus the input Jacobian
    ``(..., N, O, 3)`` when ``jacobian`` is set.  ``dropout_masks`` holds one
    pre-scaled mask per hidden layer.  ``trace`` collects detached hidden
    pre-activations (used to detect ReLU kinks).
    """
    if len(params) != len(spec.layer_shapes):
        raise ValueError("parameter list does not match the spec")
    if x.shape[-1] != spec.n_in:
        raise ValueError(f"expected {spec.n_in}-dimensional input, got {x.shape[-1]}")
    h = x
    T = None
    last = len(params) - 1
    for k, (W, b) in enumerate(params):
        z = h @ W.transpose(-1, -2) + b.unsqueeze(-2)
        if jacobian:
            if T is None:
                Tz = W.unsqueeze(-3).expand(*z.shape, W.shape[-1])
            else:
                Tz = torch.einsum("...oi,...nij->...noj", W, T)
        if k == last:
            return (z, Tz) if jacobian else z
        if trace is not None:
            trace.append(z.detach())
        h, dh = _activate(spec, z)
        if jacobian:
            T = dh.unsqueeze(-1) * Tz
        if dropout_masks is not None:
            m = dropout_masks[k]
            h = h * m
            if jacobian:
                T = T * m.unsqueeze(-1)


def mlp_input_jacobian(params: Params, spec: MlpSpec, x):
    return mlp_forward(params, spec, x, jacobian=True)[1]


def dropout_masks(spec: MlpSpec, lead_shape: Sequence[int], rng: np.random.Generator):
    """Inverted-dropout masks for every hidden layer, drawn from a numpy generator."""
    p = spec.dropout_rate
    if p == 0.0:
        return None
    masks = []
    for width in spec.layer_sizes[1:-1]:
        keep = rng.random(tuple(lead_shape) + (width,)) >= p
        masks.append(torch.from_numpy(keep / (1.0 - p)))
    return masks


def grad_scalar_loss(params: Params, spec: MlpSpec, x,
                     loss: Callable, wrt_x: bool = False):
    """Gradients of ``loss(y, J)`` with respect to every parameter (and ``x``).

    ``loss`` receives outputs ``(N, O)`` and Jacobians ``(N, O, 3)``; terms
    built on ``J`` are differentiated through the Jacobian computation.
    Returns ``(value, [(dW, db), ...], dx or None)``.
    """
    leaves = [(W.detach().clone().requires_grad_(True), b.detach().clone().requires_grad_(True))
              for W, b in params]
    xin = torch.as_tensor(x, dtype=DTYPE).detach().clone().requires_grad_(wrt_x)
    y, J = mlp_forward(leaves, spec, xin, jacobian=True)
    value = loss(y, J)
    if not torch.isfinite(value):
        raise NonFiniteError("loss", f"value {float(value.detach())}")
    flat = [t for pair in leaves for t in pair] + ([xin] if wrt_x else [])
    grads = torch.autograd.grad(value, flat, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for g, t in zip(grads, flat)]
    for i, g in enumerate(grads):
        if not torch.isfinite(g).all():
            raise NonFiniteError("gradient", f"tensor {i}")
    pairs = [(grads[2 * i], grads[2 * i + 1]) for i in range(len(leaves))]
    return value.detach(), pairs, (grads[-1] if wrt_x else None)


def init_mlp(spec: MlpSpec, seed: int = 0, relu_out_scale: float = 1e-2) -> Params:
    """SIREN-style init for sine nets, fan-in uniform for ReLU nets.

    The output layer of a ReLU net is shrunk by ``relu_out_scale`` so a fresh
    deformation field starts close to the identity map.
    """
    g = torch.Generator().manual_seed(int(seed))
    params = []
    last = len(spec.layer_shapes) - 1
    for k, (o, i) in enumerate(spec.layer_shapes):
        if spec.activation == "sine":
            bound = 1.0 / i if k == 0 else math.sqrt(6.0 / i) / spec.omega0
        else:
            bound = math.sqrt(6.0 / i)
        W = (torch.rand(o, i, generator=g, dtype=DTYPE) * 2 - 1) * bound
        b = (torch.rand(o, generator=g, dtype=DTYPE) * 2 - 1) / math.sqrt(i)
        if spec.activation == "relu" and k == last:
            W, b = W * relu_out_scale, b * relu_out_scale
        params.append((W, b))
    return params


def flatten_params(params: Params) -> torch.Tensor:
    return torch.cat([torch.cat([W.reshape(*W.shape[:-2], -1), b], dim=-1) for W, b in params], dim=-1)


def unflatten_params(spec: MlpSpec, flat) -> Params:
    out = []
    lead = flat.shape[:-1]
    offset = 0
    for o, i in spec.layer_shapes:
        W = flat[..., offset:offset + o * i].reshape(*lead, o, i)
        offset += o * i
        b = flat[..., offset:offset + o]
        offset += o
        out.append((W, b))
    return out


# ---------------------------------------------------------------------------
# Hypernetworks

class HyperNet(nn.Module):
    """One ReLU MLP block per target layer, latent -> that layer's weights and bias.

    Final block layers start with weights scaled by ``out_scale`` and biases
    equal to a reference target-net init, so a fresh hypernet emits nearly
    that init for any small latent.
    """

    def __init__(self, target: MlpSpec, latent_dim: int, hidden: int = 64, layers: int = 1,
                 out_scale: float = 1e-2, seed: int = 0):
        super().__init__()
        self.target = target
        self.latent_dim = int(latent_dim)
        self.hidden = int(hidden)
        self.layers = int(layers)
        g = torch.Generator().manual_seed(int(seed))
        reference = init_mlp(target, seed=int(torch.randint(2**31, (1,), generator=g)))
        blocks = []
        for (W0, b0), count in zip(reference, target.layer_param_counts):
            sizes = [self.latent_dim] + [self.hidden] * self.layers + [count]
            mods = []
            for j in range(len(sizes) - 1):
                lin = nn.Linear(sizes[j], sizes[j + 1], dtype=DTYPE)
                fan_in = sizes[j]
                with torch.no_grad():
                    bound = math.sqrt(6.0 / fan_in)
                    lin.weight.copy_((torch.rand(lin.weight.shape, generator=g, dtype=DTYPE) * 2 - 1) * bound)
                    if j == len(sizes) - 2:
                        lin.weight.mul_(out_scale)
                        lin.bias.copy_(torch.cat([W0.reshape(-1), b0]))
                    else:
                        lin.bias.copy_((torch.rand(lin.bias.shape, generator=g, dtype=DTYPE) * 2 - 1) / math.sqrt(fan_in))
                mods.append(lin)
                if j < len(sizes) - 2:
                    mods.append(nn.ReLU())
            blocks.append(nn.Sequential(*mods))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, alpha) -> Params:
        if alpha.shape[-1] != self.latent_dim:
            raise ValueError(f"latent has dimension {alpha.shape[-1]}, expected {self.latent_dim}")
        out = []
        for block, (o, i) in zip(self.blocks, self.target.layer_shapes):
            flat = block(alpha)
            out.append((flat[..., :o * i].reshape(*flat.shape[:-1], o, i), flat[..., o * i:]))
        return out

    def config(self) -> dict:
        return {"target": self.target.to_dict(), "latent_dim": self.latent_dim,
                "hidden": self.hidden, "layers": self.layers}


def hypernet_forward(h: HyperNet, alpha) -> Params:
    return h(torch.as_tensor(alpha, dtype=DTYPE))


def build_hypernets(cfg: NetConfig, seed: int = 0) -> tuple[HyperNet, HyperNet]:
    """Independent Hyper-S (SDF) and Hyper-D (deformation) networks."""
    hs = HyperNet(sdf_spec(cfg), cfg.latent_dim, cfg.hyper_hidden, cfg.hyper_layers,
                  cfg.hyper_out_scale, seed=2 * seed + 1)
    hd = HyperNet(deform_spec(cfg), cfg.latent_dim, cfg.hyper_hidden, cfg.hyper_layers,
                  cfg.hyper_out_scale, seed=2 * seed + 2)
    return hs, hd
