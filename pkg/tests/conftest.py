import types

import numpy as np
import pytest
import torch

from volcorr.config import RunConfig
from volcorr.sampling import build_shape_record
from volcorr.synthetic import deformed_family

torch.set_num_threads(1)


def small_config() -> RunConfig:
    cfg = RunConfig()
    cfg.sampling.n_volume = 1500
    cfg.sampling.n_surface = 200
    cfg.sampling.n_off_surface = 300
    cfg.nets.hidden = 16
    cfg.nets.hidden_layers = 2
    cfg.nets.latent_dim = 8
    cfg.nets.hyper_hidden = 16
    cfg.loss.n_surface = 64
    cfg.loss.n_sdr = 64
    cfg.train.learning_rate = 1e-3
    cfg.train.epochs = 2
    cfg.train.batch_shapes = 2
    cfg.infer.map_steps = 15
    cfg.infer.chamfer_steps = 15
    cfg.infer.n_points = 64
    return cfg


@pytest.fixture
def cfg():
    return small_config()


@pytest.fixture(scope="session")
def family():
    """Template plus four registered deformed spheres (subdivision 2)."""
    cfg = small_config()
    tm, shapes = deformed_family(4, seed=3, subdivisions=2)
    template = build_shape_record(tm, None, cfg.sampling, seed=0, shape_id="template")
    recs = [build_shape_record(m, template, cfg.sampling, seed=i + 1, shape_id=f"s{i}")
            for i, m in enumerate(shapes)]
    return template, recs


class TranslationHyper(torch.nn.Module):
    """Deformation 'hypernet' whose field is the constant translation alpha[:3]."""

    def __init__(self, latent_dim=3):
        super().__init__()
        from volcorr.nets import MlpSpec
        self.target = MlpSpec((3, 2, 3), "relu")
        self.latent_dim = latent_dim
        self.dummy = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))

    def forward(self, alpha):
        lead = alpha.shape[:-1]
        W0 = torch.zeros(*lead, 2, 3, dtype=torch.float64)
        b0 = torch.zeros(*lead, 2, dtype=torch.float64)
        W1 = torch.zeros(*lead, 3, 2, dtype=torch.float64)
        return [(W0, b0), (W1, alpha[..., :3] + 0.0 * self.dummy)]


def translation_state(template_points):
    """Minimal stand-in for a trained model: template points plus a translation field."""
    from volcorr.geometry import SurfaceSamples
    tmpl = types.SimpleNamespace(surface=SurfaceSamples(np.asarray(template_points, dtype=np.float64)))
    return types.SimpleNamespace(template=tmpl, hyper_d=TranslationHyper(), hyper_s=TranslationHyper(),
                                 config=RunConfig())


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
