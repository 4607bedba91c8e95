import os
import sys

import hypothesis
import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'sensor_placement'))

from config import RunConfig
from forward_bae import ForwardModel
from mesh_fem import build_box_mesh, regular_sensor_grid
from prior import make_m_prior, make_xi_prior

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=100, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fast"))


def small_run(**overrides) -> RunConfig:
    """Run settings for quick tests: coarse mesh, 3x3 sensors, few samples"""
    values = dict(nx=4, ny=4, nz=2, sensors_per_side=3, sensor_margin=0.2, sigma=1e-2,
                  n_mc=20, n_d=2, n_tr=4, n_v=3, K=2, seed=11, validation_seed=13,
                  workers=1, output_dir='unused')
    values.update(overrides)
    return RunConfig(**values)


@pytest.fixture(scope='session')
def run_cfg():
    return small_run()


@pytest.fixture(scope='session')
def mesh():
    return build_box_mesh(4, 4, 2)


@pytest.fixture(scope='session')
def tiny_mesh():
    return build_box_mesh(3, 3, 1)


@pytest.fixture(scope='session')
def sensors(mesh):
    return regular_sensor_grid(mesh, per_side=3, margin=0.2)


@pytest.fixture(scope='session')
def m_prior(mesh, run_cfg):
    return make_m_prior(mesh, run_cfg)


@pytest.fixture(scope='session')
def xi_prior(mesh, run_cfg):
    return make_xi_prior(mesh, run_cfg)


@pytest.fixture(scope='session')
def forward(mesh, sensors, m_prior, xi_prior, run_cfg):
    return ForwardModel(mesh, sensors, m_prior, xi_prior, sigma=run_cfg.sigma)
