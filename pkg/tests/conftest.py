import numpy as np
import pytest

from cavfield import config as config_mod
from cavfield import geometry

BASE_CONFIG = """
nx = 32
ny = 32
"""


@pytest.fixture(scope="session")
def small_setup():
    """32x32 default problem, shared read-only across tests."""
    cfg = config_mod.parse_config(BASE_CONFIG)
    return config_mod.build_setup(cfg)


@pytest.fixture(scope="session")
def small_cfg(small_setup):
    return small_setup.config


@pytest.fixture()
def unit_mesh_16():
    return geometry.build_structured_mesh(16, 16)


@pytest.fixture()
def default_region_spec():
    cfg = config_mod.SolverConfig()
    return geometry.RegionSpec(omega1=cfg.omega1, omega2=cfg.omega2,
                               sigma_side=cfg.sigma_side, sigma_span=cfg.sigma_span)


def random_phase_field(mesh, labels, rng, lo=0.0, hi=1.0):
    v = rng.uniform(lo, hi, mesh.num_nodes)
    v[labels.omega1_nodes] = 1.0
    return v
