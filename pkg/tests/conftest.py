import pytest

from tubespec.acceptance import Pipeline
from tubespec.config import RunConfig
from tubespec.geometry import DomainKind, DomainSpec, GradingPolicy, mesh_domain


@pytest.fixture(scope="session")
def pipeline():
    """Default-configuration pipeline shared by every heavy test."""
    return Pipeline(RunConfig())


@pytest.fixture(scope="session")
def unit_half_ball():
    return mesh_domain(DomainSpec(DomainKind.HALFBALL, R_trunc=1.0), GradingPolicy(h_far=0.05))


@pytest.fixture(scope="session")
def perturbed_01():
    spec = DomainSpec(DomainKind.PERTURBED, R0=2.0, eps=0.1)
    return mesh_domain(spec, GradingPolicy(h_far=0.1, h_junction=0.01, grading_ratio=1.3))
