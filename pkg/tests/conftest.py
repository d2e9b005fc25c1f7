from pathlib import Path

import numpy as np
import pytest

from confsearch.energy import EnergyModel
from confsearch.molmodel import generate_alkane, generate_star, load_molecule

DATA = Path(__file__).resolve().parents[1] / "data"


def dihedral(p0, p1, p2, p3) -> float:
    """Signed dihedral angle p0-p1-p2-p3 in degrees."""
    b0 = -(p1 - p0)
    b1 = (p2 - p1) / np.linalg.norm(p2 - p1)
    b2 = p3 - p2
    v = b0 - np.dot(b0, b1) * b1
    w = b2 - np.dot(b2, b1) * b1
    return float(np.degrees(np.arctan2(np.dot(np.cross(b1, v), w), np.dot(v, w))))


@pytest.fixture(scope="session")
def ethane():
    return generate_alkane(2)


@pytest.fixture(scope="session")
def butane():
    return generate_alkane(4)


@pytest.fixture(scope="session")
def pentane():
    return generate_alkane(5)


@pytest.fixture(scope="session")
def hexane():
    return generate_alkane(6)


@pytest.fixture(scope="session")
def decane():
    return generate_alkane(10)


@pytest.fixture(scope="session")
def star():
    """Hub carbon with four ethyl arms: four torsions, all on the hub."""
    return generate_star(n_arms=4, arm_carbons=2)


@pytest.fixture(scope="session")
def spider():
    return generate_star(n_arms=4, arm_carbons=3)


@pytest.fixture(scope="session")
def hinge():
    return load_molecule(DATA / "hinge.spec")


@pytest.fixture
def model_of():
    def make(spec, **kwargs):
        return EnergyModel(spec, **kwargs)

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
