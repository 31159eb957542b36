import numpy as np
import pytest

from gjet.genfun import ParallelBeam, PointSourcePlane, QuadraticOT


@pytest.fixture
def qot2():
    return QuadraticOT(2)


@pytest.fixture
def pb2():
    return ParallelBeam(2)


@pytest.fixture
def pb1():
    return ParallelBeam(1)


@pytest.fixture
def ps0():
    return PointSourcePlane(2, tau=0.0)


@pytest.fixture
def ps_neg():
    return PointSourcePlane(2, tau=-1.0)


def sample_admissible(gf, rng, x_box, y_box, z_fracs=(0.25, 0.5, 0.75)):
    """One admissible (x, y, z) triple drawn from boxes (rejection-sampled)."""
    from gjet.conditions import _map_fraction

    for _ in range(200):
        x = x_box[0] + rng.random(gf.dimension) * (x_box[1] - x_box[0])
        y = y_box[0] + rng.random(gf.dimension) * (y_box[1] - y_box[0])
        if not gf.admissible_pair(x, y):
            continue
        lo, hi = gf.z_interval(x, y)
        f = z_fracs[rng.integers(len(z_fracs))]
        return x, y, _map_fraction(lo, hi, f)
    raise RuntimeError("could not sample an admissible point")


def instance_boxes(gf):
    """Sampling boxes that keep every instance comfortably admissible."""
    n = gf.dimension
    if gf.name == "point_source":
        return (np.full(n, -0.6), np.full(n, 0.6)), \
               (np.full(n, -0.8), np.full(n, 0.8))
    return (np.full(n, -0.7), np.full(n, 0.7)), \
           (np.full(n, -0.9), np.full(n, 0.9))
