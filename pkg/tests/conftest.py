import warnings

import numpy as np
import pytest

from twoscale_lod.forms import ProblemParams, TwoScaleSpace
from twoscale_lod.interpolation import build_interpolator
from twoscale_lod.mesh import MacroDomain, UnitCell, build_structured_mesh, refine_uniform


def hierarchy(n_macro=4, n_cell=4, levels=1, cell_levels=None):
    """(coarse space, fine space, interpolator) on the default geometry."""
    cell_levels = levels if cell_levels is None else cell_levels
    G = build_structured_mesh(MacroDomain(), n_macro)
    Y = build_structured_mesh(UnitCell(), n_cell)
    coarse = TwoScaleSpace(G, Y)
    fine = TwoScaleSpace(refine_uniform(G, levels), refine_uniform(Y, cell_levels))
    return coarse, fine, build_interpolator(fine, coarse)


@pytest.fixture(scope="session")
def small():
    return hierarchy(4, 4, 1)


@pytest.fixture(scope="session")
def params():
    return ProblemParams(k=3.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(autouse=True)
def _quiet_resolution_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="resolution condition")
        yield
