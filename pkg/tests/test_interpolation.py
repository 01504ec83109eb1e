import numpy as np
import pytest
import scipy.sparse as sp

from twoscale_lod import fem
from twoscale_lod.forms import ProblemParams
from twoscale_lod.interpolation import build_interpolator, component_interpolation, resolution_slack
from twoscale_lod.mesh import MacroDomain, build_structured_mesh, refine_uniform

from conftest import hierarchy

KINDS = ("macro", "star", "incl")


def oswald_oracle(coarse_map, fine_map, values):
    """Quadrature-based reference: L2 projection per coarse triangle, then plain averaging."""
    cm, fm = coarse_map.mesh, fine_map.mesh
    full = np.zeros(fm.n_vertices)
    full[fine_map.dof_vertex] = values
    if fm.periodic_map is not None:
        full = full[fine_map.dof_vertex[fine_map.vertex_to_dof]] * (fine_map.vertex_to_dof >= 0)
    acc = np.zeros(coarse_map.dof_count)
    cnt = np.zeros(coarse_map.dof_count)
    for T in coarse_map.triangles:
        P = cm.vertices[cm.triangles[T]]
        J = np.column_stack([P[1] - P[0], P[2] - P[0]])
        area = abs(np.linalg.det(J)) / 2
        M = area / 12 * (np.ones((3, 3)) + np.eye(3))
        b = np.zeros(3)
        for t in np.flatnonzero(fm.refinement_parent == T):
            Q = fm.vertices[fm.triangles[t]]
            vt = full[fm.triangles[t]]
            a = abs(np.linalg.det(np.column_stack([Q[1] - Q[0], Q[2] - Q[0]]))) / 2
            for i, j in ((0, 1), (1, 2), (2, 0)):  # edge midpoints: exact for quadratics
                x = (Q[i] + Q[j]) / 2
                lam = np.linalg.solve(J, x - P[0])
                phi = np.array([1 - lam.sum(), lam[0], lam[1]])
                b += a / 3 * phi * (vt[i] + vt[j]) / 2
        c = np.linalg.solve(M, b)
        for loc, d in enumerate(coarse_map.vertex_to_dof[cm.triangles[T]]):
            if d >= 0:
                acc[d] += c[loc]
                cnt[d] += 1
    return acc / cnt


def test_matches_quadrature_oracle(rng):
    G = build_structured_mesh(MacroDomain(), 4)
    Gf = refine_uniform(G, 2)
    cmap, fmap = fem.build_dofmap(G), fem.build_dofmap(Gf)
    I = component_interpolation(cmap, fmap)
    v = rng.standard_normal(fmap.dof_count)
    assert np.allclose(I @ v, oswald_oracle(cmap, fmap, v), atol=1e-12)


def test_projection_property(small, rng):
    coarse, fine, interp = small
    u = coarse.random(rng)
    back = interp.apply(interp.embed(u))
    assert (back - u).max_abs() < 1e-12
    for kind in KINDS:
        IP = (interp.component(kind) @ interp.prolongation(kind)).toarray()
        assert np.allclose(IP, np.eye(IP.shape[0]), atol=1e-12)
    assert np.allclose((interp.x_average @ interp.x_embed).toarray(), np.eye(coarse.n_x))


def test_x_average_preserves_constants(small):
    coarse, fine, interp = small
    assert np.allclose(interp.x_average @ np.ones(fine.n_x), 1.0)
    assert np.all(np.diff(interp.x_average.tocsc().indptr) == 1)  # one parent per fine x-triangle


def test_kernel(small, rng):
    coarse, fine, interp = small
    w = interp.random_kernel_function(rng)
    assert interp.apply(w).max_abs() < 1e-12
    ngf, nxf, n1f, n2f = fine.shape
    ngc, nxc, n1c, n2c = coarse.shape
    assert interp.kernel_dimension() == ngf + nxf * (n1f + n2f) - (ngc + nxc * (n1c + n2c))


def test_inclusion_boundary_carries_nothing(small):
    coarse, fine, interp = small
    assert interp.incl.shape == (coarse.incl.dof_count, fine.incl.dof_count)
    assert interp.incl.shape[0] == 5


def test_rejects_unrelated_meshes():
    G = build_structured_mesh(MacroDomain(), 4)
    with pytest.raises(fem.ConfigurationError):
        component_interpolation(fem.build_dofmap(G), fem.build_dofmap(G))


@pytest.mark.parametrize("kind", KINDS)
def test_local_constants(small, kind):
    coarse, fine, interp = small
    c = interp.measure_constants(kind)
    assert c.shape == (interp.coarse_dofmap(kind).triangles.size,)
    # measured values: about 1.03 (macro), 1.0 (star), 0.81 (incl)
    assert 0.5 < c.max() < 1.5
    assert interp.measured_constant(kind) == pytest.approx(c.max())


def test_energy_stability(small, rng):
    coarse, fine, interp = small
    ratio = interp.energy_stability(ProblemParams(k=2.0), rng)
    assert 0.5 < ratio < 3.0


def test_resolution_slack_linear_in_k(small):
    coarse, fine, interp = small
    s = [resolution_slack(interp, ProblemParams(k=k)) for k in (1.0, 2.0, 3.0)]
    assert np.isclose(s[0] - s[1], s[1] - s[2])
    assert s[0] > s[1] > s[2]
    assert resolution_slack(interp, ProblemParams(k=100.0)) < 0
