import numpy as np
import pytest
import scipy.sparse as sp

from twoscale_lod import fem
from twoscale_lod.mesh import INCLUSION, MATRIX, MacroDomain, Triangulation2D, UnitCell, build_structured_mesh, refine_uniform


def reference_triangle():
    return Triangulation2D(vertices=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                           triangles=np.array([[0, 1, 2]]), labels=np.array([0]),
                           boundary_edges=np.array([[0, 1], [1, 2], [2, 0]]),
                           boundary_owner=np.array([0, 0, 0]), periodic_map=None,
                           refinement_parent=None, separate_subdomains=False, lower=0.0, period=1.0)


def test_reference_element_matrices():
    T = reference_triangle()
    d = fem.build_dofmap(T)
    K = fem.assemble_stiffness(T, d).toarray()
    assert np.allclose(K, [[1, -0.5, -0.5], [-0.5, 0.5, 0], [-0.5, 0, 0.5]])
    M = fem.assemble_mass(T, d).toarray()
    assert np.allclose(M, np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 24)
    Kc = fem.assemble_stiffness(T, d, 2 - 3j).toarray()
    assert np.allclose(Kc, (2 - 3j) * K)


def test_dof_counts():
    G = build_structured_mesh(MacroDomain(omega_lower=None), 2)
    assert fem.build_dofmap(G).dof_count == 13
    Y = build_structured_mesh(UnitCell(), 4)
    assert fem.build_dofmap(Y, fem.PERIODIC).dof_count == 32
    # Y* carries every torus vertex outside the open inclusion
    assert fem.build_dofmap(Y, fem.PERIODIC, MATRIX).dof_count == 32 - 5
    # zero trace on D = [-1/4, 1/4]^2 with h = 1/4: interior grid vertex and 4 cell centres
    assert fem.build_dofmap(Y, fem.ZERO_TRACE, INCLUSION).dof_count == 5
    with pytest.raises(fem.ConfigurationError):
        fem.build_dofmap(G, fem.PERIODIC)


def test_global_identities():
    G = build_structured_mesh(MacroDomain(), 4)
    d = fem.build_dofmap(G)
    K = fem.assemble_stiffness(G, d)
    assert np.abs(K @ np.ones(d.dof_count)).max() < 1e-12
    assert np.isclose(fem.assemble_mass(G, d).sum(), 1.0)
    assert np.isclose(fem.assemble_boundary_mass(G, d).sum(), 4.0)
    assert abs(K - K.T).max() < 1e-14
    # a linear function x has energy |G| = 1
    x = d.dof_coordinates[:, 0]
    assert np.isclose(x @ K @ x, 1.0)
    # subdomain weight zero gives no contribution there
    Mo = fem.assemble_mass(G, d, {0: 0.0, 1: 1.0})
    assert np.isclose(Mo.sum(), 0.25)


def test_boundary_selectors():
    G = build_structured_mesh(MacroDomain(omega_lower=None), 2)
    d = fem.build_dofmap(G)
    assert fem.assemble_boundary_mass(G, d, np.zeros(G.n_triangles, bool)).nnz == 0
    one = np.zeros(len(G.boundary_edges), bool)
    one[0] = True
    B = fem.assemble_boundary_mass(G, d, one).toarray()
    e = G.boundary_edges[0]
    h = np.linalg.norm(G.vertices[e[1]] - G.vertices[e[0]])
    i, j = d.vertex_to_dof[e]
    assert np.allclose(B[np.ix_([i, j], [i, j])], h / 6 * np.array([[2, 1], [1, 2]]))
    left = fem.assemble_boundary_mass(G, d, lambda mid: np.isclose(mid[:, 0], 0.0))
    assert np.isclose(left.sum(), 1.0)


def test_periodic_stiffness_kernel():
    Y = build_structured_mesh(UnitCell(), 4)
    d = fem.build_dofmap(Y, fem.PERIODIC)
    K = fem.assemble_stiffness(Y, d).toarray()
    w = np.linalg.eigvalsh(K)
    assert np.sum(np.abs(w) < 1e-10) == 1  # torus: constants only


def test_integral_operators():
    G = build_structured_mesh(MacroDomain(), 4)
    d = fem.build_dofmap(G)
    x, y = d.dof_coordinates.T
    tris = G.triangles_with_label(1)
    g = fem.gradient_operator(G, d, tris) @ (2 * x - y)
    assert np.allclose(g.reshape(-1, 2), [2, -1])
    means = fem.mean_operator(G, d, tris) @ x
    assert np.allclose(means, np.abs(G.areas[tris]) * G.centroids[tris, 0])
    gi = fem.gradient_integrals(G, d, tris) @ x
    assert np.allclose(gi, [0.25, 0.0])


def test_prolongation_exact_on_linear():
    G = build_structured_mesh(MacroDomain(), 4)
    F = refine_uniform(G, 2)
    dc, df = fem.build_dofmap(G), fem.build_dofmap(F)
    P = fem.prolongation(dc, df)
    f = lambda p: 1 + 2 * p[:, 0] - 3 * p[:, 1]
    assert np.allclose(P @ f(dc.dof_coordinates), f(df.dof_coordinates))
    assert np.allclose(P.sum(axis=1), 1)
    with pytest.raises(fem.ConfigurationError):
        fem.prolongation(dc, dc)


def test_solve_sparse():
    b = np.arange(1.0, 6.0)
    assert np.allclose(fem.solve_sparse(sp.identity(5), b), b)
    assert np.allclose(fem.solve_sparse(sp.diags(np.full(5, 2j)), np.ones(5)), np.ones(5) / 2j)
    rng = np.random.default_rng(3)
    A = sp.random(50, 50, density=0.1, random_state=4) + sp.random(50, 50, density=0.1, random_state=5) * 1j
    A = A + 10 * sp.identity(50)
    b = rng.standard_normal(50) + 1j * rng.standard_normal(50)
    x = fem.solve_sparse(A, b)
    assert np.linalg.norm(A @ x - b) < 1e-10 * np.linalg.norm(b)
    with pytest.raises(fem.SolverError) as err:
        fem.solve_sparse(sp.csr_matrix((3, 3)), np.ones(3))
    assert "shape" in err.value.diagnostics


def test_export_text():
    A = sp.csr_matrix(np.array([[1 + 2j, 0], [0, -0.5]]))
    text = fem.export_coordinate_text(A).splitlines()
    assert text[0] == "2 2 2"
    r, c, re, im = text[1].split()
    assert (int(r), int(c), float(re), float(im)) == (0, 0, 1.0, 2.0)
