import numpy as np
import pytest
import scipy.sparse as sp

from twoscale_lod import lod
from twoscale_lod.correctors import build_corrected_test_basis
from twoscale_lod.forms import FormCoefficients, ProblemParams, TwoScaleSpace
from twoscale_lod.mesh import MacroDomain, UnitCell, build_structured_mesh

from conftest import hierarchy


@pytest.fixture(scope="module")
def setup():
    coarse, fine, interp = hierarchy(4, 4, 1)
    params = ProblemParams(k=3.0)
    return interp, params, lod.solve_reference(fine, params)


def test_reference_matches_plane_wave():
    """Without a scatterer the exact solution is the incident plane wave; P1 nodal error is O(h^2)."""
    params = ProblemParams(eps_e=1.0, k=4.0)
    errors = []
    for n in (8, 16, 32):
        space = TwoScaleSpace(build_structured_mesh(MacroDomain(omega_lower=None), n),
                              build_structured_mesh(UnitCell(), 4))
        u = lod.solve_reference(space, params).solution.macro
        x = space.macro.dof_coordinates
        exact = np.exp(1j * params.k * x @ np.asarray(params.direction))
        errors.append(np.abs(u - exact).max())
    rates = np.log2(np.array(errors[:-1]) / errors[1:])
    assert errors[-1] < 5e-3
    assert np.all(rates > 1.7)


def test_reference_residual(setup):
    interp, params, ref = setup
    assert ref.residual < 1e-12
    assert np.abs(ref.solution.star @ interp.fine.star_mean).max() < 1e-12


def test_ideal_lod_orthogonality_and_quasi_optimality(setup):
    interp, params, ref = setup
    cs = build_corrected_test_basis(interp, params, None)
    sol = lod.solve_lod(interp, params, None, correctors=cs)
    orth = lod.galerkin_orthogonality_check(interp, params, ref, sol, cs)
    assert orth["max"] < 1e-10 * orth["rhs_norm"]
    err = lod.error_energy(interp, params, ref, sol)
    assert 1.0 - 1e-9 <= err["ratio"] < 1.5
    assert sol.residual < 1e-10


def test_localized_lod_approaches_ideal(setup):
    interp, params, ref = setup
    ideal = lod.solve_lod(interp, params, None).solution
    gaps = [lod.energy_norm_fine(interp, params, interp.embed(lod.solve_lod(interp, params, m).solution - ideal))
            for m in (1, 2, 3)]
    assert gaps[0] > gaps[1] > gaps[2]


def test_consistency_coarse_equals_fine():
    coarse, fine, interp = hierarchy(4, 4, 0)
    params = ProblemParams(k=2.0)
    ref = lod.solve_reference(fine, params)
    err = lod.error_energy(interp, params, ref, lod.solve_lod(interp, params, None))
    assert err["relative"] < 1e-12 and err["ratio"] == 1.0


def test_lod_beats_plain_galerkin(setup):
    interp, params, ref = setup
    plain = lod.error_energy(interp, params, ref, lod.solve_coarse_galerkin(interp, params))
    ideal = lod.error_energy(interp, params, ref, lod.solve_lod(interp, params, None))
    assert ideal["error"] <= plain["error"] * (1 + 1e-12)
    assert plain["ratio"] >= 1 - 1e-12


def test_system_dimension(setup):
    interp, params, _ = setup
    system = lod.assemble_lod(interp, params, None)
    assert system.dimension == interp.coarse.dimension
    assert system.matrix.shape[0] == interp.coarse.dimension + 2 * interp.coarse.n_x


def test_singular_system_reports_m():
    A = sp.csr_matrix((3, 3), dtype=complex)
    with pytest.raises(lod.WellPosednessError, match="m=2"):
        lod._solve_system(lod.LodSystem(A, np.ones(3, dtype=complex), 2, None, None))


def test_constraint_null_basis(rng):
    C = sp.csr_matrix(np.array([[1.0, 2.0, 0, 0, 0], [0, 0, 0, 3.0, -1.0]]))
    Z = lod.constraint_null_basis(C, 5)
    assert Z.shape == (5, 3)
    assert np.abs((C @ Z).toarray()).max() < 1e-15
    assert np.linalg.matrix_rank(Z.toarray()) == 3
    with pytest.raises(ValueError):
        lod.constraint_null_basis(sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 0.0]])), 2)


def test_infsup_dense_matches_sparse():
    coarse, fine, interp = hierarchy(4, 4, 1)
    params = ProblemParams(k=2.0)
    space = coarse
    A = space.blocks(FormCoefficients.sesquilinear(params)).full_matrix()
    G = space.blocks(FormCoefficients.energy(params)).full_matrix()
    C = lod._mean_constraint(space, A.shape[0])
    dense = lod.infsup_estimate(A, G, G, C)
    sparse = lod.infsup_estimate(A, G, G, C, dense_limit=0)
    schur = lod.infsup_estimate(A, G, G, C, dense_limit=0, lead=space.macro.dof_count)
    assert sparse == pytest.approx(dense, rel=1e-6)
    assert schur == pytest.approx(dense, rel=1e-6)
    assert 0 < dense <= 1 + 1e-12


def test_infsup_known_matrix():
    A = np.diag([3.0, 0.5, 2.0])
    assert lod.infsup_estimate(A, np.eye(3), np.eye(3)) == pytest.approx(0.5)
    G = np.diag([4.0, 4.0, 4.0])  # both norms grow by 2, so sigma drops by 4
    assert lod.infsup_estimate(A, G, G) == pytest.approx(0.125)


def test_lod_infsup_positive(setup):
    interp, params, _ = setup
    cs = build_corrected_test_basis(interp, params, 2)
    value = lod.lod_infsup(interp, params, cs)
    assert value > 0.05
    assert lod.lod_infsup(interp, params, None) > 0


def test_export_and_evaluate(setup):
    interp, params, ref = setup
    space = interp.fine
    text = lod.export_solution(ref.solution)
    assert len(text.splitlines()) == space.macro.dof_count + ref.solution.star.size + ref.solution.incl.size
    first = text.splitlines()[0].split()
    assert first[0] == "macro" and complex(float(first[2]), float(first[3])) == ref.solution.macro[0]
    xs = space.macro.dof_coordinates
    linear = 2 * xs[:, 0] - xs[:, 1]
    pts = np.array([[0.1, 0.2], [0.77, 0.33], [1.0, 1.0], [2.0, 0.0]])
    vals = lod.evaluate_macro(space, linear, pts)
    assert np.allclose(vals[:3], 2 * pts[:3, 0] - pts[:3, 1])
    assert np.isnan(vals[3])
    dump = lod.field_dump(space, ref.solution.macro, samples=5)
    blocks = [b for b in dump.strip().split("\n\n") if b]
    assert len(blocks) == 5 and all(len(b.splitlines()) == 5 for b in blocks)
