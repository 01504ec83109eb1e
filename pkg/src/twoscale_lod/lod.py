"""Petrov-Galerkin LOD system, the fine reference solve and error measures.

Coarse systems are assembled from fine bases: the trial basis is the
nodal coarse basis (prolonged to the fine meshes) and the test basis is the
corrected one. Both are component-diagonal, so the coarse matrix follows
from the fine form blocks by sparse products. One multiplier per coarse
x-triangle enforces the zero mean of the Y* component.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .correctors import CorrectorSet, build_corrected_test_basis
from .forms import (CellElimination, FormBlocks, FormCoefficients, ProblemParams, TwoScaleFunction,
                    TwoScaleSpace, flatten, rhs_vector)
from .interpolation import QuasiInterpolator, overlap_constants, resolution_slack


@dataclass
class LodSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    m: Optional[int]
    coarse: TwoScaleSpace
    correctors: Optional[CorrectorSet] = None

    @property
    def dimension(self) -> int:
        """dim V_{Hc,hc}: unknowns minus one mean constraint per coarse x-triangle."""
        return self.matrix.shape[0] - 2 * self.coarse.n_x

    def unpack(self, x: np.ndarray) -> TwoScaleFunction:
        ng, nx, n1, n2 = self.coarse.shape
        a = ng + nx * n1
        return TwoScaleFunction(x[:ng].copy(), x[ng:a].reshape(nx, n1).copy(),
                                x[a:a + nx * n2].reshape(nx, n2).copy())


@dataclass
class SolveReport:
    solution: TwoScaleFunction
    residual: float
    timings: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    system: Optional[LodSystem] = None
    space: Optional[TwoScaleSpace] = None


class WellPosednessError(fem.SolverError):
    pass


# --------------------------------------------------------------------------
# assembly


def _aggregators(interp: QuasiInterpolator, blocks: FormBlocks):
    fine = interp.fine
    agg = interp.x_embed.T.tocsr()  # (coarse x, fine x) indicator
    w = np.repeat(blocks.x_weight, 2)
    grad_sum = sp.kron(agg, sp.identity(2)) @ sp.diags(w) @ fine.grad_x
    mean_sum = agg @ sp.diags(blocks.x_on) @ fine.mean_x
    return agg, grad_sum.tocsr(), mean_sum.tocsr()


def _split(g: sp.csr_matrix):
    """Rows 2t+d of a stacked gradient matrix -> (d=0 block, d=1 block)."""
    return g[0::2], g[1::2]


def assemble_petrov_galerkin(interp: QuasiInterpolator, blocks: FormBlocks, trial: dict, test: dict,
                             with_mean_constraint: bool = True) -> sp.csr_matrix:
    """Coarse matrix with entries form(trial_j, test_i) for component-diagonal bases.

    ``trial``/``test`` map component kind to (fine dofs x coarse dofs) matrices.
    Ordering: macro, star (x-major), incl (x-major), then one mean multiplier per x-triangle.
    """
    coarse = interp.coarse
    c = blocks.coeffs
    ng, nx, n1, n2 = coarse.shape
    _, grad_sum, mean_sum = _aggregators(interp, blocks)
    TG, T1, T2 = (sp.csr_matrix(trial[k]) for k in ("macro", "star", "incl"))
    SG, S1, S2 = (sp.csr_matrix(test[k]) for k in ("macro", "star", "incl"))
    area = np.asarray(interp.x_embed.T @ blocks.x_weight).ravel()  # |coarse x-triangle| inside the region

    MM = SG.conj().T @ blocks.macro @ TG
    gS = _split((grad_sum @ SG).tocsr())
    gT = _split((grad_sum @ TG).tocsr())
    mS = (mean_sum @ SG).tocsr()
    mT = (mean_sum @ TG).tocsr()
    bT = blocks.b_star @ T1  # (2, n1c)
    bS = blocks.b_star @ S1
    dT = np.asarray(blocks.d_incl @ T2).ravel()
    dS = np.asarray(blocks.d_incl @ S2).ravel()
    bT = np.asarray(bT)
    bS = np.asarray(bS)

    MS = c.alpha_star * sum(sp.kron(gS[d].conj().T, sp.csr_matrix(bT[d][None, :])) for d in range(2))
    SM = c.alpha_star * sum(sp.kron(gT[d], sp.csr_matrix(np.conj(bS[d])[:, None])) for d in range(2))
    SS = sp.kron(sp.diags(area), c.alpha_star * (S1.conj().T @ blocks.K_star @ T1))
    MI = c.mass * sp.kron(mS.conj().T, sp.csr_matrix(dT[None, :]))
    IM = c.mass * sp.kron(mT, sp.csr_matrix(np.conj(dS)[:, None]))
    II = sp.kron(sp.diags(area), S2.conj().T @ blocks.A_incl @ T2)
    rows = [[MM, MS, MI], [SM, SS, None], [IM, None, II]]
    if with_mean_constraint:
        cmean = np.asarray(interp.fine.star_mean @ interp.prolong_star).ravel()
        C = sp.kron(sp.identity(nx), sp.csr_matrix(cmean[None, :]))
        rows[0].append(None)
        rows[1].append(C.T)
        rows[2].append(None)
        rows.append([None, C, None, None])
    return sp.bmat(rows, format="csr").astype(complex)


def form_against_basis(interp: QuasiInterpolator, blocks: FormBlocks, u: TwoScaleFunction,
                       test: dict) -> np.ndarray:
    """Vector of form(u, test_i) for a fine triple u and a component-diagonal coarse test basis."""
    f = blocks.matvec(u)
    agg = interp.x_embed.T
    SG, S1, S2 = (sp.csr_matrix(test[k]) for k in ("macro", "star", "incl"))
    bm = SG.conj().T @ f.macro
    bs = np.asarray(agg @ (S1.conj().T @ f.star.T).T)
    bi = np.asarray(agg @ (S2.conj().T @ f.incl.T).T)
    return np.concatenate([bm, bs.ravel(), bi.ravel()])


def nodal_basis(interp: QuasiInterpolator) -> dict:
    return {k: interp.prolongation(k).tocsr() for k in ("macro", "star", "incl")}


def corrected_basis(correctors: CorrectorSet) -> dict:
    return {k: correctors.test_basis(k) for k in ("macro", "star", "incl")}


def assemble_lod(interp: QuasiInterpolator, params: ProblemParams,
                 correctors: Optional[CorrectorSet]) -> LodSystem:
    """LOD system; ``correctors=None`` gives the plain coarse Galerkin system."""
    blocks = interp.fine.blocks(FormCoefficients.sesquilinear(params))
    trial = nodal_basis(interp)
    test = trial if correctors is None else corrected_basis(correctors)
    A = assemble_petrov_galerkin(interp, blocks, trial, test)
    r = rhs_vector(interp.fine, params).macro
    b = np.zeros(A.shape[0], dtype=complex)
    b[:interp.coarse.macro.dof_count] = test["macro"].conj().T @ r
    return LodSystem(A, b, None if correctors is None else correctors.m, interp.coarse, correctors)


def _solve_system(system: LodSystem) -> tuple:
    try:
        x = fem.solve_sparse(system.matrix, system.rhs)
    except fem.SolverError as exc:
        raise WellPosednessError(
            f"coarse system could not be solved ({exc}); the oversampling parameter m={system.m} "
            "is probably too small for this wave number, increase m", **exc.diagnostics) from exc
    bn = np.linalg.norm(system.rhs)
    res = float(np.linalg.norm(system.matrix @ x - system.rhs) / bn) if bn > 0 else 0.0
    return x, res


def solve_lod(interp: QuasiInterpolator, params: ProblemParams, m: Optional[int],
              correctors: Optional[CorrectorSet] = None, threads: int = 1,
              check_resolution: bool = True) -> SolveReport:
    """Petrov-Galerkin LOD solve (``m=None``: idealized correctors)."""
    timings = {}
    t0 = time.perf_counter()
    if correctors is None:
        correctors = build_corrected_test_basis(interp, params, m, threads=threads,
                                                check_resolution=check_resolution)
    timings["correctors"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    system = assemble_lod(interp, params, correctors)
    timings["assembly"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    x, res = _solve_system(system)
    timings["solve"] = time.perf_counter() - t0
    diag = {"m": m, "dimension": system.dimension}
    if m is not None:
        ol = overlap_constants(interp.coarse, m)
        diag.update(overlap_G=ol["G"], overlap_Y=ol["Y"])
    if check_resolution:
        diag["resolution_slack"] = resolution_slack(interp, params)
    return SolveReport(system.unpack(x), res, timings, diag, system, interp.coarse)


def solve_coarse_galerkin(interp: QuasiInterpolator, params: ProblemParams) -> SolveReport:
    t0 = time.perf_counter()
    system = assemble_lod(interp, params, None)
    x, res = _solve_system(system)
    return SolveReport(system.unpack(x), res, {"solve": time.perf_counter() - t0},
                       {"dimension": system.dimension}, system, interp.coarse)


def solve_reference(space: TwoScaleSpace, params: ProblemParams) -> SolveReport:
    """Direct Galerkin solve on the fine two-scale space (cells condensed out)."""
    t0 = time.perf_counter()
    blocks = space.blocks(FormCoefficients.sesquilinear(params))
    elim = CellElimination(blocks)
    r = rhs_vector(space, params)
    macro = fem.solve_sparse(elim.condensed, r.macro)
    u = elim.reconstruct(macro)
    f = blocks.matvec(u) - r
    rn = np.linalg.norm(r.macro)
    res = float(np.linalg.norm(flatten(f)) / rn) if rn > 0 else 0.0
    return SolveReport(u, res, {"solve": time.perf_counter() - t0}, {"dimension": space.dimension},
                       None, space)


# --------------------------------------------------------------------------
# errors and diagnostics


def _energy_blocks(interp: QuasiInterpolator, params: ProblemParams) -> FormBlocks:
    return interp.fine.blocks(FormCoefficients.energy(params))


def energy_norm_fine(interp, params, v: TwoScaleFunction) -> float:
    return float(np.sqrt(max(_energy_blocks(interp, params).apply(v, v).real, 0.0)))


def best_approximation(interp: QuasiInterpolator, params: ProblemParams,
                       u: TwoScaleFunction) -> TwoScaleFunction:
    """Energy-orthogonal projection of a fine triple onto the coarse space."""
    blocks = _energy_blocks(interp, params)
    basis = nodal_basis(interp)
    G = assemble_petrov_galerkin(interp, blocks, basis, basis)
    b = np.zeros(G.shape[0], dtype=complex)
    rhs = form_against_basis(interp, blocks, u, basis)
    b[:len(rhs)] = rhs
    x = fem.solve_sparse(G, b)
    ng, nx, n1, n2 = interp.coarse.shape
    a = ng + nx * n1
    return TwoScaleFunction(x[:ng], x[ng:a].reshape(nx, n1), x[a:a + nx * n2].reshape(nx, n2))


def error_energy(interp: QuasiInterpolator, params: ProblemParams, ref: SolveReport,
                 lod: SolveReport) -> dict:
    """Energy error of the LOD solution, the best-approximation error and their ratio."""
    blocks = _energy_blocks(interp, params)
    u = ref.solution

    def norm(v):
        return float(np.sqrt(max(blocks.apply(v, v).real, 0.0)))

    err = norm(u - interp.embed(lod.solution))
    best = norm(u - interp.embed(best_approximation(interp, params, u)))
    unorm = norm(u)
    noise = 1e-10 * max(unorm, 1e-300)
    if best > noise:
        ratio = err / best
    else:  # coarse space already contains u up to round-off
        ratio = 1.0 if err <= noise else float("inf")
    return {"error": err, "best": best, "ratio": ratio, "relative": err / unorm if unorm else 0.0,
            "reference_norm": unorm}


def galerkin_orthogonality_check(interp: QuasiInterpolator, params: ProblemParams, ref: SolveReport,
                                  lod: SolveReport, correctors: CorrectorSet) -> dict:
    """max_i |B(u_ref - u_lod, (1 - Q_m) lambda_i)| and the load norm used to scale it."""
    blocks = interp.fine.blocks(FormCoefficients.sesquilinear(params))
    e = ref.solution - interp.embed(lod.solution)
    vals = form_against_basis(interp, blocks, e, corrected_basis(correctors))
    rhs = rhs_vector(interp.fine, params).macro
    return {"max": float(np.abs(vals).max()), "rhs_norm": float(np.linalg.norm(rhs))}


def constraint_null_basis(C, n: int) -> sp.csr_matrix:
    """Sparse basis of {x : C x = 0} for constraint rows with disjoint supports."""
    if C is None or C.shape[0] == 0:
        return sp.identity(n, format="csr")
    C = sp.csr_matrix(C)
    pivots = np.empty(C.shape[0], dtype=np.int64)
    for r in range(C.shape[0]):
        cols = C.indices[C.indptr[r]:C.indptr[r + 1]]
        vals = C.data[C.indptr[r]:C.indptr[r + 1]]
        pivots[r] = cols[np.argmax(np.abs(vals))]
    if np.abs(C[:, pivots] - sp.diags(C[np.arange(C.shape[0]), pivots].A1)).max() > 0:
        raise ValueError("constraint rows must have disjoint supports")
    free = np.setdiff1d(np.arange(n), pivots)
    position = np.full(n, -1, dtype=np.int64)
    position[free] = np.arange(len(free))
    Z = sp.lil_matrix((n, len(free)), dtype=C.dtype)
    Z[free, np.arange(len(free))] = 1.0
    Z = Z.tocsr()
    coo = C.tocoo()
    piv_val = np.asarray(C[np.arange(C.shape[0]), pivots]).ravel()
    keep = coo.col != pivots[coo.row]
    extra = sp.csr_matrix((-coo.data[keep] / piv_val[coo.row[keep]],
                           (pivots[coo.row[keep]], position[coo.col[keep]])), shape=Z.shape)
    return (Z + extra).tocsr()


class _SchurFactor:
    """Solver for [[M_mm, M_mc], [M_cm, M_cc]] with a dense Schur complement on the leading block.

    Meant for two-scale matrices whose trailing (cell) block is block
    diagonal, so it factors without fill, while the leading (macro) block
    couples to many cell blocks and would fill a global sparse LU.
    """

    def __init__(self, M, lead: int, chunk: int = 64):
        M = sp.csr_matrix(M).astype(complex)
        self.lead = lead
        mm = M[:lead, :lead].toarray()
        self.mc = M[:lead, lead:].tocsr()
        self.cm = M[lead:, :lead].tocsc()
        self.cc = spla.splu(M[lead:, lead:].tocsc())
        for s in range(0, lead, chunk):
            cols = self.cm[:, s:s + chunk].toarray()
            mm[:, s:s + chunk] -= self.mc @ self.cc.solve(cols)
        self.schur = sla.lu_factor(mm)

    def solve(self, b, trans: str = "N"):
        b = np.asarray(b, dtype=complex)
        bm, bc = b[:self.lead], b[self.lead:]
        if trans == "N":
            xm = sla.lu_solve(self.schur, bm - self.mc @ self.cc.solve(bc))
            xc = self.cc.solve(bc - self.cm @ xm)
        else:  # conjugate transpose: blocks swap roles and the Schur complement is S^H
            xm = sla.lu_solve(self.schur, bm - self.cm.conj().T @ self.cc.solve(bc, trans="H"), trans=2)
            xc = self.cc.solve(bc - self.mc.conj().T @ xm, trans="H")
        return np.concatenate([xm, xc])


def infsup_estimate(A, gram_trial, gram_test, constraint=None, dense_limit: int = 2500,
                    lead: Optional[int] = None) -> float:
    """Smallest singular value of A in the energy geometry of trial and test spaces.

    ``constraint`` rows (zero means) restrict both spaces to their null
    space, where the Gram matrices are positive definite. Small systems use
    a dense SVD; larger ones a generalized Lanczos iteration for the
    largest eigenvalue of Gt x = mu A^H Gs^-1 A x, with sigma_min = mu^-1/2.
    With ``lead`` (number of leading macro unknowns, which the constraint
    must not touch) the factorizations go through a dense macro Schur
    complement instead of a global sparse LU.
    """
    n = A.shape[1]
    Z = constraint_null_basis(constraint, n)
    Az = (Z.conj().T @ sp.csr_matrix(A) @ Z).astype(complex)
    Gt = (Z.conj().T @ sp.csr_matrix(gram_trial) @ Z).astype(complex)
    Gs = (Z.conj().T @ sp.csr_matrix(gram_test) @ Z).astype(complex)
    Gt = (Gt + Gt.conj().T) / 2
    Gs = (Gs + Gs.conj().T) / 2
    if Az.shape[0] <= dense_limit:
        try:
            Lt = np.linalg.cholesky(Gt.toarray())
            Ls = np.linalg.cholesky(Gs.toarray())
        except np.linalg.LinAlgError as exc:
            raise fem.ConfigurationError("Gram matrix is not positive definite") from exc
        M = sla.solve_triangular(Ls, Az.toarray(), lower=True)
        M = sla.solve_triangular(Lt.conj(), M.T, lower=True).T  # M Lt^{-H}
        return float(sla.svdvals(M).min())
    if lead is not None:
        luA, luG = _SchurFactor(Az, lead), _SchurFactor(Gs, lead)
    else:
        luA, luG = spla.splu(Az.tocsc()), spla.splu(Gs.tocsc())
    m = Az.shape[0]
    K = spla.LinearOperator((m, m), matvec=lambda x: Az.conj().T @ luG.solve(Az @ x), dtype=complex)
    Kinv = spla.LinearOperator((m, m), matvec=lambda x: luA.solve(Gs @ luA.solve(x, trans="H")),
                               dtype=complex)
    mu = spla.eigsh(Gt, k=1, M=K, Minv=Kinv, which="LM", return_eigenvectors=False, tol=1e-8)
    if not mu[0] > 0:
        raise fem.ConfigurationError("Gram matrix is not positive definite")
    return float(1 / np.sqrt(mu[0]))


def lod_infsup(interp: QuasiInterpolator, params: ProblemParams,
               correctors: Optional[CorrectorSet]) -> float:
    """Discrete inf-sup constant of the LOD (or plain coarse) system."""
    energy = _energy_blocks(interp, params)
    sesq = interp.fine.blocks(FormCoefficients.sesquilinear(params))
    trial = nodal_basis(interp)
    test = trial if correctors is None else corrected_basis(correctors)
    A = assemble_petrov_galerkin(interp, sesq, trial, test, with_mean_constraint=False)
    Gt = assemble_petrov_galerkin(interp, energy, trial, trial, with_mean_constraint=False)
    Gs = assemble_petrov_galerkin(interp, energy, test, test, with_mean_constraint=False)
    return infsup_estimate(A, Gt, Gs, _mean_constraint(interp.coarse, A.shape[0]),
                           lead=interp.coarse.macro.dof_count)


def reference_infsup(space: TwoScaleSpace, params: ProblemParams) -> float:
    """Discrete inf-sup constant of the fine reference system (small spaces only)."""
    A = space.blocks(FormCoefficients.sesquilinear(params)).full_matrix()
    G = space.blocks(FormCoefficients.energy(params)).full_matrix()
    return infsup_estimate(A, G, G, _mean_constraint(space, A.shape[0]))


def _mean_constraint(space: TwoScaleSpace, n: int) -> sp.csr_matrix:
    ng, nx, n1, n2 = space.shape
    C = sp.kron(sp.identity(nx), sp.csr_matrix(space.star_mean[None, :]))
    return sp.hstack([sp.csr_matrix((nx, ng)), C, sp.csr_matrix((nx, nx * n2))]).tocsr()


# --------------------------------------------------------------------------
# export


def export_solution(u: TwoScaleFunction) -> str:
    """Lines 'macro i re im', 'star t i re im', 'incl t i re im'."""
    lines = [f"macro {i} {float(z.real)!r} {float(z.imag)!r}" for i, z in enumerate(u.macro)]
    for name, arr in (("star", u.star), ("incl", u.incl)):
        for t, row in enumerate(arr):
            lines.extend(f"{name} {t} {i} {float(z.real)!r} {float(z.imag)!r}" for i, z in enumerate(row))
    return "\n".join(lines) + "\n"


def evaluate_macro(space: TwoScaleSpace, values: np.ndarray, points: np.ndarray,
                   chunk: int = 128) -> np.ndarray:
    """Point values of the macro component (P1 on the macro mesh)."""
    mesh = space.macro_mesh
    corners = mesh.vertices[mesh.triangles]
    jac = np.stack([corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]], axis=2)
    inv = np.linalg.inv(jac)
    d = space.macro.vertex_to_dof[mesh.triangles]
    out = np.full(len(points), np.nan, dtype=complex)
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk]
        lam = np.einsum("tij,ptj->pti", inv, p[:, None, :] - corners[None, :, 0])
        bary = np.concatenate([1 - lam.sum(axis=2, keepdims=True), lam], axis=2)
        inside = (bary >= -1e-12).all(axis=2)
        t = np.argmax(inside, axis=1)
        found = inside[np.arange(len(p)), t]
        b = bary[np.arange(len(p)), t]
        out[s:s + chunk] = np.where(found, (b * values[d[t]]).sum(axis=1), np.nan)
    return out


def field_dump(space: TwoScaleSpace, values: np.ndarray, samples: int = 41) -> str:
    """Grid samples 'x y re im' of the macro component, blank line between rows (gnuplot)."""
    mesh = space.macro_mesh
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    xs = np.linspace(lo[0], hi[0], samples)
    ys = np.linspace(lo[1], hi[1], samples)
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    u = evaluate_macro(space, values, pts).reshape(samples, samples)
    lines = []
    for j in range(samples):
        for i in range(samples):
            lines.append(f"{xs[i]:.6g} {ys[j]:.6g} {u[j, i].real:.10g} {u[j, i].imag:.10g}")
        lines.append("")
    return "\n".join(lines)
