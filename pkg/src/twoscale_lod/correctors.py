"""Localized subscale correctors and the corrected test basis.

Correctors are computed per component. The macro corrector of a coarse
macro basis function only sees the macro block of B, with the cell weights
of the whole cell; the cell correctors act in y only. With constant
parameters a cell corrector of chi_T (x) lambda_y is chi_T (x) Q(lambda_y),
so each cell corrector is solved once and reused for every x-triangle.

The corrector sits in the second (conjugated) slot of B. Since every block
of B is complex symmetric, B(w, Q) = B_T(w, lam) for all kernel w becomes
A conj(Q) = A_T lam on the kernel, which is what gets solved.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .forms import FormCoefficients, ProblemParams
from .interpolation import QuasiInterpolator, resolution_slack
from .mesh import OMEGA, patch

KINDS = ("macro", "star", "incl")
IDEAL_SIZE_LIMIT = 200_000


class CorrectorError(RuntimeError):
    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class ResolutionWarning(UserWarning):
    pass


class ComponentProblem:
    """Fine operator, element matrices and coarse/fine maps of one component."""

    def __init__(self, interp: QuasiInterpolator, params: ProblemParams, kind: str):
        if kind not in KINDS:
            raise ValueError(f"unknown component {kind!r}")
        self.kind = kind
        self.interp = interp
        self.params = params
        fine = interp.fine
        self.cmap = interp.coarse_dofmap(kind)
        self.fmap = interp.fine_dofmap(kind)
        self.cmesh = self.cmap.mesh
        self.fmesh = self.fmap.mesh
        self.I = interp.component(kind).tocsr()
        self.P = interp.prolongation(kind).tocsc()
        c = FormCoefficients.sesquilinear(params)
        fm = self.fmesh
        K = fem.element_stiffness(fm)
        M = fem.element_mass(fm)
        if kind == "macro":
            cell = fine.cell_mesh
            r_star = fine.measure_star
            r_all = float(np.abs(cell.areas).sum())
            inside = (fm.labels == OMEGA)[:, None, None]
            local = (np.where(inside, c.alpha_star * r_star, c.alpha_out * r_all) * K
                     + c.mass * r_all * M).astype(complex)
            # Robin edges, attributed to the owning triangle
            edges = fm.boundary_edges
            owner = fm.boundary_owner
            length = np.linalg.norm(fm.vertices[edges[:, 1]] - fm.vertices[edges[:, 0]], axis=1)
            tri = fm.triangles[owner]
            ia = np.argmax(tri == edges[:, :1], axis=1)
            ib = np.argmax(tri == edges[:, 1:], axis=1)
            w = c.robin * r_all * length / 6.0
            for (p, q, f) in ((ia, ia, 2), (ib, ib, 2), (ia, ib, 1), (ib, ia, 1)):
                np.add.at(local, (owner, p, q), f * w)
        elif kind == "star":
            local = (c.alpha_star * K).astype(complex)
        else:
            local = (c.alpha_incl * K + c.mass * M).astype(complex)
        self.local = local
        tris = self.fmap.triangles
        ld = self.fmap.local_dofs
        vals = local[tris]
        R = np.broadcast_to(ld[:, :, None], vals.shape)
        C = np.broadcast_to(ld[:, None, :], vals.shape)
        keep = (R >= 0) & (C >= 0)
        n = self.fmap.dof_count
        self.A = sp.csr_matrix((vals[keep], (R[keep], C[keep])), shape=(n, n))
        self.parent = fm.refinement_parent[tris]
        # number of space triangles around each fine dof
        self.star_count = np.bincount(ld[ld >= 0], minlength=n)

    def seeds(self) -> np.ndarray:
        """Coarse triangles that need correctors."""
        return self.cmap.triangles

    def patch_dofs(self, coarse_members: np.ndarray) -> tuple:
        """(fine triangle positions in the space, fine dofs whose whole star is in the patch)."""
        inside = np.isin(self.parent, coarse_members)
        ld = self.fmap.local_dofs[inside]
        count = np.bincount(ld[ld >= 0], minlength=self.fmap.dof_count)
        dofs = np.flatnonzero((count == self.star_count) & (count > 0))
        return np.flatnonzero(inside), dofs

    def element_load(self, T: int) -> tuple:
        """(coarse dofs of T, fine vectors A_T P e_a as dense columns)."""
        cd = self.cmap.vertex_to_dof[self.cmesh.triangles[T]]
        cd = cd[cd >= 0]
        pos = np.flatnonzero(self.parent == T)
        tris = self.fmap.triangles[pos]
        ld = self.fmap.local_dofs[pos]
        vals = self.local[tris]
        R = np.broadcast_to(ld[:, :, None], vals.shape)
        C = np.broadcast_to(ld[:, None, :], vals.shape)
        keep = (R >= 0) & (C >= 0)
        n = self.fmap.dof_count
        AT = sp.csr_matrix((vals[keep], (R[keep], C[keep])), shape=(n, n))
        return cd, (AT @ self.P[:, cd]).toarray()

    def solve(self, T: int, members: np.ndarray, load: Optional[np.ndarray] = None):
        """Correctors of the coarse basis functions of T on the patch ``members``.

        Returns (coarse dofs, fine dofs, values (n_dofs, n_basis)), values are the
        corrections themselves (already conjugated back).
        """
        cd, rhs = self.element_load(T)
        if load is not None:
            rhs = load
        _, dofs = self.patch_dofs(members)
        if len(dofs) == 0 or rhs.shape[1] == 0:
            return cd, dofs, np.zeros((len(dofs), rhs.shape[1]), dtype=complex)
        C = self.I[:, dofs]
        C = C[np.flatnonzero(np.diff(C.indptr) > 0)].toarray()
        C = _independent_rows(C)
        App = self.A[dofs][:, dofs]
        nc = C.shape[0]
        K = sp.bmat([[App, sp.csr_matrix(C.T)], [sp.csr_matrix(C), None]], format="csc")
        b = np.zeros((len(dofs) + nc, rhs.shape[1]), dtype=complex)
        b[:len(dofs)] = rhs[dofs]
        try:
            lu = spla.splu(K)
        except RuntimeError as exc:
            raise CorrectorError("singular corrector saddle point system", kind=self.kind, seed=int(T),
                                 patch_size=len(members), patch_dofs=len(dofs), constraints=nc) from exc
        x = lu.solve(b)
        if not np.all(np.isfinite(x)):
            raise CorrectorError("corrector solve produced non-finite values", kind=self.kind, seed=int(T))
        return cd, dofs, np.conj(x[:len(dofs)])


def _independent_rows(C: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    if C.shape[0] == 0:
        return C
    _, R, piv = sla.qr(C.T, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    r = int((d > tol * d[0]).sum()) if d.size else 0
    return C[np.sort(piv[:r])]


@dataclass
class CorrectorRecord:
    kind: str
    seed: int
    basis: int  # coarse dof index
    patch: np.ndarray  # coarse triangles
    dofs: np.ndarray  # fine dofs
    values: np.ndarray  # complex correction values


@dataclass
class CorrectorSet:
    m: int
    records: list
    shapes: dict  # kind -> (n_fine, n_coarse)
    prolongations: dict = field(default_factory=dict, repr=False)

    def correction(self, kind: str) -> sp.csr_matrix:
        """Q_m on component ``kind`` as a (fine x coarse) matrix."""
        nf, nc = self.shapes[kind]
        rows, cols, vals = [], [], []
        for r in self.records:
            if r.kind == kind:
                rows.append(r.dofs)
                cols.append(np.full(len(r.dofs), r.basis))
                vals.append(r.values)
        if not rows:
            return sp.csr_matrix((nf, nc), dtype=complex)
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(nf, nc))

    def test_basis(self, kind: str) -> sp.csr_matrix:
        """(1 - Q_m) applied to the coarse nodal basis, as a (fine x coarse) matrix."""
        return (self.prolongations[kind].astype(complex) - self.correction(kind)).tocsr()

    @property
    def count(self) -> dict:
        return {kind: len({r.seed for r in self.records if r.kind == kind}) for kind in KINDS}


def _patch_members(prob: ComponentProblem, T: int, m: Optional[int]) -> np.ndarray:
    if m is None:
        return prob.cmap.triangles
    members = patch(prob.cmesh, [T], m).member_triangles
    return members[prob.cmap.triangle_mask[members]]


def solve_corrector_patch(interp: QuasiInterpolator, params: ProblemParams, kind: str, seed: int,
                          m: int, problem: Optional[ComponentProblem] = None) -> tuple:
    """Correctors on N^m(seed) of the coarse basis functions of the seed.

    Returns (coarse dofs, fine dofs, values), one column per coarse dof.
    """
    prob = problem or ComponentProblem(interp, params, kind)
    return prob.solve(seed, _patch_members(prob, seed, m))


def solve_corrector_ideal(interp: QuasiInterpolator, params: ProblemParams, kind: str, seed: int,
                          problem: Optional[ComponentProblem] = None, size_limit: int = IDEAL_SIZE_LIMIT):
    prob = problem or ComponentProblem(interp, params, kind)
    if prob.fmap.dof_count > size_limit:
        raise CorrectorError(f"idealized corrector needs {prob.fmap.dof_count} unknowns "
                             f"(limit {size_limit}); use solve_corrector_patch with finite m",
                             kind=kind, dofs=prob.fmap.dof_count)
    return prob.solve(seed, _patch_members(prob, seed, None))


def as_two_scale(interp: QuasiInterpolator, kind: str, dofs, values, x_index: Optional[int] = None):
    """Fine triple carrying one corrector (cell correctors placed at x-triangle ``x_index``)."""
    f = interp.fine.zeros()
    if kind == "macro":
        f.macro[dofs] = values
    else:
        rows = range(interp.fine.n_x) if x_index is None else [x_index]
        target = f.star if kind == "star" else f.incl
        for r in rows:
            target[r, dofs] = values
    return f


def build_corrected_test_basis(interp: QuasiInterpolator, params: ProblemParams, m: Optional[int],
                               threads: int = 1, check_resolution: bool = True) -> CorrectorSet:
    """Localized correctors of every coarse basis function (``m=None``: idealized)."""
    if check_resolution:
        slack = resolution_slack(interp, params)
        if slack < 0:
            warnings.warn(f"resolution condition for the correctors is violated (slack {slack:.3g}); "
                          "refine the coarse meshes or lower k", ResolutionWarning, stacklevel=2)
    records = []
    shapes, prolong = {}, {}
    for kind in KINDS:
        prob = ComponentProblem(interp, params, kind)
        shapes[kind] = (prob.fmap.dof_count, prob.cmap.dof_count)
        prolong[kind] = interp.prolongation(kind).tocsr()
        if kind != "macro" and interp.coarse.n_x == 0:
            continue
        if m is None and prob.fmap.dof_count > IDEAL_SIZE_LIMIT:
            raise CorrectorError("idealized correctors exceed the size guard", kind=kind)
        seeds = prob.seeds()

        def work(T, prob=prob):
            return prob.solve(T, _patch_members(prob, T, m))

        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                results = list(pool.map(work, seeds))
        else:
            results = [work(T) for T in seeds]
        for T, (cd, dofs, vals) in zip(seeds, results):
            members = _patch_members(prob, T, m)
            for j, a in enumerate(cd):
                records.append(CorrectorRecord(kind, int(T), int(a), members, dofs, vals[:, j]))
    return CorrectorSet(m=-1 if m is None else m, records=records, shapes=shapes, prolongations=prolong)


# --------------------------------------------------------------------------
# decay


def _component_seminorm_matrix(prob: ComponentProblem, fine_positions: np.ndarray) -> sp.csr_matrix:
    """Gradient Gram matrix of the component restricted to some of its fine triangles."""
    fm = prob.fmesh
    space = prob.interp.fine
    tris = prob.fmap.triangles[fine_positions]
    weight = space.measure_star if prob.kind == "macro" else 1.0
    return weight * fem.assemble_stiffness(fm, prob.fmap, 1.0, tris)


def corrector_decay_profile(interp: QuasiInterpolator, params: ProblemParams, kind: str, seed: int,
                            m_max: int, basis: Optional[int] = None, coefficients=None) -> list:
    """Rows (m, tail, localization error), relative to ||v||_{1,e,T x S}.

    ``tail`` is the seminorm of the idealized corrector outside N^m(seed);
    ``localization error`` is the seminorm of Q_inf v - Q_m v. The coarse
    function v restricted to the seed is either one basis function (local
    index ``basis``) or the combination ``coefficients`` of the seed's basis.
    """
    prob = ComponentProblem(interp, params, kind)
    cd, dofs_inf, vals_inf = solve_corrector_ideal(interp, params, kind, seed, problem=prob)
    if coefficients is None:
        coefficients = np.zeros(len(cd))
        coefficients[0 if basis is None else basis] = 1.0
    coefficients = np.asarray(coefficients)
    n = prob.fmap.dof_count
    q_inf = np.zeros(n, dtype=complex)
    q_inf[dofs_inf] = vals_inf @ coefficients
    # seminorm of v on the seed
    on_seed = np.flatnonzero(prob.parent == seed)
    Kseed = _component_seminorm_matrix(prob, on_seed)
    v = prob.P[:, cd] @ coefficients
    vnorm = np.sqrt(abs(np.vdot(v, Kseed @ v)))
    Kall = _component_seminorm_matrix(prob, np.arange(len(prob.fmap.triangles)))
    rows = []
    for mm in range(m_max + 1):
        members = _patch_members(prob, seed, mm)
        outside = np.flatnonzero(~np.isin(prob.parent, members))
        Kout = _component_seminorm_matrix(prob, outside)
        tail = np.sqrt(abs(np.vdot(q_inf, Kout @ q_inf)))
        _, dofs, vals = prob.solve(seed, members)
        qm = np.zeros(n, dtype=complex)
        qm[dofs] = vals @ coefficients
        d = q_inf - qm
        loc = np.sqrt(abs(np.vdot(d, Kall @ d)))
        rows.append((mm, float(tail / vnorm), float(loc / vnorm)))
    return rows


def fit_decay(values, ms=None, floor: float = 1e-13) -> tuple:
    """Least-squares fit log(value) = a + m log(beta); returns (beta, R^2).

    Values at or below ``floor`` (saturated patches) are dropped.
    """
    values = np.asarray(values, dtype=float)
    ms = np.arange(len(values)) if ms is None else np.asarray(ms, dtype=float)
    keep = values > floor
    x, y = ms[keep], np.log(values[keep])
    if len(x) < 2:
        return float("nan"), float("nan")
    slope, intercept = np.polyfit(x, y, 1)
    pred = intercept + slope * x
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(np.exp(slope)), r2


# --------------------------------------------------------------------------
# text serialization


def write_correctors(cs: CorrectorSet) -> str:
    lines = [f"correctors {cs.m} {len(cs.records)}"]
    for kind in KINDS:
        nf, nc = cs.shapes[kind]
        lines.append(f"shape {kind} {nf} {nc}")
    for r in cs.records:
        lines.append(f"record {r.kind} {r.seed} {r.basis} {len(r.patch)} {len(r.dofs)}")
        lines.append("patch " + " ".join(map(str, r.patch)))
        lines.extend(f"{d} {float(v.real)!r} {float(v.imag)!r}" for d, v in zip(r.dofs, r.values))
    return "\n".join(lines) + "\n"


def read_correctors(text: str, interp: Optional[QuasiInterpolator] = None) -> CorrectorSet:
    it = iter(text.splitlines())
    head = next(it).split()
    if head[0] != "correctors":
        raise ValueError("not a corrector file")
    m, count = int(head[1]), int(head[2])
    shapes = {}
    for _ in KINDS:
        _, kind, nf, nc = next(it).split()
        shapes[kind] = (int(nf), int(nc))
    records = []
    for _ in range(count):
        _, kind, seed, basis, npatch, ndofs = next(it).split()
        patch_line = next(it).split()[1:]
        dofs = np.empty(int(ndofs), dtype=np.int64)
        vals = np.empty(int(ndofs), dtype=complex)
        for i in range(int(ndofs)):
            d, re, im = next(it).split()
            dofs[i] = int(d)
            vals[i] = complex(float(re), float(im))
        records.append(CorrectorRecord(kind, int(seed), int(basis),
                                       np.array(patch_line, dtype=np.int64), dofs, vals))
    prolong = {}
    if interp is not None:
        prolong = {kind: interp.prolongation(kind).tocsr() for kind in KINDS}
    return CorrectorSet(m=m, records=records, shapes=shapes, prolongations=prolong)
