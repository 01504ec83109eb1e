"""Two-scale spaces, the sesquilinear form B and the two-scale norms.

A discrete two-scale function is a triple ``(v, v1, v2)``: a P1 function on
the macro mesh, and per macro triangle of Omega (the x-partition) a
periodic P1 function on Y* and a P1 function on D with zero trace.

Every form handled here has the shape

    alpha_star (grad v + grad_y v1, grad psi + grad_y psi1)_{(w n Omega) x (R n Y*)}
  + alpha_out  (grad v, grad psi)_{w \\ Omega}  * |R| (or |R n Y*|)
  + alpha_incl (grad_y v2, grad_y psi2)_{w x (R n D)}
  + mass       (v + chi_D v2, psi + chi_D psi2)_{w x R}
  + robin      (v, psi)_{dG n dw} * |R|

for a region ``w x R`` of G x Y, so B, the energy inner product and the
H1-type inner product share one implementation (:class:`FormBlocks`).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .mesh import INCLUSION, MATRIX, OMEGA, Patch, Triangulation2D

# 4-point Gauss-Legendre rule on [0, 1]
_GL_X, _GL_W = np.polynomial.legendre.leggauss(4)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


def plane_wave_datum(k: float, direction=(1.0, 0.0)) -> Callable:
    """Robin datum dn(u_inc) - i k u_inc of the incoming wave exp(i k d.x)."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)

    def g(x, normal):
        return 1j * k * (normal @ d - 1.0) * np.exp(1j * k * (x @ d))

    return g


def constant_datum(value: complex = 1.0) -> Callable:
    def g(x, normal):
        return np.full(len(x), value, dtype=complex)

    return g


@dataclass(frozen=True)
class ProblemParams:
    eps_e: complex = 1.0
    eps_i: complex = 0.1 + 0.01j
    k: float = 4.0
    g: Optional[Callable] = None  # g(points, outward_normals); default plane wave
    direction: tuple = (1.0, 0.0)
    q: int = 3

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("wave number must be positive")
        if not self.c_min > 0:
            raise ValueError("need Re(1/eps_e) > 0 and Re(1/eps_i) > 0")

    @property
    def c_min(self) -> float:
        return float(min(1.0, np.real(1 / self.eps_e), np.real(1 / self.eps_i)))

    @property
    def datum(self) -> Callable:
        return self.g if self.g is not None else plane_wave_datum(self.k, self.direction)

    def with_k(self, k: float) -> "ProblemParams":
        return replace(self, k=k)


@dataclass(frozen=True)
class FormCoefficients:
    alpha_star: complex
    alpha_out: complex
    alpha_incl: complex
    mass: complex
    robin: complex
    out_weight_star_only: bool = False  # weight of the G\Omega gradient: |R n Y*| instead of |R|

    @classmethod
    def sesquilinear(cls, params: ProblemParams) -> "FormCoefficients":
        return cls(alpha_star=1 / params.eps_e, alpha_out=1.0, alpha_incl=1 / params.eps_i,
                   mass=-params.k ** 2, robin=-1j * params.k)

    @classmethod
    def energy(cls, params: ProblemParams) -> "FormCoefficients":
        return cls(1.0, 1.0, 1.0, params.k ** 2, 0.0, out_weight_star_only=True)

    @classmethod
    def h1e(cls) -> "FormCoefficients":
        return cls(1.0, 1.0, 1.0, 0.0, 0.0, out_weight_star_only=True)


@dataclass
class TwoScaleFunction:
    """Coefficients of a triple; ``star``/``incl`` hold one row per x-partition triangle."""

    macro: np.ndarray
    star: np.ndarray
    incl: np.ndarray

    def __add__(self, other):
        return TwoScaleFunction(self.macro + other.macro, self.star + other.star, self.incl + other.incl)

    def __sub__(self, other):
        return TwoScaleFunction(self.macro - other.macro, self.star - other.star, self.incl - other.incl)

    def __mul__(self, c):
        return TwoScaleFunction(c * self.macro, c * self.star, c * self.incl)

    __rmul__ = __mul__

    def conj(self):
        return TwoScaleFunction(np.conj(self.macro), np.conj(self.star), np.conj(self.incl))

    def copy(self):
        return TwoScaleFunction(self.macro.copy(), self.star.copy(), self.incl.copy())

    def max_abs(self) -> float:
        return float(max(np.abs(self.macro).max(initial=0), np.abs(self.star).max(initial=0),
                         np.abs(self.incl).max(initial=0)))


class TwoScaleSpace:
    """V_H x L2(Omega; V_h(Y*)) x L2(Omega; V_h(D)), piecewise constant in x on Omega."""

    def __init__(self, macro_mesh: Triangulation2D, cell_mesh: Triangulation2D):
        if not cell_mesh.is_periodic:
            raise fem.ConfigurationError("cell mesh must be periodic")
        self.macro_mesh = macro_mesh
        self.cell_mesh = cell_mesh
        self.macro = fem.build_dofmap(macro_mesh, fem.FREE)
        self.star = fem.build_dofmap(cell_mesh, fem.PERIODIC, MATRIX)
        self.incl = fem.build_dofmap(cell_mesh, fem.ZERO_TRACE, INCLUSION)
        self.x_partition = macro_mesh.triangles_with_label(OMEGA)

    @property
    def n_x(self) -> int:
        return len(self.x_partition)

    @property
    def shape(self):
        return self.macro.dof_count, self.n_x, self.star.dof_count, self.incl.dof_count

    @property
    def dimension(self) -> int:
        """Dimension with the zero-mean condition on the Y* components."""
        ng, nx, n1, n2 = self.shape
        return ng + nx * (n1 - 1 + n2)

    @cached_property
    def x_areas(self) -> np.ndarray:
        return np.abs(self.macro_mesh.areas[self.x_partition])

    @cached_property
    def star_mean(self) -> np.ndarray:
        return fem.integrals(self.cell_mesh, self.star)

    @cached_property
    def measure_star(self) -> float:
        return float(np.abs(self.cell_mesh.areas[self.star.triangles]).sum())

    @cached_property
    def measure_incl(self) -> float:
        return float(np.abs(self.cell_mesh.areas[self.incl.triangles]).sum())

    @cached_property
    def grad_x(self) -> sp.csr_matrix:
        return fem.gradient_operator(self.macro_mesh, self.macro, self.x_partition)

    @cached_property
    def mean_x(self) -> sp.csr_matrix:
        return fem.mean_operator(self.macro_mesh, self.macro, self.x_partition)

    def zeros(self, dtype=complex) -> TwoScaleFunction:
        ng, nx, n1, n2 = self.shape
        return TwoScaleFunction(np.zeros(ng, dtype), np.zeros((nx, n1), dtype), np.zeros((nx, n2), dtype))

    def random(self, rng: np.random.Generator) -> TwoScaleFunction:
        ng, nx, n1, n2 = self.shape

        def draw(*shape):
            return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)

        return TwoScaleFunction(draw(ng), draw(nx, n1), draw(nx, n2))

    def macro_function(self, values) -> TwoScaleFunction:
        f = self.zeros()
        f.macro[:] = values
        return f

    def check(self, v: TwoScaleFunction):
        ng, nx, n1, n2 = self.shape
        if v.macro.shape != (ng,) or v.star.shape != (nx, n1) or v.incl.shape != (nx, n2):
            raise ValueError(f"function shapes {v.macro.shape}, {v.star.shape}, {v.incl.shape} "
                             f"do not match space {(ng, nx, n1, n2)}")

    # ---------------------------------------------------------------- regions

    def _root_index(self, mesh: Triangulation2D) -> np.ndarray:
        if mesh.refinement_parent is None:
            return np.arange(mesh.n_triangles)
        return mesh.refinement_parent

    def region(self, macro_patch=None, cell_patch=None) -> "Region":
        """Region from patches on the (coarse) meshes this space was refined from.

        ``cell_patch`` may be a Patch or a pair of Patches (Y* part, D part).
        """
        macro_mask = cell_mask = None
        if macro_patch is not None:
            macro_mask = np.isin(self._root_index(self.macro_mesh), _members(macro_patch))
        if cell_patch is not None:
            cell_mask = np.isin(self._root_index(self.cell_mesh), _members(cell_patch))
        return Region(macro_mask, cell_mask)

    def blocks(self, coeffs: FormCoefficients, region: Optional["Region"] = None) -> "FormBlocks":
        return FormBlocks(self, coeffs, region or Region())


def _members(p) -> np.ndarray:
    if isinstance(p, Patch):
        return p.member_triangles
    if isinstance(p, (tuple, list)) and p and isinstance(p[0], Patch):
        return np.concatenate([q.member_triangles for q in p])
    return np.asarray(p, dtype=np.int64)


@dataclass(frozen=True)
class Region:
    """Subset w x R of G x Y as triangle masks; None means the whole domain."""

    macro: Optional[np.ndarray] = None
    cell: Optional[np.ndarray] = None


class FormBlocks:
    """Assembled pieces of one form over one region, with matvec and apply."""

    def __init__(self, space: TwoScaleSpace, coeffs: FormCoefficients, region: Region):
        self.space = space
        self.coeffs = coeffs
        self.region = region
        gm, cm = space.macro_mesh, space.cell_mesh
        c = coeffs
        wmask = np.ones(gm.n_triangles, bool) if region.macro is None else np.asarray(region.macro)
        rmask = np.ones(cm.n_triangles, bool) if region.cell is None else np.asarray(region.cell)
        self.macro_mask = wmask
        self.cell_mask = rmask
        rt = np.flatnonzero(rmask)
        wt = np.flatnonzero(wmask)

        cell_area = np.abs(cm.areas)
        r_star = float(cell_area[rmask & (cm.labels == MATRIX)].sum())
        r_all = float(cell_area[rmask].sum())
        out_w = r_star if c.out_weight_star_only else r_all

        dm = space.macro
        om = wmask & (gm.labels == OMEGA)
        outside = wmask & (gm.labels != OMEGA)
        A = sp.csr_matrix((dm.dof_count, dm.dof_count), dtype=complex)
        if c.alpha_star != 0 and r_star > 0:
            A = A + c.alpha_star * r_star * fem.assemble_stiffness(gm, dm, 1.0, np.flatnonzero(om))
        if c.alpha_out != 0 and out_w > 0:
            A = A + c.alpha_out * out_w * fem.assemble_stiffness(gm, dm, 1.0, np.flatnonzero(outside))
        if c.mass != 0 and r_all > 0:
            A = A + c.mass * r_all * fem.assemble_mass(gm, dm, 1.0, wt)
        if c.robin != 0 and r_all > 0:
            A = A + c.robin * r_all * fem.assemble_boundary_mass(gm, dm, wmask)
        self.macro = A.tocsr()

        # per x-partition triangle weight |t|, zero outside w
        self.x_weight = space.x_areas * wmask[space.x_partition]
        self.x_on = wmask[space.x_partition].astype(float)

        ds, di = space.star, space.incl
        self.b_star = fem.gradient_integrals(cm, ds, rt)  # (2, n1)
        self.K_star = fem.assemble_stiffness(cm, ds, 1.0, rt)
        self.d_incl = fem.integrals(cm, di, rt)  # (n2,)
        A2 = c.alpha_incl * fem.assemble_stiffness(cm, di, 1.0, rt)
        if c.mass != 0:
            A2 = A2 + c.mass * fem.assemble_mass(cm, di, 1.0, rt)
        self.A_incl = sp.csr_matrix(A2, dtype=complex)

    # ---------------------------------------------------------------- actions

    def matvec(self, v: TwoScaleFunction) -> TwoScaleFunction:
        """Dual vector f with form(v, psi) = sum(conj(psi) * f) over all components."""
        s, c = self.space, self.coeffs
        nx = s.n_x
        gv = (s.grad_x @ v.macro).reshape(nx, 2)
        mv = (s.mean_x @ v.macro) * self.x_on
        w = self.x_weight

        f_macro = self.macro @ v.macro
        bv1 = v.star @ self.b_star.T  # (nx, 2): int grad_y v1 over R n Y*
        f_macro = f_macro + c.alpha_star * (s.grad_x.T @ (w[:, None] * bv1).ravel())
        f_macro = f_macro + c.mass * (s.mean_x.T @ (self.x_on * (v.incl @ self.d_incl)))

        f_star = c.alpha_star * w[:, None] * (gv @ self.b_star + (self.K_star @ v.star.T).T)
        f_incl = c.mass * mv[:, None] * self.d_incl[None, :] + w[:, None] * (self.A_incl @ v.incl.T).T
        return TwoScaleFunction(f_macro, f_star, f_incl)

    def apply(self, v: TwoScaleFunction, psi: TwoScaleFunction) -> complex:
        f = self.matvec(v)
        return complex(np.vdot(psi.macro, f.macro) + np.vdot(psi.star, f.star) + np.vdot(psi.incl, f.incl))

    # ----------------------------------------------------------- monolithic

    def full_matrix(self, with_mean_constraint: bool = False) -> sp.csr_matrix:
        """Monolithic matrix over [macro, star (x-major), incl (x-major), means].

        Row = test dof, column = trial dof. Meant for small spaces and as an
        independent check of :meth:`matvec` and of the Schur-complement solver.
        """
        s, c = self.space, self.coeffs
        ng, nx, n1, n2 = s.shape
        w = sp.diags(self.x_weight)
        G = s.grad_x  # (2nx, ng)
        Mx = sp.diags(self.x_on) @ s.mean_x
        b = sp.csr_matrix(self.b_star)
        cross_star = c.alpha_star * (sp.kron(w, b).T @ G)  # (nx n1, ng): star rows, macro cols
        cross_incl = c.mass * sp.kron(Mx, sp.csr_matrix(self.d_incl[:, None]))  # (nx n2, ng)
        star_star = c.alpha_star * sp.kron(w, self.K_star)
        incl_incl = sp.kron(w, self.A_incl)
        blocks = [[self.macro, cross_star.T, cross_incl.T],
                  [cross_star, star_star, None],
                  [cross_incl, None, incl_incl]]
        if with_mean_constraint:
            C = sp.kron(sp.identity(nx), sp.csr_matrix(s.star_mean[None, :]))
            blocks[0].append(None)
            blocks[1].append(C.T)
            blocks[2].append(None)
            blocks.append([None, C, None, None])
        return sp.bmat(blocks, format="csr").astype(complex)


def flatten(v: TwoScaleFunction) -> np.ndarray:
    return np.concatenate([v.macro, v.star.ravel(), v.incl.ravel()])


def unflatten(space: TwoScaleSpace, x: np.ndarray) -> TwoScaleFunction:
    ng, nx, n1, n2 = space.shape
    a = ng + nx * n1
    return TwoScaleFunction(x[:ng].copy(), x[ng:a].reshape(nx, n1).copy(),
                            x[a:a + nx * n2].reshape(nx, n2).copy())


# --------------------------------------------------------------------------
# public operations


def apply_B(space: TwoScaleSpace, params: ProblemParams, trial: TwoScaleFunction,
            test: TwoScaleFunction) -> complex:
    space.check(trial)
    space.check(test)
    return space.blocks(FormCoefficients.sesquilinear(params)).apply(trial, test)


def apply_B_localized(space: TwoScaleSpace, params: ProblemParams, patch_macro, patch_cell,
                      trial: TwoScaleFunction, test: TwoScaleFunction) -> complex:
    space.check(trial)
    space.check(test)
    region = space.region(patch_macro, patch_cell)
    return space.blocks(FormCoefficients.sesquilinear(params), region).apply(trial, test)


def energy_inner(space, params, v, psi, region: Optional[Region] = None) -> complex:
    return space.blocks(FormCoefficients.energy(params), region).apply(v, psi)


def energy_norm(space: TwoScaleSpace, params: ProblemParams, v: TwoScaleFunction,
                region: Optional[Region] = None) -> float:
    space.check(v)
    return float(np.sqrt(max(energy_inner(space, params, v, v, region).real, 0.0)))


def h1e_inner(space, v, psi, region: Optional[Region] = None) -> complex:
    return space.blocks(FormCoefficients.h1e(), region).apply(v, psi)


def h1e_seminorm(space: TwoScaleSpace, params: ProblemParams, v: TwoScaleFunction,
                 region: Optional[Region] = None) -> float:
    space.check(v)
    return float(np.sqrt(max(h1e_inner(space, v, v, region).real, 0.0)))


def coupled_l2_norm(space, params, v, region: Optional[Region] = None) -> float:
    """||v + chi_D v2|| over G x Y (the compact term of the Garding inequality)."""
    coeffs = FormCoefficients(0.0, 0.0, 0.0, 1.0, 0.0)
    return float(np.sqrt(max(space.blocks(coeffs, region).apply(v, v).real, 0.0)))


def boundary_load(mesh: Triangulation2D, dofmap: fem.DofMap, g: Callable, selector=None) -> np.ndarray:
    """Entries int_{dG} g lambda_i by 4-point Gauss quadrature per edge."""
    edges = mesh.boundary_edges[fem.boundary_edge_mask(mesh, selector)]
    out = np.zeros(dofmap.dof_count, dtype=complex)
    if len(edges) == 0:
        return out
    a = mesh.vertices[edges[:, 0]]
    b = mesh.vertices[edges[:, 1]]
    t = b - a
    length = np.linalg.norm(t, axis=1)
    normal = np.column_stack([t[:, 1], -t[:, 0]]) / length[:, None]
    d = dofmap.vertex_to_dof[edges]
    for s, wq in zip(_GL_X, _GL_W):
        x = a + s * t
        gv = np.asarray(g(x, normal), dtype=complex) * wq * length
        for col, phi in ((0, 1.0 - s), (1, s)):
            keep = d[:, col] >= 0
            np.add.at(out, d[keep, col], gv[keep] * phi)
    return out


def rhs_vector(space: TwoScaleSpace, params: ProblemParams) -> TwoScaleFunction:
    """Load functional psi -> int_{dG} g conj(psi); zero on the cell components."""
    f = space.zeros()
    f.macro[:] = boundary_load(space.macro_mesh, space.macro, params.datum)
    return f


# --------------------------------------------------------------------------
# cell elimination


class CellElimination:
    """Static condensation of the cell components for a zero cell load.

    With constant parameters every x-triangle carries the same cell operator
    up to the weight |t|, so one factorization yields three cell responses
    (to the two gradient components and to the mean of the macro function)
    and a 3x3 effective matrix. The condensed macro matrix is the
    homogenized macro problem.
    """

    def __init__(self, blocks: FormBlocks):
        if blocks.region.macro is not None or blocks.region.cell is not None:
            raise ValueError("condensation needs the form on the whole domain")
        s, c = blocks.space, blocks.coeffs
        self.space, self.blocks = s, blocks
        _, nx, n1, n2 = s.shape
        K = sp.bmat([[c.alpha_star * blocks.K_star, None, sp.csr_matrix(s.star_mean[:, None])],
                     [None, blocks.A_incl, None],
                     [sp.csr_matrix(s.star_mean[None, :]), None, None]], format="csc").astype(complex)
        # cell rows driven by (grad v_t, mean_t v / |t|)
        R = np.zeros((n1 + n2 + 1, 3), dtype=complex)
        R[:n1, :2] = c.alpha_star * blocks.b_star.T
        R[n1:n1 + n2, 2] = c.mass * blocks.d_incl
        lu = spla.splu(K)
        X = lu.solve(R)
        self.response = -X[:n1 + n2]  # cell part per unit driver
        E = np.zeros((3, n1 + n2), dtype=complex)
        E[:2, :n1] = c.alpha_star * blocks.b_star
        E[2, n1:] = c.mass * blocks.d_incl
        self.effective = E @ self.response  # 3x3, sign included
        self.n1, self.n2 = n1, n2

    def drivers(self, macro_values: np.ndarray) -> np.ndarray:
        s = self.space
        g = (s.grad_x @ macro_values).reshape(s.n_x, 2)
        m = (s.mean_x @ macro_values) / s.x_areas
        return np.column_stack([g, m])

    @cached_property
    def driver_operator(self) -> sp.csr_matrix:
        s = self.space
        nx = s.n_x
        mhat = sp.diags(1.0 / s.x_areas) @ s.mean_x
        G = s.grad_x.tocoo()
        M = mhat.tocoo()
        rows = np.concatenate([3 * (G.row // 2) + G.row % 2, 3 * M.row + 2])
        cols = np.concatenate([G.col, M.col])
        vals = np.concatenate([G.data, M.data])
        return sp.csr_matrix((vals, (rows, cols)), shape=(3 * nx, s.macro.dof_count))

    @cached_property
    def condensed(self) -> sp.csr_matrix:
        s = self.space
        L = self.driver_operator
        H = sp.kron(sp.diags(s.x_areas), sp.csr_matrix(self.effective))
        return (self.blocks.macro + L.T @ H @ L).tocsr()

    def reconstruct(self, macro_values: np.ndarray) -> TwoScaleFunction:
        a = self.drivers(macro_values)  # (nx, 3)
        cells = a @ self.response.T
        return TwoScaleFunction(np.asarray(macro_values, dtype=complex).copy(),
                                cells[:, :self.n1].copy(), cells[:, self.n1:].copy())
