"""Quasi-interpolation from a fine two-scale space onto a nested coarse one.

Each component is the elementwise L2 projection onto discontinuous P1 on the
coarse mesh followed by Oswald averaging (plain mean over the coarse
triangles of the component that share a dof). On the torus the average runs
over the wrapped vertex star; dofs on the boundary of D carry no value, so
the inclusion component lands in the zero-trace space.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import fem
from .forms import FormCoefficients, TwoScaleFunction, TwoScaleSpace
from .mesh import neighborhood


def _barycentric(points: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """points (n, 2), corners (n, 3, 2) -> (n, 3)."""
    jac = np.stack([corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]], axis=2)
    lam = np.linalg.solve(jac, (points - corners[:, 0])[..., None])[..., 0]
    return np.column_stack([1 - lam.sum(axis=1), lam])


def component_interpolation(coarse: fem.DofMap, fine: fem.DofMap) -> sp.csr_matrix:
    """Matrix of Oswald(L2-projection) from fine P1 dofs to coarse P1 dofs."""
    cm, fm = coarse.mesh, fine.mesh
    if fm.refinement_parent is None:
        raise fem.ConfigurationError("fine mesh carries no refinement links")
    ft = fine.triangles
    parent = fm.refinement_parent[ft]
    if not coarse.triangle_mask[parent].all():
        raise fem.ConfigurationError("fine space triangles do not refine the coarse space")

    # how many coarse triangles of the space share each coarse dof
    cl = coarse.local_dofs
    count = np.bincount(cl[cl >= 0], minlength=coarse.dof_count).astype(float)

    fine_mass = fem.element_mass(fm)[ft]  # (n, 3, 3)
    coarse_mass_inv = np.linalg.inv(fem.element_mass(cm)[parent])
    corners = cm.vertices[cm.triangles[parent]]  # (n, 3, 2)
    phi = np.stack([_barycentric(fm.vertices[fm.triangles[ft, b]], corners) for b in range(3)], axis=1)
    # local projection: coefficients on T = M_T^{-1} sum_t phi_t^T M_t v_t
    Z = coarse_mass_inv @ np.transpose(phi, (0, 2, 1)) @ fine_mass  # (n, 3 coarse, 3 fine)

    rows = coarse.vertex_to_dof[cm.triangles[parent]]  # (n, 3)
    cols = fine.local_dofs  # (n, 3)
    R = np.broadcast_to(rows[:, :, None], Z.shape)
    C = np.broadcast_to(cols[:, None, :], Z.shape)
    keep = (R >= 0) & (C >= 0)
    vals = Z[keep] / count[R[keep]]
    I = sp.csr_matrix((vals, (R[keep], C[keep])), shape=(coarse.dof_count, fine.dof_count))
    I.data[np.abs(I.data) < 1e-15] = 0.0
    I.eliminate_zeros()
    return I


def x_averaging(coarse: TwoScaleSpace, fine: TwoScaleSpace):
    """(average, embed): volume averages of fine x-partition constants, and the parent indicator."""
    fm = fine.macro_mesh
    if fm.refinement_parent is None:
        raise fem.ConfigurationError("fine macro mesh carries no refinement links")
    position = np.full(coarse.macro_mesh.n_triangles, -1, dtype=np.int64)
    position[coarse.x_partition] = np.arange(coarse.n_x)
    parent = position[fm.refinement_parent[fine.x_partition]]
    if (parent < 0).any():
        raise fem.ConfigurationError("fine x-partition does not refine the coarse one")
    nxf = fine.n_x
    embed = sp.csr_matrix((np.ones(nxf), (np.arange(nxf), parent)), shape=(nxf, coarse.n_x))
    weights = fine.x_areas / coarse.x_areas[parent]
    average = sp.csr_matrix((weights, (parent, np.arange(nxf))), shape=(coarse.n_x, nxf))
    return average, embed


@dataclass
class QuasiInterpolator:
    coarse: TwoScaleSpace
    fine: TwoScaleSpace
    macro: sp.csr_matrix
    star: sp.csr_matrix
    incl: sp.csr_matrix
    x_average: sp.csr_matrix
    x_embed: sp.csr_matrix
    constants: dict = field(default_factory=dict)

    @cached_property
    def prolong_macro(self) -> sp.csr_matrix:
        return fem.prolongation(self.coarse.macro, self.fine.macro)

    @cached_property
    def prolong_star(self) -> sp.csr_matrix:
        return fem.prolongation(self.coarse.star, self.fine.star)

    @cached_property
    def prolong_incl(self) -> sp.csr_matrix:
        return fem.prolongation(self.coarse.incl, self.fine.incl)

    def component(self, kind: str) -> sp.csr_matrix:
        return {"macro": self.macro, "star": self.star, "incl": self.incl}[kind]

    def prolongation(self, kind: str) -> sp.csr_matrix:
        return {"macro": self.prolong_macro, "star": self.prolong_star, "incl": self.prolong_incl}[kind]

    def coarse_dofmap(self, kind: str) -> fem.DofMap:
        return getattr(self.coarse, kind)

    def fine_dofmap(self, kind: str) -> fem.DofMap:
        return getattr(self.fine, kind)

    def apply(self, v: TwoScaleFunction) -> TwoScaleFunction:
        self.fine.check(v)
        return TwoScaleFunction(self.macro @ v.macro,
                                self.x_average @ (self.star @ v.star.T).T,
                                self.x_average @ (self.incl @ v.incl.T).T)

    def embed(self, u: TwoScaleFunction) -> TwoScaleFunction:
        """Exact fine representation of a coarse triple."""
        self.coarse.check(u)
        return TwoScaleFunction(self.prolong_macro @ u.macro,
                                self.x_embed @ (self.prolong_star @ u.star.T).T,
                                self.x_embed @ (self.prolong_incl @ u.incl.T).T)

    # ------------------------------------------------------------- kernel

    def kernel_constraints(self, patch_dofs: Optional[dict] = None) -> dict:
        """Per component, the constraint matrix whose null space is the kernel.

        With ``patch_dofs`` (component -> fine dof indices) the columns are
        restricted to those dofs and only coarse rows touching them are kept.
        Cell components act on y only; x is a passive index.
        """
        out = {}
        for kind in ("macro", "star", "incl"):
            I = self.component(kind)
            if patch_dofs is not None and kind in patch_dofs:
                I = I[:, np.asarray(patch_dofs[kind])]
                I = I[np.flatnonzero(np.diff(I.tocsr().indptr) > 0)]
            out[kind] = I.tocsr()
        return out

    def kernel_dimension(self) -> int:
        """dim of the global kernel, from numerical ranks of the component maps."""
        ng, nx, n1, n2 = self.fine.shape
        total = ng + nx * (n1 + n2)
        r = _rank(self.macro) + _rank(self.x_average) * (_rank(self.star) + _rank(self.incl))
        return total - r

    def random_kernel_function(self, rng: np.random.Generator) -> TwoScaleFunction:
        """Random fine triple projected onto the kernel: v - embed(I v)."""
        v = self.fine.random(rng)
        return v - self.embed(self.apply(v))

    # ---------------------------------------------------------- constants

    def measure_constants(self, kind: str, elements=None) -> np.ndarray:
        """Per coarse element T, the best constant C with

            H_T^-1 ||v - I v||_T + ||grad I v||_T <= C ||grad v||_N(T)

        for all fine v, from a local generalized eigenvalue problem
        (the left side squared is bounded by twice the sum of squares).
        """
        cmap, fmap = self.coarse_dofmap(kind), self.fine_dofmap(kind)
        cm, fm = cmap.mesh, fmap.mesh
        I = self.component(kind).tocsc()
        P = self.prolongation(kind).tocsr()
        Kf = fem.element_stiffness(fm)
        Mf = fem.element_mass(fm)
        Kc = fem.element_stiffness(cm)
        parent = fm.refinement_parent
        fine_tris = fmap.triangles
        if elements is None:
            elements = cmap.triangles
        out = []
        for T in np.asarray(elements):
            nbh = neighborhood(cm, [T]).member_triangles
            nbh = nbh[cmap.triangle_mask[nbh]]
            tN = fine_tris[np.isin(parent[fine_tris], nbh)]
            tT = fine_tris[parent[fine_tris] == T]
            ld = np.unique(fmap.vertex_to_dof[fm.triangles[tN]])
            ld = ld[ld >= 0]
            pos = np.full(fmap.dof_count, -1, dtype=np.int64)
            pos[ld] = np.arange(len(ld))
            n = len(ld)
            KN = _local_assemble(Kf, fmap, tN, pos, n)
            MT = _local_assemble(Mf, fmap, tT, pos, n)
            cd = cmap.vertex_to_dof[cm.triangles[T]]
            ok = cd >= 0
            Ic = I[cd[ok]].toarray()
            if np.abs(np.delete(Ic, ld, axis=1)).max(initial=0) > 1e-12:
                raise RuntimeError("interpolant depends on dofs outside N(T)")
            Ic = Ic[:, ld]
            KT = Kc[T][np.ix_(ok, ok)]
            PT = P[ld][:, cd[ok]].toarray()  # fine values on N(T) of the coarse T-basis
            E = np.eye(n) - PT @ Ic
            H = cm.diameters[T]
            Q = (E.T @ MT @ E) / H ** 2 + Ic.T @ KT @ Ic
            # restrict to the range of KN
            lam, V = np.linalg.eigh(KN)
            r = lam > 1e-10 * lam.max()
            S = V[:, r] / np.sqrt(lam[r])
            # Q must vanish on the kernel of KN (reproduced constants)
            if (~r).any():
                Vk = V[:, ~r]
                if np.abs(Vk.T @ Q @ Vk).max() > 1e-8 * max(np.abs(Q).max(), 1.0):
                    raise RuntimeError("interpolation does not reproduce local constants")
            out.append(np.sqrt(2 * max(np.linalg.eigvalsh(S.T @ Q @ S).max(), 0.0)))
        return np.asarray(out)

    def measured_constant(self, kind: str, max_elements: int = 64) -> float:
        """Max of :meth:`measure_constants` over all (or a deterministic sample of) elements."""
        key = ("C_I", kind)
        if key not in self.constants:
            tris = self.coarse_dofmap(kind).triangles
            if len(tris) > max_elements:
                tris = tris[np.linspace(0, len(tris) - 1, max_elements).round().astype(int)]
            self.constants[key] = float(self.measure_constants(kind, tris).max())
        return self.constants[key]

    def energy_stability(self, params, rng: np.random.Generator, samples: int = 8) -> float:
        """Largest observed ratio ||embed(I v)||_e / ||v||_e over random samples.

        Samples mix white noise with prolonged coarse-level noise, so both
        rough and smooth functions are probed. A lower estimate of C_{I,e}.
        """
        blocks = self.fine.blocks(FormCoefficients.energy(params))
        best = 0.0
        for s in range(samples):
            v = self.fine.random(rng)
            if s % 2:
                v = self.embed(self.coarse.random(rng)) + v * 0.1
            num = blocks.apply(*(2 * (self.embed(self.apply(v)),))).real
            den = blocks.apply(v, v).real
            best = max(best, float(np.sqrt(num / den)))
        return best


def _local_assemble(local: np.ndarray, dofmap: fem.DofMap, tris: np.ndarray, pos: np.ndarray, n: int):
    d = pos[dofmap.vertex_to_dof[dofmap.mesh.triangles[tris]]]
    d[dofmap.vertex_to_dof[dofmap.mesh.triangles[tris]] < 0] = -1
    out = np.zeros((n, n))
    for t, dd in zip(tris, d):
        ok = dd >= 0
        out[np.ix_(dd[ok], dd[ok])] += local[t][np.ix_(ok, ok)]
    return out


def _rank(A) -> int:
    A = A.toarray() if sp.issparse(A) else np.asarray(A)
    if A.size == 0:
        return 0
    return int(np.linalg.matrix_rank(A))


def build_interpolator(fine: TwoScaleSpace, coarse: TwoScaleSpace) -> QuasiInterpolator:
    average, embed = x_averaging(coarse, fine)
    return QuasiInterpolator(
        coarse=coarse, fine=fine,
        macro=component_interpolation(coarse.macro, fine.macro),
        star=component_interpolation(coarse.star, fine.star),
        incl=component_interpolation(coarse.incl, fine.incl),
        x_average=average, x_embed=embed)


def overlap_constants(coarse: TwoScaleSpace, m: int) -> dict:
    from .mesh import overlap_constant
    return {"G": overlap_constant(coarse.macro_mesh, m), "Y": overlap_constant(coarse.cell_mesh, m)}


def resolution_slack(interp: QuasiInterpolator, params) -> float:
    """sqrt(C_min/2) - k (C_I,G sqrt(C_ol,G) H_c + C_I,D sqrt(C_ol,Y) h_c); negative when violated."""
    ol = overlap_constants(interp.coarse, 1)
    H = interp.coarse.macro_mesh.mesh_size
    h = interp.coarse.cell_mesh.mesh_size
    lhs = params.k * (interp.measured_constant("macro") * np.sqrt(ol["G"]) * H
                      + interp.measured_constant("incl") * np.sqrt(ol["Y"]) * h)
    return float(np.sqrt(params.c_min / 2) - lhs)
