"""P1 Lagrange kernels: dof maps, closed-form element matrices and assembly."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Triangulation2D

FREE = "free"
PERIODIC = "periodic_zero_mean"
ZERO_TRACE = "zero_trace"

_REF_MASS = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


class ConfigurationError(ValueError):
    pass


class SolverError(RuntimeError):
    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True, eq=False)
class DofMap:
    """Nodal numbering of a P1 space on (a subdomain of) a triangulation.

    ``vertex_to_dof`` is -1 for vertices without a dof (outside the
    subdomain, or constrained to zero). Identified periodic vertices share
    one dof. For the periodic kind the zero-mean condition is not built into
    the basis; it is imposed by a multiplier at solve time.
    """

    mesh: Triangulation2D
    kind: str
    label: Optional[int]
    vertex_to_dof: np.ndarray
    dof_count: int
    triangles: np.ndarray  # triangles carrying the space

    @cached_property
    def local_dofs(self) -> np.ndarray:
        """(n_triangles_of_space, 3) dof ids, -1 where constrained."""
        return self.vertex_to_dof[self.mesh.triangles[self.triangles]]

    @cached_property
    def dof_vertex(self) -> np.ndarray:
        """One representative vertex per dof."""
        out = np.empty(self.dof_count, dtype=np.int64)
        v = np.flatnonzero(self.vertex_to_dof >= 0)
        out[self.vertex_to_dof[v][::-1]] = v[::-1]
        return out

    @cached_property
    def dof_coordinates(self) -> np.ndarray:
        return self.mesh.vertices[self.dof_vertex]

    @cached_property
    def triangle_mask(self) -> np.ndarray:
        mask = np.zeros(self.mesh.n_triangles, dtype=bool)
        mask[self.triangles] = True
        return mask


def _region_boundary_vertices(mesh: Triangulation2D, triangles: np.ndarray, ids: np.ndarray):
    t = ids[mesh.triangles[triangles]]
    edges = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    return np.unique(uniq[counts == 1])


def build_dofmap(mesh: Triangulation2D, kind: str = FREE, label: Optional[int] = None) -> DofMap:
    if kind not in (FREE, PERIODIC, ZERO_TRACE):
        raise ConfigurationError(f"unknown space kind {kind!r}")
    if kind == PERIODIC and not mesh.is_periodic:
        raise ConfigurationError("periodic space requested on a mesh without periodic_map")
    tris = np.arange(mesh.n_triangles) if label is None else mesh.triangles_with_label(label)
    ids = mesh.torus_vertex if mesh.is_periodic and kind != FREE else np.arange(mesh.n_vertices)
    used = np.unique(ids[mesh.triangles[tris]])
    if kind == ZERO_TRACE:
        used = np.setdiff1d(used, _region_boundary_vertices(mesh, tris, ids))
    rep_to_dof = np.full(mesh.n_vertices, -1, dtype=np.int64)
    rep_to_dof[used] = np.arange(len(used))
    vertex_to_dof = rep_to_dof[ids]
    return DofMap(mesh=mesh, kind=kind, label=label, vertex_to_dof=vertex_to_dof,
                  dof_count=len(used), triangles=tris)


# --------------------------------------------------------------------------
# element kernels


def gradients(mesh: Triangulation2D) -> np.ndarray:
    """(nt, 3, 2) constant gradients of the barycentric basis functions."""
    p = mesh.vertices[mesh.triangles]
    jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=1)  # rows are edge vectors
    inv = np.linalg.inv(jac)  # (nt, 2, 2)
    ref = np.array([[-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])
    return np.einsum("tij,jk->tki", inv, ref)


def element_stiffness(mesh: Triangulation2D) -> np.ndarray:
    g = gradients(mesh)
    return np.abs(mesh.areas)[:, None, None] * np.einsum("tid,tjd->tij", g, g)


def element_mass(mesh: Triangulation2D) -> np.ndarray:
    return np.abs(mesh.areas)[:, None, None] * _REF_MASS[None]


def _coefficient_per_triangle(mesh, dofmap, coefficient, triangles):
    """Per-triangle coefficient on the space's triangles, zero off ``triangles``."""
    nt = mesh.n_triangles
    if isinstance(coefficient, dict):
        dtype = np.result_type(*[np.asarray(v) for v in coefficient.values()], np.float64)
        c = np.zeros(nt, dtype=dtype)
        for label, value in coefficient.items():
            c[mesh.labels == label] = value
    else:
        c = np.broadcast_to(np.asarray(coefficient), (nt,)).copy()
        if c.dtype.kind not in "fc":
            c = c.astype(np.float64)
    keep = dofmap.triangle_mask.copy()
    if triangles is not None:
        sel = np.zeros(nt, dtype=bool)
        sel[np.asarray(triangles, dtype=np.int64)] = True
        keep &= sel
    c[~keep] = 0
    return c


def _assemble(dofmap: DofMap, local: np.ndarray, coeff: np.ndarray) -> sp.csr_matrix:
    tri = dofmap.triangles
    ldofs = dofmap.local_dofs
    vals = coeff[tri, None, None] * local[tri]
    rows = np.broadcast_to(ldofs[:, :, None], vals.shape)
    cols = np.broadcast_to(ldofs[:, None, :], vals.shape)
    keep = (rows >= 0) & (cols >= 0) & (vals != 0)
    n = dofmap.dof_count
    return sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n))


def assemble_stiffness(mesh: Triangulation2D, dofmap: DofMap, coefficient=1.0,
                       triangles=None) -> sp.csr_matrix:
    """Entry (i, j) = sum_T c(T) int_T grad(lambda_j) . grad(lambda_i)."""
    c = _coefficient_per_triangle(mesh, dofmap, coefficient, triangles)
    return _assemble(dofmap, element_stiffness(mesh), c)


def assemble_mass(mesh: Triangulation2D, dofmap: DofMap, weight=1.0, triangles=None) -> sp.csr_matrix:
    c = _coefficient_per_triangle(mesh, dofmap, weight, triangles)
    return _assemble(dofmap, element_mass(mesh), c)


def boundary_edge_mask(mesh: Triangulation2D, selector=None) -> np.ndarray:
    """Resolve a selector (None, boolean mask, triangle subset, or callable on midpoints)."""
    ne = len(mesh.boundary_edges)
    if selector is None:
        return np.ones(ne, dtype=bool)
    if callable(selector):
        mid = mesh.vertices[mesh.boundary_edges].mean(axis=1)
        return np.asarray(selector(mid), dtype=bool)
    sel = np.asarray(selector)
    if sel.dtype == bool:
        if sel.shape == (ne,):
            return sel
        if sel.shape == (mesh.n_triangles,):
            return sel[mesh.boundary_owner]
        raise ValueError("boolean selector must be per boundary edge or per triangle")
    return np.isin(mesh.boundary_owner, sel)


def assemble_boundary_mass(mesh: Triangulation2D, dofmap: DofMap, selector=None) -> sp.csr_matrix:
    """Sum over selected boundary edges of |e|/6 [[2,1],[1,2]]."""
    edges = mesh.boundary_edges[boundary_edge_mask(mesh, selector)]
    n = dofmap.dof_count
    if len(edges) == 0:
        return sp.csr_matrix((n, n))
    length = np.linalg.norm(mesh.vertices[edges[:, 1]] - mesh.vertices[edges[:, 0]], axis=1)
    local = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    vals = length[:, None, None] * local[None]
    d = dofmap.vertex_to_dof[edges]
    rows = np.broadcast_to(d[:, :, None], vals.shape)
    cols = np.broadcast_to(d[:, None, :], vals.shape)
    keep = (rows >= 0) & (cols >= 0)
    return sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n))


def integrals(mesh: Triangulation2D, dofmap: DofMap, triangles=None) -> np.ndarray:
    """int lambda_j over the space's triangles (optionally a subset)."""
    c = _coefficient_per_triangle(mesh, dofmap, 1.0, triangles)
    out = np.zeros(dofmap.dof_count)
    ldofs = dofmap.local_dofs
    vals = np.repeat((c * np.abs(mesh.areas))[dofmap.triangles, None] / 3.0, 3, axis=1)
    keep = ldofs >= 0
    np.add.at(out, ldofs[keep], vals[keep])
    return out


def gradient_integrals(mesh: Triangulation2D, dofmap: DofMap, triangles=None) -> np.ndarray:
    """(2, n_dofs) array of int grad(lambda_j) over the space's triangles."""
    c = _coefficient_per_triangle(mesh, dofmap, 1.0, triangles)
    g = gradients(mesh)[dofmap.triangles] * (c * np.abs(mesh.areas))[dofmap.triangles, None, None]
    out = np.zeros((2, dofmap.dof_count))
    ldofs = dofmap.local_dofs
    keep = ldofs >= 0
    for d in range(2):
        np.add.at(out[d], ldofs[keep], g[..., d][keep])
    return out


def gradient_operator(mesh: Triangulation2D, dofmap: DofMap, triangles) -> sp.csr_matrix:
    """Sparse map from dof values to the constant gradients on ``triangles``.

    Row ``2*i + d`` is the d-th gradient component on ``triangles[i]``.
    """
    triangles = np.asarray(triangles, dtype=np.int64)
    g = gradients(mesh)[triangles]  # (n, 3, 2)
    d = dofmap.vertex_to_dof[mesh.triangles[triangles]]  # (n, 3)
    n = len(triangles)
    rows = (2 * np.arange(n)[:, None, None] + np.arange(2)[None, None, :])
    rows = np.broadcast_to(rows, g.shape)
    cols = np.broadcast_to(d[:, :, None], g.shape)
    keep = cols >= 0
    return sp.csr_matrix((g[keep], (rows[keep], cols[keep])), shape=(2 * n, dofmap.dof_count))


def mean_operator(mesh: Triangulation2D, dofmap: DofMap, triangles) -> sp.csr_matrix:
    """Row i maps dof values to int_{triangles[i]} v dx."""
    triangles = np.asarray(triangles, dtype=np.int64)
    d = dofmap.vertex_to_dof[mesh.triangles[triangles]]
    vals = np.repeat(np.abs(mesh.areas[triangles])[:, None] / 3.0, 3, axis=1)
    rows = np.repeat(np.arange(len(triangles))[:, None], 3, axis=1)
    keep = d >= 0
    return sp.csr_matrix((vals[keep], (rows[keep], d[keep])), shape=(len(triangles), dofmap.dof_count))


def prolongation(coarse: DofMap, fine: DofMap) -> sp.csr_matrix:
    """Exact embedding of coarse P1 functions into the nested fine space."""
    fm, cm = fine.mesh, coarse.mesh
    if fm.refinement_parent is None:
        raise ConfigurationError("fine mesh carries no refinement links")
    # one fine triangle per fine dof, restricted to the space's triangles
    tri = fine.triangles
    ldofs = fine.local_dofs
    owner = np.full(fine.dof_count, -1, dtype=np.int64)
    corner = np.zeros(fine.dof_count, dtype=np.int64)
    for k in range(3):
        sel = ldofs[:, k] >= 0
        owner[ldofs[sel, k]] = tri[sel]
        corner[ldofs[sel, k]] = k
    fv = fm.triangles[owner, corner]
    parent = fm.refinement_parent[owner]
    pc = cm.vertices[cm.triangles[parent]]
    x = fm.vertices[fv]
    jac = np.stack([pc[:, 1] - pc[:, 0], pc[:, 2] - pc[:, 0]], axis=2)  # columns
    lam12 = np.linalg.solve(jac, (x - pc[:, 0])[..., None])[..., 0]
    bary = np.column_stack([1 - lam12.sum(axis=1), lam12])
    bary[np.abs(bary) < 1e-13] = 0.0
    cols = coarse.vertex_to_dof[cm.triangles[parent]]
    rows = np.repeat(np.arange(fine.dof_count)[:, None], 3, axis=1)
    keep = (cols >= 0) & (bary != 0)
    return sp.csr_matrix((bary[keep], (rows[keep], cols[keep])),
                         shape=(fine.dof_count, coarse.dof_count))


# --------------------------------------------------------------------------
# solving


def solve_sparse(A, b, tol: float = 1e-10):
    """Direct sparse LU solve with one step of iterative refinement."""
    A = sp.csc_matrix(A)
    b = np.asarray(b)
    dtype = np.result_type(A.dtype, b.dtype, np.float64)
    A = A.astype(dtype)
    b = b.astype(dtype)
    if A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise SolverError(f"sparse factorization failed: {exc}", shape=A.shape) from exc
    x = lu.solve(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros_like(x)
    res = np.linalg.norm(A @ x - b) / bnorm
    if not res <= tol:
        x = x + lu.solve(b - A @ x)
        res = np.linalg.norm(A @ x - b) / bnorm
    if not res <= tol:
        udiag = np.abs(lu.U.diagonal())
        raise SolverError(f"relative residual {res:.3e} above {tol:.1e}",
                          residual=res, min_pivot=float(udiag.min()),
                          max_pivot=float(udiag.max()))
    return x


def export_coordinate_text(A) -> str:
    A = sp.coo_matrix(A)
    order = np.lexsort((A.col, A.row))
    lines = [f"{A.shape[0]} {A.shape[1]} {A.nnz}"]
    for r, c, v in zip(A.row[order], A.col[order], A.data[order].astype(complex)):
        lines.append(f"{r} {c} {float(v.real)!r} {float(v.imag)!r}")
    return "\n".join(lines) + "\n"
