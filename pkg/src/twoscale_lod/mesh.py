"""Structured triangulations of the macroscopic domain and the periodic unit cell.

Meshes are criss-cross triangulations (each grid cell split into four
triangles by both diagonals) of axis-aligned squares. Cell meshes of
``Y = [-1/2, 1/2)^2`` store the boundary vertices of both opposite sides
explicitly and record which of them are identified on the torus.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Optional

import numpy as np
import scipy.sparse as sp

# subdomain labels
OUTSIDE = 0  # G \ Omega  (macro mesh)
OMEGA = 1  # Omega        (macro mesh)
MATRIX = 0  # Y*           (cell mesh)
INCLUSION = 1  # D         (cell mesh)

_TOL = 1e-10


class AlignmentError(ValueError):
    """The grid does not resolve the subdomain geometry."""


@dataclass(frozen=True)
class MacroDomain:
    """G = [lower, upper]^2 with the scatterer Omega = [omega_lower, omega_upper]^2.

    ``omega_lower=None`` gives a domain without scatterer.
    """

    lower: float = 0.0
    upper: float = 1.0
    omega_lower: Optional[float] = 0.25
    omega_upper: Optional[float] = 0.75

    def __post_init__(self):
        if self.omega_lower is None:
            return
        if not (self.lower < self.omega_lower < self.omega_upper < self.upper):
            raise ValueError("Omega must lie strictly inside G")


@dataclass(frozen=True)
class UnitCell:
    """Y = [-1/2, 1/2)^2 with the square inclusion D of side ``inclusion_side``."""

    inclusion_side: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.inclusion_side < 1.0):
            raise ValueError("D must lie strictly inside Y")


@dataclass(frozen=True, eq=False)
class Triangulation2D:
    vertices: np.ndarray
    triangles: np.ndarray
    labels: np.ndarray
    boundary_edges: np.ndarray  # (ne, 2) raw vertex ids, edges of exactly one triangle
    boundary_owner: np.ndarray  # triangle owning each boundary edge
    periodic_map: Optional[np.ndarray] = None  # (np, 2) rows (slave, master)
    refinement_parent: Optional[np.ndarray] = None
    separate_subdomains: bool = False  # patches never cross subdomain interfaces
    lower: float = 0.0
    period: float = 1.0

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def is_periodic(self) -> bool:
        return self.periodic_map is not None

    @cached_property
    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def diameters(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        lengths = [np.linalg.norm(p[:, i] - p[:, (i + 1) % 3], axis=1) for i in range(3)]
        return np.max(lengths, axis=0)

    @property
    def mesh_size(self) -> float:
        return float(self.diameters.max())

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def torus_vertex(self) -> np.ndarray:
        """Representative vertex id after periodic identification."""
        rep = np.arange(self.n_vertices)
        if self.periodic_map is not None and len(self.periodic_map):
            rep[self.periodic_map[:, 0]] = self.periodic_map[:, 1]
        return rep

    @cached_property
    def torus_triangles(self) -> np.ndarray:
        return self.torus_vertex[self.triangles]

    def shape_ratios(self) -> np.ndarray:
        """Circumradius over inradius per triangle (2 for equilateral)."""
        p = self.vertices[self.triangles]
        a = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
        b = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
        c = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
        area = np.abs(self.areas)
        s = 0.5 * (a + b + c)
        return (a * b * c / (4 * area)) / (area / s)

    @cached_property
    def _incidence(self) -> sp.csr_matrix:
        """Vertex (torus id) by triangle incidence."""
        nt = self.n_triangles
        rows = self.torus_triangles.ravel()
        cols = np.repeat(np.arange(nt), 3)
        return sp.csr_matrix((np.ones(3 * nt, dtype=np.int32), (rows, cols)),
                             shape=(self.n_vertices, nt))

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Triangles sharing at least one (torus) vertex; same label only if separated."""
        inc = self._incidence
        adj = (inc.T @ inc).tocoo()
        keep = np.ones(adj.nnz, dtype=bool)
        if self.separate_subdomains:
            keep = self.labels[adj.row] == self.labels[adj.col]
        nt = self.n_triangles
        return sp.csr_matrix((np.ones(keep.sum(), dtype=bool), (adj.row[keep], adj.col[keep])),
                             shape=(nt, nt))

    def triangles_with_label(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


# --------------------------------------------------------------------------
# construction


def _criss_cross(n: int, lower: float, side: float):
    h = side / n
    xs = lower + h * np.arange(n + 1)
    gx, gy = np.meshgrid(xs, xs)
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    cs = lower + h * (np.arange(n) + 0.5)
    cx, cy = np.meshgrid(cs, cs)
    centers = np.column_stack([cx.ravel(), cy.ravel()])
    vertices = np.vstack([grid, centers])

    j, i = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    i = i.ravel()
    j = j.ravel()
    a = j * (n + 1) + i
    b = a + 1
    c = a + n + 2
    d = a + n + 1
    e = (n + 1) ** 2 + j * n + i
    tris = np.stack([
        np.column_stack([a, b, e]),
        np.column_stack([b, c, e]),
        np.column_stack([c, d, e]),
        np.column_stack([d, a, e]),
    ], axis=1).reshape(-1, 3)
    return vertices, tris


def _check_aligned(value: float, lower: float, h: float, what: str):
    steps = (value - lower) / h
    if abs(steps - round(steps)) > 1e-9:
        raise AlignmentError(f"{what} boundary at {value} is not a grid line of spacing {h}")


def _boundary_edges(triangles: np.ndarray, vertex_ids: np.ndarray):
    """Edges of exactly one triangle, with owner. ``vertex_ids`` decides identity."""
    t = vertex_ids[triangles]
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    raw = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    owner = np.tile(np.arange(len(triangles)), 3)
    key = np.sort(edges, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    single = counts[inv.ravel()] == 1
    return raw[single], owner[single]


def periodic_map_from_coordinates(vertices: np.ndarray, lower: float, period: float):
    """Pair every vertex on the upper sides of the cell with its torus representative."""
    wrapped = np.mod(vertices - lower, period)
    wrapped[np.abs(wrapped - period) < _TOL * period] = 0.0
    key = np.round(wrapped / period * 2**20).astype(np.int64)
    on_upper = np.any(np.abs(vertices - (lower + period)) < _TOL * period, axis=1)
    masters = {}
    for v in np.flatnonzero(~on_upper):
        masters[tuple(key[v])] = v
    slaves = np.flatnonzero(on_upper)
    pairs = np.array([(s, masters[tuple(key[s])]) for s in slaves], dtype=np.int64)
    return pairs.reshape(-1, 2)


def build_structured_mesh(domain, n: int) -> Triangulation2D:
    """Criss-cross triangulation of a macro domain or of the unit cell.

    ``n`` is the number of grid cells per side. The subdomain (Omega or D) must
    consist of whole grid cells, otherwise an :class:`AlignmentError` is raised.
    """
    if n < 2:
        raise ValueError("need at least 2 subdivisions per side")
    if isinstance(domain, MacroDomain):
        lower, side = domain.lower, domain.upper - domain.lower
        box = (domain.omega_lower, domain.omega_upper)
        inside_label, outside_label = OMEGA, OUTSIDE
        periodic = False
    elif isinstance(domain, UnitCell):
        lower, side = -0.5, 1.0
        box = (-domain.inclusion_side / 2, domain.inclusion_side / 2)
        inside_label, outside_label = INCLUSION, MATRIX
        periodic = True
    else:
        raise TypeError(f"unknown domain descriptor {domain!r}")
    h = side / n
    if box[0] is None:
        box = (np.inf, -np.inf)
    else:
        for value in box:
            _check_aligned(value, lower, h, "subdomain")

    vertices, tris = _criss_cross(n, lower, side)
    c = vertices[tris].mean(axis=1)
    inside = np.all((c > box[0]) & (c < box[1]), axis=1)
    labels = np.where(inside, inside_label, outside_label)

    pmap = periodic_map_from_coordinates(vertices, lower, side) if periodic else None
    bedges, owner = _boundary_edges(tris, np.arange(len(vertices)))
    return Triangulation2D(vertices=vertices, triangles=tris, labels=labels,
                           boundary_edges=bedges, boundary_owner=owner,
                           periodic_map=pmap, separate_subdomains=periodic,
                           lower=lower, period=side)


def refine_uniform(mesh: Triangulation2D, levels: int) -> Triangulation2D:
    """Red refinement applied ``levels`` times.

    ``refinement_parent`` of the result maps each fine triangle to its
    ancestor in ``mesh``.
    """
    if levels < 0:
        raise ValueError("levels must be nonnegative")
    parent = np.arange(mesh.n_triangles)
    out = mesh
    for _ in range(levels):
        out, step_parent = _red_refine(out)
        parent = parent[step_parent]
    return _replace(out, refinement_parent=parent)


def _replace(mesh: Triangulation2D, **changes) -> Triangulation2D:
    fields = dict(vertices=mesh.vertices, triangles=mesh.triangles, labels=mesh.labels,
                  boundary_edges=mesh.boundary_edges, boundary_owner=mesh.boundary_owner,
                  periodic_map=mesh.periodic_map, refinement_parent=mesh.refinement_parent,
                  separate_subdomains=mesh.separate_subdomains, lower=mesh.lower,
                  period=mesh.period)
    fields.update(changes)
    return Triangulation2D(**fields)


def _red_refine(mesh: Triangulation2D):
    t = mesh.triangles
    nv = mesh.n_vertices
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    key = np.sort(edges, axis=1)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.ravel()
    mids = 0.5 * (mesh.vertices[uniq[:, 0]] + mesh.vertices[uniq[:, 1]])
    vertices = np.vstack([mesh.vertices, mids])
    nt = len(t)
    m01 = nv + inv[:nt]
    m12 = nv + inv[nt:2 * nt]
    m20 = nv + inv[2 * nt:]
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    children = np.stack([
        np.column_stack([a, m01, m20]),
        np.column_stack([m01, b, m12]),
        np.column_stack([m20, m12, c]),
        np.column_stack([m01, m12, m20]),
    ], axis=1).reshape(-1, 3)
    parent = np.repeat(np.arange(nt), 4)
    labels = mesh.labels[parent]
    pmap = None
    if mesh.is_periodic:
        pmap = periodic_map_from_coordinates(vertices, mesh.lower, mesh.period)
    bedges, owner = _boundary_edges(children, np.arange(len(vertices)))
    out = Triangulation2D(vertices=vertices, triangles=children, labels=labels,
                          boundary_edges=bedges, boundary_owner=owner, periodic_map=pmap,
                          separate_subdomains=mesh.separate_subdomains,
                          lower=mesh.lower, period=mesh.period)
    return out, parent


def tile_cell_mesh(mesh: Triangulation2D, copies: int = 3):
    """Non-periodic ``copies x copies`` tiling of a cell mesh.

    Returns the tiled mesh and, per tiled triangle, the index of the
    original triangle it is a copy of. Copy ``(copies//2, copies//2)`` is
    the central one; its triangles are ``central + arange(n_triangles)``.
    """
    if not mesh.is_periodic:
        raise ValueError("tiling needs a periodic cell mesh")
    verts, tris, labels, origin = [], [], [], []
    nv = mesh.n_vertices
    k = 0
    for jy in range(copies):
        for ix in range(copies):
            shift = np.array([ix, jy], dtype=float) * mesh.period
            verts.append(mesh.vertices + shift)
            tris.append(mesh.triangles + k * nv)
            labels.append(mesh.labels)
            origin.append(np.arange(mesh.n_triangles))
            k += 1
    vertices = np.vstack(verts)
    triangles = np.vstack(tris)
    # merge coincident vertices
    key = np.round(vertices / mesh.period * 2**20).astype(np.int64)
    _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inv = inv.ravel()
    vertices = vertices[first]
    triangles = inv[triangles]
    bedges, owner = _boundary_edges(triangles, np.arange(len(vertices)))
    tiled = Triangulation2D(vertices=vertices, triangles=triangles,
                            labels=np.concatenate(labels), boundary_edges=bedges,
                            boundary_owner=owner, separate_subdomains=mesh.separate_subdomains,
                            lower=mesh.lower, period=copies * mesh.period)
    central = (copies // 2 * copies + copies // 2) * mesh.n_triangles
    return tiled, np.concatenate(origin), central


# --------------------------------------------------------------------------
# patches


@dataclass(frozen=True, eq=False)
class Patch:
    seed: np.ndarray
    order: int
    member_triangles: np.ndarray
    wrapped: bool = False

    def __contains__(self, t) -> bool:
        return bool(np.isin(t, self.member_triangles).all())

    @property
    def size(self) -> int:
        return len(self.member_triangles)


def _as_seed(mesh: Triangulation2D, seed) -> np.ndarray:
    s = np.unique(np.atleast_1d(np.asarray(seed, dtype=np.int64)))
    if s.size == 0:
        raise ValueError("seed must be nonempty")
    if s.min() < 0 or s.max() >= mesh.n_triangles:
        raise IndexError("seed triangle index out of range")
    return s


def _grow(adjacency: sp.csr_matrix, members: np.ndarray, steps: int) -> np.ndarray:
    mask = np.zeros(adjacency.shape[0], dtype=bool)
    mask[members] = True
    for _ in range(steps):
        frontier = adjacency[np.flatnonzero(mask)]
        mask[frontier.indices] = True
    return np.flatnonzero(mask)


def patch(mesh: Triangulation2D, seed, m: int) -> Patch:
    """m-th order patch N^m(seed); m = 0 returns the seed itself."""
    if m < 0:
        raise ValueError("m must be nonnegative")
    s = _as_seed(mesh, seed)
    members = _grow(mesh.adjacency, s, m)
    wrapped = False
    if mesh.is_periodic and m > 0:
        flat = _replace(mesh, periodic_map=None)
        wrapped = len(_grow(flat.adjacency, s, m)) != len(members)
    return Patch(seed=s, order=m, member_triangles=members, wrapped=wrapped)


def neighborhood(mesh: Triangulation2D, seed) -> Patch:
    """First order patch: every triangle touching the closure of the seed."""
    return patch(mesh, seed, 1)


def overlap_constant(mesh: Triangulation2D, m: int) -> int:
    """max over triangles T of the number of triangles in N^m(T)."""
    if m == 0:
        return 1
    reach = sp.identity(mesh.n_triangles, dtype=bool, format="csr")
    adj = mesh.adjacency
    for _ in range(m):
        reach = (reach @ adj).astype(bool)
    return int(np.diff(reach.indptr).max())


def fine_triangles_in(fine: Triangulation2D, coarse_triangles: Iterable[int]) -> np.ndarray:
    """Fine triangles whose coarse ancestor is in ``coarse_triangles``."""
    if fine.refinement_parent is None:
        raise ValueError("fine mesh carries no refinement links")
    return np.flatnonzero(np.isin(fine.refinement_parent, np.asarray(list(coarse_triangles))))


# --------------------------------------------------------------------------
# text format


def write_mesh(mesh: Triangulation2D) -> str:
    lines = [f"vertices {mesh.n_vertices}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines.append(f"triangles {mesh.n_triangles}")
    lines += [f"{i} {j} {k} {l}" for (i, j, k), l in zip(mesh.triangles.tolist(), mesh.labels.tolist())]
    if mesh.is_periodic:
        lines.append(f"periodic {len(mesh.periodic_map)}")
        lines += [f"{s} {m}" for s, m in mesh.periodic_map.tolist()]
    return "\n".join(lines) + "\n"


def read_mesh(text: str) -> Triangulation2D:
    """Parse the format written by :func:`write_mesh`.

    A ``periodic`` block marks a unit-cell mesh: its period is inferred
    from the vertex bounding box and patches are kept inside subdomains.
    """
    rows = [ln.split() for ln in text.splitlines() if ln.strip()]
    pos = 0

    def header(name):
        nonlocal pos
        if rows[pos][0] != name:
            raise ValueError(f"expected '{name}' header, got {' '.join(rows[pos])!r}")
        count = int(rows[pos][1])
        pos += 1
        return count

    nv = header("vertices")
    vertices = np.array([[float(a), float(b)] for a, b in rows[pos:pos + nv]])
    pos += nv
    nt = header("triangles")
    block = np.array([[int(x) for x in r] for r in rows[pos:pos + nt]], dtype=np.int64).reshape(-1, 4)
    pos += nt
    pmap = None
    if pos < len(rows):
        npairs = header("periodic")
        pmap = np.array([[int(a), int(b)] for a, b in rows[pos:pos + npairs]], dtype=np.int64).reshape(-1, 2)
    triangles, labels = block[:, :3], block[:, 3]
    bedges, owner = _boundary_edges(triangles, np.arange(nv))
    lower = float(vertices.min())
    period = float(vertices.max() - vertices.min())
    return Triangulation2D(vertices=vertices, triangles=triangles, labels=labels,
                           boundary_edges=bedges, boundary_owner=owner, periodic_map=pmap,
                           separate_subdomains=pmap is not None, lower=lower, period=period)
