import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twoscale_lod.mesh import (INCLUSION, MATRIX, OMEGA, OUTSIDE, AlignmentError, MacroDomain, UnitCell,
                               build_structured_mesh, fine_triangles_in, neighborhood, overlap_constant,
                               patch, read_mesh, refine_uniform, tile_cell_mesh, write_mesh)


def vertex_sharing_neighbours(mesh, members, ids):
    """Brute-force oracle: triangles sharing a (torus) vertex with the member set."""
    tv = ids[mesh.triangles]
    touched = set(tv[list(members)].ravel())
    out = set()
    for t in range(mesh.n_triangles):
        if mesh.separate_subdomains and mesh.labels[t] != mesh.labels[list(members)[0]]:
            continue
        if touched.intersection(tv[t]):
            out.add(t)
    return out | set(members)


def test_cell_mesh_counts():
    Y = build_structured_mesh(UnitCell(), 4)
    assert Y.n_triangles == 64
    assert Y.n_vertices == 5 * 5 + 4 * 4
    # 4 left/right pairs, 4 bottom/top pairs, and the top-right corner
    assert len(Y.periodic_map) == 9
    assert len(np.unique(Y.torus_vertex)) == 2 * 16
    assert set(np.unique(Y.labels)) == {MATRIX, INCLUSION}
    assert np.isclose(np.abs(Y.areas[Y.labels == INCLUSION]).sum(), 0.25)


def test_macro_mesh_counts():
    G = build_structured_mesh(MacroDomain(omega_lower=None), 2)
    assert G.n_triangles == 16 and G.n_vertices == 13
    assert G.periodic_map is None
    G = build_structured_mesh(MacroDomain(), 4)
    assert np.isclose(np.abs(G.areas[G.labels == OMEGA]).sum(), 0.25)
    assert np.isclose(np.abs(G.areas).sum(), 1.0)


def test_alignment_error():
    with pytest.raises(AlignmentError):
        build_structured_mesh(UnitCell(), 3)
    with pytest.raises(AlignmentError):
        build_structured_mesh(MacroDomain(), 2)


def test_refinement():
    G = build_structured_mesh(MacroDomain(omega_lower=None), 2)
    F = refine_uniform(G, 1)
    assert F.n_triangles == 64
    assert np.array_equal(np.bincount(F.refinement_parent), np.full(16, 4))
    same = refine_uniform(G, 0)
    assert np.array_equal(same.triangles, G.triangles)
    assert np.array_equal(same.refinement_parent, np.arange(16))
    # fine triangles lie inside their parent
    c = F.centroids
    for t in range(F.n_triangles):
        p = G.vertices[G.triangles[F.refinement_parent[t]]]
        lam = np.linalg.solve(np.column_stack([p[1] - p[0], p[2] - p[0]]), c[t] - p[0])
        assert lam.min() > 0 and lam.sum() < 1
    assert np.isclose(F.shape_ratios().max(), G.shape_ratios().max())


def test_refined_cell_mesh_wraps_to_torus():
    Y = refine_uniform(build_structured_mesh(UnitCell(), 4), 2)
    lower, period = Y.lower, Y.period
    # every boundary edge on x = lower has a partner on x = lower + period
    for axis in (0, 1):
        v = Y.vertices
        lo = np.flatnonzero(np.isclose(v[:, axis], lower))
        hi = np.flatnonzero(np.isclose(v[:, axis], lower + period))
        assert len(lo) == len(hi)
        shifted = v[lo].copy()
        shifted[:, axis] += period
        key = lambda a: sorted(map(tuple, np.round(a, 12)))
        assert key(shifted) == key(v[hi])
    # torus Euler characteristic: V - E + F = 0
    tv = Y.torus_vertex[Y.triangles]
    edges = {tuple(sorted(e)) for t in tv for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0]))}
    assert len(np.unique(Y.torus_vertex)) - len(edges) + Y.n_triangles == 0


def test_neighborhood_matches_enumeration():
    G = build_structured_mesh(MacroDomain(), 8)
    ids = np.arange(G.n_vertices)
    T = int(np.flatnonzero(np.all(np.isclose(G.centroids, [0.5 + 1 / 48, 0.5]), axis=1) |
                           (np.linalg.norm(G.centroids - [0.5, 0.5], axis=1) < 0.07))[0])
    got = set(neighborhood(G, [T]).member_triangles)
    assert got == vertex_sharing_neighbours(G, {T}, ids)
    # interior criss-cross triangle: 3 of its vertices touch 4 + 8 + 8 triangles
    assert len(got) == 15
    assert set(patch(G, np.arange(G.n_triangles), 2).member_triangles) == set(range(G.n_triangles))
    with pytest.raises(ValueError):
        neighborhood(G, [])


def test_periodic_neighbourhood_crosses_boundary():
    Y = build_structured_mesh(UnitCell(), 4)
    # a Y* triangle touching the left side of the cell
    left = np.flatnonzero((Y.labels == MATRIX) & np.isclose(Y.vertices[Y.triangles].min(axis=1)[:, 0], Y.lower)
                          & (Y.centroids[:, 0] < Y.lower + 0.1))[0]
    p = patch(Y, [left], 1)
    assert p.wrapped
    assert (Y.centroids[p.member_triangles, 0] > Y.lower + Y.period - 0.25).any()
    assert set(p.member_triangles) == vertex_sharing_neighbours(Y, {left}, Y.torus_vertex)
    assert (Y.labels[p.member_triangles] == MATRIX).all()


@given(st.integers(0, 255), st.integers(0, 4))
@settings(max_examples=40, deadline=None)
def test_patches_nested_and_iterated(seed, m):
    G = build_structured_mesh(MacroDomain(), 8)
    seed = seed % G.n_triangles
    a = set(patch(G, [seed], m).member_triangles)
    b = set(patch(G, [seed], m + 1).member_triangles)
    assert a <= b
    assert b == set(neighborhood(G, sorted(a)).member_triangles)
    assert patch(G, [seed], 0).member_triangles.tolist() == [seed]


def test_inclusion_patches_stay_inside():
    Y = build_structured_mesh(UnitCell(), 8)
    for t in Y.triangles_with_label(INCLUSION):
        assert (Y.labels[patch(Y, [t], 3).member_triangles] == INCLUSION).all()


def test_overlap_constant():
    G = build_structured_mesh(MacroDomain(), 8)
    c = [overlap_constant(G, m) for m in range(5)]
    assert c[0] == 1 and c[1] == 15
    assert all(a <= b for a, b in zip(c, c[1:]))
    # polynomial growth; envelope twice the m=1 constant (see notes)
    c1 = c[1] / 9
    assert all(c[m] <= 2 * c1 * (2 * m + 1) ** 2 for m in range(1, 5))


@pytest.mark.parametrize("m", [1, 2, 3])
def test_torus_patches_match_tiling(m):
    Y = build_structured_mesh(UnitCell(inclusion_side=1 / 3), 6)
    tiled, origin, centre = tile_cell_mesh(Y)
    for t in range(Y.n_triangles):
        torus = set(patch(Y, [t], m).member_triangles)
        flat = patch(tiled, [centre + t], m).member_triangles
        assert torus == set(origin[flat])


def test_fine_triangles_in():
    G = build_structured_mesh(MacroDomain(), 4)
    F = refine_uniform(G, 2)
    assert len(fine_triangles_in(F, [0, 5])) == 32


def test_text_roundtrip():
    for mesh in (build_structured_mesh(MacroDomain(), 4), build_structured_mesh(UnitCell(), 4)):
        back = read_mesh(write_mesh(mesh))
        assert np.array_equal(back.vertices, mesh.vertices)
        assert np.array_equal(back.triangles, mesh.triangles)
        assert np.array_equal(back.labels, mesh.labels)
        assert (back.periodic_map is None) == (mesh.periodic_map is None)
        if mesh.periodic_map is not None:
            assert np.array_equal(back.torus_vertex, mesh.torus_vertex)
    with pytest.raises(ValueError):
        read_mesh("nonsense 3\n")


@given(st.sampled_from([4, 8]), st.integers(0, 2))
@settings(max_examples=6, deadline=None)
def test_refinement_preserves_area_and_labels(n, levels):
    G = build_structured_mesh(MacroDomain(), n)
    F = refine_uniform(G, levels)
    assert np.isclose(np.abs(F.areas).sum(), 1.0)
    assert np.array_equal(F.labels, G.labels[F.refinement_parent])
    assert set(np.unique(F.labels)) == {OUTSIDE, OMEGA}
