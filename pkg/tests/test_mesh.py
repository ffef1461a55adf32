import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tentmtp.mesh import (
    MeshError,
    build_interval_mesh,
    build_layered_peterson_mesh,
    build_peterson_mesh,
    build_uniform_square_mesh,
    compute_facets,
    load_mesh,
    mesh_from_json,
    mesh_to_json,
    peterson_bands,
    save_mesh,
    vertex_patch,
)

GENERATORS = [
    lambda: build_interval_mesh(5, -1.0, 2.0),
    lambda: build_uniform_square_mesh(3, "NE"),
    lambda: build_uniform_square_mesh(4, "NW"),
    lambda: build_peterson_mesh(8, 0.75),
    lambda: build_peterson_mesh(8, 0.5, "layered"),
    lambda: build_peterson_mesh(4, 1.0),
]


def test_interval_minimal_case():
    m = build_interval_mesh(1, 0, 1)
    assert m.vertices.ravel().tolist() == [0.0, 1.0]
    assert m.n_elements == 1
    assert len(m.boundary_facet_ids) == 2 and len(m.interior_facet_ids) == 0


def test_interval_uniform_spacing():
    m = build_interval_mesh(4, 0, 1)
    assert np.allclose(m.volumes, 0.25, atol=1e-15)
    assert len(m.interior_facet_ids) == 3


def test_interval_diameters():
    assert np.allclose(build_interval_mesh(10, -1, 1).diameters, 0.2, atol=1e-15)


def test_interval_boundary_markers():
    m = build_interval_mesh(3)
    marks = {m.facets[f].vertices[0]: m.facets[f].marker for f in m.boundary_facet_ids}
    assert marks == {0: 0, 3: 1}


@pytest.mark.parametrize("args", [(0, 0, 1), (3, 1, 1), (3, 2, 1)])
def test_interval_invalid_arguments(args):
    with pytest.raises(MeshError):
        build_interval_mesh(*args)


def test_square_minimal_case():
    m = build_uniform_square_mesh(1, "NE")
    assert m.n_elements == 2 and len(m.interior_facet_ids) == 1


def test_square_area_conservation():
    m = build_uniform_square_mesh(2, "NE")
    assert m.n_elements == 8
    assert abs(m.volumes.sum() - 1.0) < 1e-14


def test_square_nw_diameters():
    assert np.allclose(build_uniform_square_mesh(4, "NW").diameters, np.sqrt(2) / 4, atol=1e-15)


def test_square_rejects_zero():
    with pytest.raises(MeshError):
        build_uniform_square_mesh(0)


def test_peterson_sigma_zero_is_single_band():
    m = build_peterson_mesh(4, 0.0)
    assert peterson_bands(4, 0.0) == [4]
    assert m.n_elements == 32


def test_peterson_sigma_one_gives_n_bands_with_alternating_diagonals():
    assert peterson_bands(4, 1.0) == [1, 1, 1, 1]
    m = build_peterson_mesh(4, 1.0)
    # the diagonal of a cell joins opposite corners; its direction flips from band to band
    slopes = {}
    for f in m.interior_facet_ids:
        a, b = m.vertices[list(m.facets[f].vertices)]
        d = b - a
        if abs(d[0]) > 1e-12 and abs(d[1]) > 1e-12:
            band = int(min(a[0], b[0]) * 4 + 1e-9)
            slopes.setdefault(band, set()).add(np.sign(d[0] * d[1]))
    assert all(len(s) == 1 for s in slopes.values())
    assert [slopes[b].pop() for b in range(4)] in ([1, -1, 1, -1], [-1, 1, -1, 1])


def test_peterson_band_count_area_and_element_count():
    assert len(peterson_bands(8, 0.75)) == round(8**0.75) == 5
    m = build_peterson_mesh(8, 0.75)
    assert abs(m.volumes.sum() - 1.0) < 1e-13
    assert m.n_elements == 2 * 8 * 8


@pytest.mark.parametrize("sigma", [-0.1, 1.5])
def test_peterson_rejects_sigma_outside_unit_interval(sigma):
    with pytest.raises(MeshError):
        build_peterson_mesh(4, sigma)


def test_peterson_rejects_unknown_variant():
    with pytest.raises(MeshError):
        build_peterson_mesh(4, 0.5, "spiral")


@pytest.mark.parametrize("n,sigma", [(4, 0.5), (8, 0.75), (16, 0.75), (8, 1.0)])
def test_layered_peterson_is_conforming_and_fills_the_square(n, sigma):
    m = build_layered_peterson_mesh(n, sigma)
    assert abs(m.volumes.sum() - 1.0) < 1e-13
    assert np.all(m.signed_volumes > 0)
    # conforming: each boundary facet lies on the square boundary
    for f in m.boundary_facet_ids:
        x = m.vertices[list(m.facets[f].vertices)]
        on = (np.abs(x) < 1e-14) | (np.abs(x - 1) < 1e-14)
        assert np.any(np.all(on, axis=0))
    assert set(m.facet_markers[m.boundary_facet_ids]) == {0, 1, 2, 3}


def test_interval_interior_facet_orientation():
    m = build_interval_mesh(2)
    (f,) = m.interior_facet_ids
    facet = m.facets[f]
    assert facet.vertices == (1,)
    assert facet.elements == (0, 1)
    assert facet.normal.tolist() == [1.0]  # out of the lower-index element


def test_square_single_cell_diagonal_normal():
    m = build_uniform_square_mesh(1)
    (f,) = m.interior_facet_ids
    assert abs(np.linalg.norm(m.facets[f].normal) - 1) < 1e-14


def test_peterson_interior_facets_have_two_elements():
    m = build_peterson_mesh(4, 0.75)
    for f in m.interior_facet_ids:
        assert len(m.facets[f].elements) == 2


def test_facet_shared_by_three_elements_is_a_topology_error():
    m = build_uniform_square_mesh(1)
    bad = type(m)(2, np.vstack([m.vertices, [[2.0, 0.5]]]), np.vstack([m.elements, [[0, 4, 3]]]))
    with pytest.raises(MeshError):
        compute_facets(bad)


def test_vertex_patches_in_one_dimension():
    m = build_interval_mesh(4)
    inner = vertex_patch(m, 2)
    assert len(inner.elements) == 2 and len(inner.interior_facets) == 1 and len(inner.boundary_facets) == 0
    left = vertex_patch(m, 0)
    assert len(left.elements) == 1 and len(left.interior_facets) == 0 and len(left.boundary_facets) == 1


def test_centre_patch_of_ne_square_has_six_triangles():
    m = build_uniform_square_mesh(2, "NE")
    v = int(np.argmin(np.linalg.norm(m.vertices - 0.5, axis=1)))
    touching = sum(v in el for el in m.elements)
    assert touching == 6
    assert len(vertex_patch(m, v).elements) == 6


def test_vertex_patch_out_of_range():
    with pytest.raises(MeshError):
        vertex_patch(build_interval_mesh(2), 7)


@pytest.mark.parametrize("make", GENERATORS)
def test_mesh_invariants(make):
    m = make()
    domain = 3.0 if m.dim == 1 else 1.0
    assert abs(m.volumes.sum() - domain) < 1e-12 * domain
    assert np.allclose(np.linalg.norm(m.facet_normals, axis=1), 1.0, atol=1e-14)
    assert m.shape_regularity().max() <= 10
    # every patch element contains its vertex
    for v in range(m.n_vertices):
        assert all(v in m.elements[k] for k in m.patch(v).elements)
    # boundary normals point out of their element, interior normals out of the lower index
    centroids = m.vertices[m.elements].mean(axis=1)
    for f, facet in enumerate(m.facets):
        mid = m.vertices[list(facet.vertices)].mean(axis=0)
        assert (mid - centroids[facet.elements[0]]) @ facet.normal > 0
        if not facet.is_boundary:
            assert facet.elements[0] < facet.elements[1]
            assert (mid - centroids[facet.elements[1]]) @ facet.normal < 0


@pytest.mark.parametrize("variant", ["grid", "layered"])
@pytest.mark.parametrize("n", [4, 8, 16])
def test_peterson_refinement_halves_h_max(n, variant):
    coarse = build_peterson_mesh(n, 0.75, variant)
    fine = build_peterson_mesh(2 * n, 0.75, variant)
    assert abs(fine.h_max / coarse.h_max - 0.5) < 1e-12


def test_json_round_trip(tmp_path):
    m = build_peterson_mesh(4, 0.75)
    doc = mesh_to_json(m)
    assert set(doc) == {"dim", "vertices", "elements", "boundary_markers"}
    json.dumps(doc)
    path = tmp_path / "m.json"
    save_mesh(m, path)
    back = load_mesh(path)
    assert np.array_equal(back.elements, m.elements)
    assert np.array_equal(back.facet_markers, m.facet_markers)


def test_malformed_json_is_a_mesh_error():
    with pytest.raises(MeshError):
        mesh_from_json({"vertices": []})


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 24), st.floats(0.0, 1.0))
def test_peterson_bands_partition_the_columns(n, sigma):
    widths = peterson_bands(n, sigma)
    assert sum(widths) == n and min(widths) >= 1
    assert len(widths) == max(1, round(n**sigma))
    m = build_peterson_mesh(n, sigma)
    assert abs(m.volumes.sum() - 1.0) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 12), st.sampled_from(["NE", "NW"]))
def test_square_meshes_have_2n2_elements(n, diag):
    m = build_uniform_square_mesh(n, diag)
    assert m.n_elements == 2 * n * n
    assert len(m.interior_facet_ids) + len(m.boundary_facet_ids) == m.n_facets
