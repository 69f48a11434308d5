import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from porofix.mesh import (
    Mesh,
    MeshError,
    geometry,
    load_mesh,
    save_mesh,
    structured_square,
    uniform_refine,
    vertex_patch,
)
from conftest import perturbed_square


def test_structured_counts():
    m = structured_square(4)
    assert m.n_vertices == 25
    assert m.n_cells == 32
    # Euler: V - E + F = 1 for a disk
    assert m.n_vertices - m.n_edges + m.n_cells == 1
    assert np.isclose(m.areas.sum(), 1.0)


def test_cells_are_counterclockwise(small_mesh):
    x = small_mesh.vertices[small_mesh.cells]
    cross = (x[:, 1, 0] - x[:, 0, 0]) * (x[:, 2, 1] - x[:, 0, 1]) - (x[:, 1, 1] - x[:, 0, 1]) * (x[:, 2, 0] - x[:, 0, 0])
    assert np.all(cross > 0)


def test_local_edge_opposite_vertex(small_mesh):
    m = small_mesh
    for K in range(m.n_cells):
        for i in range(3):
            e = m.edges[m.cell_edges[K, i]]
            assert m.cells[K, i] not in e


def test_interior_edges_have_opposite_signs(small_mesh):
    m = small_mesh
    total = np.zeros(m.n_edges)
    np.add.at(total, m.cell_edges.ravel(), m.cell_edge_sign.ravel())
    assert np.all(total[~m.boundary_edge] == 0)
    assert np.all(np.abs(total[m.boundary_edge]) == 1)


def test_divergence_theorem_for_normals(small_mesh):
    # sum over a cell of signed |e| n_e vanishes
    m = small_mesh
    v = (m.cell_edge_sign[..., None] * m.edge_lengths[m.cell_edges][..., None]
         * m.edge_normals[m.cell_edges]).sum(axis=1)
    assert np.abs(v).max() < 1e-14


def test_boundary_tags():
    m = structured_square(3)
    tags = m.boundary_tags()
    assert set(tags.values()) == {"left", "right", "top", "bottom"}
    assert len(m.edges_with_tag("left")) == 3


def test_refine_preserves_area_and_tags():
    m = perturbed_square(2)
    r = uniform_refine(m)
    assert r.n_cells == 4 * m.n_cells
    assert np.isclose(r.areas.sum(), m.areas.sum())
    assert len(r.edges_with_tag("top")) == 2 * len(m.edges_with_tag("top"))


def test_roundtrip(tmp_path, small_mesh):
    p = tmp_path / "m.msh"
    save_mesh(small_mesh, p)
    m2 = load_mesh(p)
    assert np.array_equal(m2.cells, small_mesh.cells)
    assert np.array_equal(m2.vertices, small_mesh.vertices)
    assert m2.boundary_tags() == small_mesh.boundary_tags()


def test_load_reports_line(tmp_path):
    p = tmp_path / "bad.msh"
    p.write_text("poromesh 1\nvertices 3\n0 0\n1 0\n0 1\ncells 1\n0 1 x 0\nboundary 0\n")
    with pytest.raises(MeshError, match=":7:"):
        load_mesh(p)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mesh(tmp_path / "nope.msh")


def test_rejects_bad_vertex_index():
    with pytest.raises(MeshError):
        Mesh(np.zeros((3, 2)), [[0, 1, 3]])


def test_patch_and_geometry(small_mesh):
    m = small_mesh
    a = int(np.flatnonzero(~m.boundary_vertex)[0])
    patch = vertex_patch(m, a)
    assert np.all(np.any(m.cells[patch.cells] == a, axis=1))
    g = geometry(m, 0)
    assert np.isclose(g.area, m.areas[0])


@settings(max_examples=25, deadline=None)
@given(st.floats(0.2, 5.0), st.floats(0.2, 5.0), st.floats(-1.0, 1.0))
def test_affine_map_scales_area(sx, sy, shear):
    m = structured_square(2)
    A = np.array([[sx, shear], [0.0, sy]])
    v = m.vertices @ A.T
    m2 = Mesh(v, m.cells, None, m.boundary_tags())
    assert np.isclose(m2.areas.sum(), abs(np.linalg.det(A)))
    assert m2.n_edges == m.n_edges
