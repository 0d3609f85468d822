import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thmrom.geometry import (BCConfig, GeometryConfig, body_load_vector, build_constraints, build_mesh,
                             face_load_vector, strain_matrices)


@pytest.fixture(scope="module")
def mesh():
    return build_mesh(GeometryConfig(1.5, 1.6, 2.0, 3, 4, 5))


def test_small_box_counts(mesh):
    assert mesh.n_hex == 60
    assert all(len(v) > 0 for v in mesh.face_sets.values())
    assert len(mesh.cables) == 5
    assert [c.axis for c in mesh.cables] == ["y", "y", "y", "z", "z"]


def test_single_hex_without_cables():
    m = build_mesh(GeometryConfig(1, 1, 1, 1, 1, 1, cables=[]))
    assert (m.n_hex, m.n_nodes, m.n_bar) == (1, 8, 0)


def test_reference_box_counts():
    m = build_mesh(GeometryConfig())
    assert m.n_hex == 480
    assert m.n_bar == 44
    assert len(m.cables) == 5


def test_volume_matches_box(mesh):
    assert mesh.volume == pytest.approx(1.5 * 1.6 * 2.0, rel=1e-12)


def test_cable_nodes_coincide_with_hex_nodes(mesh):
    cn, hn = mesh.tie_pairs.T
    assert np.allclose(mesh.nodes[cn], mesh.nodes[hn], atol=1e-14)
    assert np.all(hn < mesh.n_hex_nodes)
    assert len(np.unique(cn)) == len(cn)
    bar_nodes = np.unique(mesh.bar_elements)
    assert set(bar_nodes) <= set(cn)


def test_face_sets_are_hex_nodes(mesh):
    for ids in mesh.face_sets.values():
        assert np.all(ids < mesh.n_hex_nodes)


def test_misaligned_cable_rejected():
    with pytest.raises(ValueError, match="not node-aligned"):
        build_mesh(GeometryConfig(1.5, 1.6, 2.0, 3, 4, 5, cables=[{"name": "c", "axis": "y", "x": 0.33, "z": 0.4}]))


def test_single_hex_bottom_rows():
    m = build_mesh(GeometryConfig(1, 1, 1, 1, 1, 1, cables=[]))
    bc = BCConfig(lateral_y0_fixed=False, lateral_y1="free", top="free", pin_x=False)
    c = build_constraints(m, bc)
    assert c.n_rows == 4
    assert set(c.labels) == {"dirichlet"}


def test_one_tie_gives_three_rows():
    m = build_mesh(GeometryConfig(1, 1, 1, 1, 1, 1, cables=[{"name": "c", "axis": "z", "x": 0.0, "y": 0.0}]))
    bc = BCConfig(bottom_fixed_z=False, lateral_y0_fixed=False, lateral_y1="free", top="free", pin_x=False)
    c = build_constraints(m, bc)
    # the cable has 2 nodes, each tied with 3 rows
    assert c.n_rows == 3 * len(m.tie_pairs) == 6
    assert c.labels == ["tie_cable"] * 6


def test_constraints_full_row_rank(mesh):
    B = build_constraints(mesh).B.toarray()
    assert np.linalg.matrix_rank(B) == B.shape[0]


def test_quadrature_partition(mesh):
    ent = np.concatenate([mesh.element_gforce_entries(q) for q in range(mesh.n_elements)])
    assert np.array_equal(np.sort(ent), np.arange(mesh.n_gforce))
    assert mesh.n_gforce3d == 6 * 8 * mesh.n_hex


def test_element_dofs(mesh):
    assert len(mesh.element_dofs(0)) == 24
    assert len(mesh.element_dofs(mesh.n_hex)) == 6
    d = np.concatenate([mesh.element_dofs(q) for q in range(mesh.n_elements)])
    assert d.min() >= 0 and d.max() < mesh.n_dofs
    with pytest.raises(IndexError):
        mesh.element_dofs(mesh.n_elements)


def test_face_and_body_load_totals(mesh):
    F = face_load_vector(mesh, "top", (0.0, 0.0, -2.0))
    assert F[2::3].sum() == pytest.approx(-2.0 * 1.5 * 1.6, rel=1e-12)
    G = body_load_vector(mesh, (0.0, 0.0, -3.0))
    assert G[2::3].sum() == pytest.approx(-3.0 * mesh.volume, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1e-3, 1e-3), min_size=12, max_size=12))
def test_affine_displacement_gives_exact_strain(coeffs):
    m = build_mesh(GeometryConfig(1.5, 1.6, 2.0, 2, 2, 2, cables=[]))
    A = np.array(coeffs[:9]).reshape(3, 3)
    c = np.array(coeffs[9:])
    u = (m.nodes @ A.T + c).ravel()
    eps = np.einsum("egij,ej->egi", m.hex_B, u[m.hex_dofs])
    E = 0.5 * (A + A.T)
    expected = np.array([E[0, 0], E[1, 1], E[2, 2], 2 * E[0, 1], 2 * E[1, 2], 2 * E[0, 2]])
    assert np.allclose(eps, expected, atol=1e-15 + 1e-12 * np.abs(A).max())


def test_distorted_hex_rejected():
    coords = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                       [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=float)[None]
    inverted = coords[:, [1, 0, 3, 2, 5, 4, 7, 6]]
    with pytest.raises(ValueError, match="Jacobian"):
        strain_matrices(inverted)
