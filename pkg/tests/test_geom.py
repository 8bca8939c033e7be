import numpy as np
import pytest
from hypothesis import given, strategies as st

from physface import geom
from physface.transforms import random_rotations

finite = st.floats(-2.0, 2.0, allow_nan=False)


def _box(nx, ny, nz, h=1.0):
    return geom.build_hex_lattice(((0, 0, 0), (nx * h, ny * h, nz * h)), h)


@pytest.mark.parametrize("h,n_el,n_v", [(1.0, 1, 8), (0.5, 8, 27)])
def test_unit_cube_counts(h, n_el, n_v):
    mesh = geom.build_hex_lattice(((0, 0, 0), (1, 1, 1)), h)
    assert (mesh.n_elements, mesh.n_vertices) == (n_el, n_v)


def test_two_cells_share_a_face():
    mesh = _box(2, 1, 1)
    assert (mesh.n_elements, mesh.n_vertices) == (2, 12)
    shared = set(mesh.elements[0]) & set(mesh.elements[1])
    assert len(shared) == 4
    # the shared vertices all lie on the plane x = 1
    assert np.allclose(mesh.vertices[list(shared), 0], 1.0)


def test_empty_domain():
    with pytest.raises(ValueError, match="empty domain"):
        geom.build_hex_lattice(np.zeros((2, 2, 2), bool), 1.0)


def test_nonpositive_size():
    with pytest.raises(ValueError):
        geom.build_hex_lattice(((0, 0, 0), (1, 1, 1)), 0.0)
    with pytest.raises(ValueError, match="degenerate"):
        geom.shape_gradients(0.0)


def test_elements_are_cubes():
    occ = np.ones((3, 2, 2), bool)
    occ[1, 1, 1] = False
    mesh = geom.build_hex_lattice(occ, 0.3, origin=(1.0, -2.0, 0.5))
    v = mesh.vertices[mesh.elements]
    assert np.all(np.diff(np.sort(mesh.elements, axis=1), axis=1) > 0)
    assert mesh.elements.max() < mesh.n_vertices
    ext = v.max(axis=1) - v.min(axis=1)
    assert np.allclose(ext, 0.3)
    # corners follow the bit pattern of the corner index
    assert np.allclose(v - v[:, :1], 0.3 * geom.CORNER_OFFSETS[None])
    assert mesh.rest_volume() == pytest.approx(0.3**3)


def test_gradient_rest_scaled_rotated(rng):
    mesh = _box(2, 2, 1, 0.5)
    F = geom.deformation_gradients(mesh, mesh.vertices)
    assert np.allclose(F, np.eye(3), atol=1e-14)
    assert np.allclose(geom.deformation_gradients(mesh, 2 * mesh.vertices), 2 * np.eye(3), atol=1e-14)
    Q = random_rotations(rng, 1)[0]
    assert np.allclose(geom.deformation_gradients(mesh, mesh.vertices @ Q.T), Q, atol=1e-12)


def test_gradient_operator_matches_sparse_form(rng):
    mesh = _box(2, 1, 1)
    u = mesh.vertices + 0.1 * rng.normal(size=mesh.vertices.shape)
    G = geom.deformation_gradient_operator(mesh)
    assert G.shape == (2, 9, 24)
    for e in range(2):
        vecF = G[e] @ u[mesh.elements[e]].ravel()
        assert np.allclose(vecF.reshape(3, 3), geom.deformation_gradients(mesh, u)[e], atol=1e-14)


@given(st.lists(finite, min_size=12, max_size=12))
def test_affine_maps_give_constant_gradient(vals):
    M = np.array(vals[:9]).reshape(3, 3)
    t = np.array(vals[9:])
    mesh = _box(2, 2, 2, 0.5)
    F = geom.deformation_gradients(mesh, mesh.vertices @ M.T + t)
    assert np.allclose(F, M, atol=1e-12)


def test_embedding_center_and_corner():
    mesh = _box(1, 1, 1)
    emb = geom.embed_points(mesh, [[0.5, 0.5, 0.5], [1.0, 0.0, 1.0]])
    W = emb.matrix.toarray()
    assert np.allclose(W[0], 1 / 8)
    corner = np.where(np.all(mesh.vertices == [1, 0, 1], axis=1))[0][0]
    assert W[1, corner] == pytest.approx(1.0)
    assert np.count_nonzero(W[1]) == 1


def test_embedding_trilinear_formula():
    mesh = _box(1, 1, 1)
    W = geom.embed_points(mesh, [[0.25, 0.5, 0.5]]).matrix.toarray()[0]
    for v, x in enumerate(mesh.vertices):
        wx = 0.25 if x[0] else 0.75
        assert W[v] == pytest.approx(wx * 0.5 * 0.5, abs=1e-15)


def test_embedding_rows(rng):
    mesh = _box(3, 2, 2, 0.5)
    pts = rng.uniform([0, 0, 0], [1.5, 1.0, 1.0], (50, 3))
    emb = geom.embed_points(mesh, pts)
    for row in emb.rows():
        assert len(row) <= 8
        w = np.array([x for _, x in row])
        assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12
    assert np.abs(geom.apply_embedding(emb, mesh.vertices) - pts).max() < 1e-10 * mesh.h


def test_embedding_outside_reports_index():
    mesh = _box(1, 1, 1)
    with pytest.raises(ValueError, match="outside all elements: 1"):
        geom.embed_points(mesh, [[0.5, 0.5, 0.5], [1.5, 0.5, 0.5]])


def test_embedding_snaps_within_tolerance():
    mesh = _box(1, 1, 1)
    emb = geom.embed_points(mesh, [[1.0 + 1e-11, 0.5, 0.5]])
    assert emb.element[0] == 0


def test_embedding_in_lattice_with_holes():
    occ = np.zeros((3, 1, 1), bool)
    occ[0] = occ[2] = True
    mesh = geom.build_hex_lattice(occ, 1.0)
    # face points of the gap are still embedded in a neighbouring occupied cell
    emb = geom.embed_points(mesh, [[1.0, 0.5, 0.5], [2.0, 0.5, 0.5]])
    assert list(emb.element) == [0, 1]
    with pytest.raises(ValueError):
        geom.embed_points(mesh, [[1.5, 0.5, 0.5]])


def test_apply_embedding_dense_reference(rng):
    mesh = _box(2, 2, 1)
    emb = geom.embed_points(mesh, rng.uniform([0, 0, 0], [2, 2, 1], (20, 3)))
    u = rng.normal(size=mesh.vertices.shape)
    assert np.allclose(geom.apply_embedding(emb, u), emb.matrix.toarray() @ u, atol=1e-14)
    assert np.allclose(geom.apply_embedding(emb, mesh.vertices + [1, 2, 3]), emb.rest_points + [1, 2, 3], atol=1e-12)
    with pytest.raises(ValueError):
        geom.apply_embedding(emb, u[:-1])


@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
def test_embedding_rigid_and_linear(seed, a, b):
    r = np.random.default_rng(seed)
    mesh = _box(2, 1, 1, 0.5)
    emb = geom.embed_points(mesh, r.uniform([0, 0, 0], [1.0, 0.5, 0.5], (10, 3)))
    Q = random_rotations(r, 1)[0]
    t = r.normal(size=3)
    moved = geom.apply_embedding(emb, mesh.vertices @ Q.T + t)
    assert np.abs(moved - (emb.rest_points @ Q.T + t)).max() < 1e-10 * mesh.h
    u1, u2 = r.normal(size=(2, mesh.n_vertices, 3))
    lhs = geom.apply_embedding(emb, a * u1 + b * u2)
    rhs = a * geom.apply_embedding(emb, u1) + b * geom.apply_embedding(emb, u2)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_obj_round_trip(tmp_path, rng):
    v = rng.normal(size=(6, 3))
    f = np.array([[0, 1, 2], [3, 4, 5]])
    geom.write_obj(tmp_path / "s.obj", v, f)
    v2, f2 = geom.read_obj(tmp_path / "s.obj")
    assert np.allclose(v, v2, rtol=1e-8) and np.array_equal(f, f2)


def test_lattice_round_trip(tmp_path):
    occ = np.ones((3, 2, 2), bool)
    occ[0, 1, 1] = False
    mesh = geom.build_hex_lattice(occ, 0.25, origin=(0.1, 0.2, -0.3))
    geom.write_lattice(tmp_path / "m.txt", mesh)
    back = geom.read_lattice(tmp_path / "m.txt")
    assert np.array_equal(back.occupancy, mesh.occupancy)
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.elements, mesh.elements)
    assert back.h == mesh.h


def test_lattice_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("hello\n")
    with pytest.raises(ValueError, match="not a lattice"):
        geom.read_lattice(p)
