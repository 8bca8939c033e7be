import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from physface import canonical, geom, pd
from physface.transforms import rotation_about_axis


def _random_rotation(rng):
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    return Q * np.sign(np.linalg.det(Q))


def _slab():
    mesh = geom.build_hex_lattice(((0, 0, 0), (1, 1, 0.5)), 0.25)
    v = mesh.vertices
    surf = v[(np.isclose(v, 0) | np.isclose(v, [1, 1, 0.5])).any(axis=1)]
    return mesh, surf


def test_rotation_extract_cases(rng):
    assert np.allclose(canonical.rotation_extract(np.eye(3)), np.eye(3), atol=1e-14)
    Q = _random_rotation(rng)
    assert np.allclose(canonical.rotation_extract(Q), Q, atol=1e-12)
    R = canonical.rotation_extract(Q @ np.diag([0.5, 1.7, 3.0]))
    assert np.abs(R - Q).max() < 1e-10
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-10 and np.linalg.det(R) > 0


def test_rotation_extract_rejects_inverted():
    with pytest.raises(canonical.MappingError, match="inverted mapping Jacobian"):
        canonical.rotation_extract(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(canonical.MappingError, match="inverted"):
        canonical.rotation_extract(np.stack([np.eye(3), np.zeros((3, 3))]))


def test_warp_examples(rng):
    A = np.diag([0.6, 1.2, 0.9]) + 0.1 * np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]])
    assert np.allclose(canonical.warp_actuation(A, np.eye(3)), A, atol=1e-15)
    assert np.allclose(canonical.warp_actuation(np.eye(3), _random_rotation(rng)), np.eye(3), atol=1e-14)
    Rz = rotation_about_axis([0, 0, 1], np.pi / 2)
    assert np.allclose(canonical.warp_actuation(np.diag([0.5, 1.0, 1.0]), Rz), np.diag([1.0, 0.5, 1.0]), atol=1e-15)


@settings(max_examples=60)
@given(st.integers(0, 2**31))
def test_warp_preserves_eigenvalues(seed):
    r = np.random.default_rng(seed)
    M = r.normal(size=(3, 3))
    A = M @ M.T + 0.1 * np.eye(3)
    At = canonical.warp_actuation(A, _random_rotation(r))
    assert np.array_equal(At, At.T)
    assert np.abs(np.linalg.eigvalsh(At) - np.linalg.eigvalsh(A)).max() < 1e-10 * max(1.0, np.abs(A).max())


def test_identity_pair_trains_to_identity():
    mesh, surf = _slab()
    m, trace = canonical.train_mapping(surf, surf, mesh, steps=200, lr=1e-3, width=32)
    l = mesh.diameter()
    assert np.linalg.norm(m(surf) - surf, axis=1).max() < 1e-3 * l
    assert trace.elastic[-1] < 1e-3
    _, J = m.jacobian(mesh.vertices)
    assert np.abs(J - np.eye(3)).max() < 1e-3


def test_smooth_deformation_pair():
    mesh, surf = _slab()

    def psi(x):
        return x + 0.06 * np.stack([np.sin(np.pi * x[:, 1]), 0 * x[:, 0], x[:, 2] * np.cos(np.pi * x[:, 0])], 1)

    m, trace = canonical.train_mapping(surf, psi(surf), mesh, steps=500, lr=1e-3, width=32)
    assert np.linalg.norm(m(surf) - psi(surf), axis=1).max() < 1e-2 * mesh.diameter()
    assert trace.lines()[0] == "step,corr,elastic" and trace.steps[-1] == 499
    cache = canonical.compute_warp_cache(m, mesh)
    assert cache.det.min() > 0
    R = cache.R
    assert np.abs(np.swapaxes(R, 1, 2) @ R - np.eye(3)).max() < 1e-10
    assert np.all(np.linalg.det(R) > 0)


def test_rigid_target_zeroes_regularizer(rng):
    mesh, surf = _slab()
    Q = _random_rotation(rng)
    aff = canonical.AffineMapping(Q, [0.3, -0.1, 2.0])
    _, J = aff.jacobian(mesh.vertices)
    D = J - canonical.rotation_extract(J)
    assert np.abs(D).max() < 1e-12


def test_count_mismatch():
    mesh, surf = _slab()
    with pytest.raises(canonical.MappingError, match="count mismatch"):
        canonical.train_mapping(surf, surf[:-1], mesh, steps=1)


def test_lr_schedule():
    assert canonical.lr_at(0, 100, 1e-3) == 1e-3
    assert canonical.lr_at(49, 100, 1e-3) == 1e-3
    assert canonical.lr_at(75, 100, 1e-3) == pytest.approx(5e-4)
    assert canonical.lr_at(100, 100, 1e-3) == 0.0


def test_mapping_and_warp_cache_io(tmp_path, rng):
    mesh, surf = _slab()
    m = canonical.NetworkMapping.create(rng, [0.5, 0.5, 0.25], 0.5, width=16)
    for layer in m.stack.layers:
        layer.W = layer.W + 0.01 * rng.normal(size=layer.W.shape)
    m.save(tmp_path / "phi.map")
    m2 = canonical.NetworkMapping.load(tmp_path / "phi.map")
    assert np.array_equal(m2(mesh.vertices), m(mesh.vertices))
    cache = canonical.compute_warp_cache(m, mesh)
    canonical.write_warp_cache(tmp_path / "w.warp", cache)
    back = canonical.read_warp_cache(tmp_path / "w.warp")
    assert np.array_equal(back.X, cache.X) and np.array_equal(back.R, cache.R)
    data = (tmp_path / "w.warp").read_bytes()
    (tmp_path / "t.warp").write_bytes(data[:-8])
    with pytest.raises(canonical.MappingError, match="truncated"):
        canonical.read_warp_cache(tmp_path / "t.warp")


def test_quality_report():
    mesh, surf = _slab()
    rep = canonical.quality_report(canonical.AffineMapping(), mesh, surf, surf)
    assert rep["det_min"] == pytest.approx(1.0) and rep["anisotropy_max"] == pytest.approx(1.0)
    assert rep["vertex_error_max"] == 0.0
    assert sum(rep["det_histogram"]["counts"]) == mesh.n_elements


def _solve_box(lo, hi, actuation_of_center, pins_of):
    mesh = geom.build_hex_lattice((lo, hi), 1.0)
    A = actuation_of_center(mesh.element_centers())
    pins = pins_of(mesh.vertices)
    bones = pd.build_bone_blocks(geom.embed_points(mesh, pins), h=1.0)
    blocks = pd.Blocks(mesh, pd.build_shape_target_blocks(mesh, actuation=A), bones)
    return mesh, pd.solve_quasistatic(mesh.vertices, blocks, tol=1e-10, max_iters=20000)


def _match(a, b):
    idx = np.array([np.argmin(np.linalg.norm(b - p, axis=1)) for p in a])
    assert np.abs(b[idx] - a).max() < 1e-9
    return idx


def test_rigid_map_equivariance():
    """Warped actuation on a rigidly moved lattice reproduces the moved solution."""
    Q = rotation_about_axis([0, 0, 1], np.pi / 2) @ rotation_about_axis([1, 0, 0], np.pi / 2)
    Q = np.round(Q)
    t = np.array([5.0, -2.0, 1.0])
    lo1, hi1 = np.zeros(3), np.array([3.0, 2.0, 1.0])
    corners = np.array(np.meshgrid(*zip(lo1, hi1))).reshape(3, -1).T @ Q.T + t
    lo2, hi2 = corners.min(0), corners.max(0)

    def field(X):
        # canonical actuation field, expressed in identity 1 coordinates
        c = np.cos(X[:, 0])[:, None, None]
        B = np.array([[0.3, 0.1, 0.0], [0.1, -0.2, 0.05], [0.0, 0.05, 0.1]])
        return np.eye(3) + c * B

    pins1 = lambda v: v[np.isclose(v[:, 0], 0.0)]
    mesh1, s1 = _solve_box(lo1, hi1, field, pins1)

    phi2 = canonical.AffineMapping(Q.T, -Q.T @ t)
    mesh2 = geom.build_hex_lattice((lo2, hi2), 1.0)
    cache = canonical.compute_warp_cache(phi2, mesh2)
    mesh2, s2 = _solve_box(lo2, hi2, lambda X: cache.warp(field(cache.X)),
                           lambda v: v[np.isclose(phi2(v)[:, 0], 0.0)])
    assert s1.converged and s2.converged
    idx = _match(mesh1.vertices @ Q.T + t, mesh2.vertices)
    l = mesh1.diameter()
    assert np.abs(s1.u - mesh1.vertices).max() > 1e-2 * l
    assert np.abs(s2.u[idx] - (s1.u @ Q.T + t)).max() < 1e-6 * l


def test_identity_actuation_is_neutral(rng):
    mesh = geom.build_hex_lattice(((0, 0, 0), (2, 2, 1)), 1.0)
    R = np.stack([_random_rotation(rng) for _ in range(mesh.n_elements)])
    A = canonical.warp_actuation(np.broadcast_to(np.eye(3), R.shape), R)
    pins = mesh.vertices[mesh.vertices[:, 2] == 0]
    blocks = pd.Blocks(mesh, pd.build_shape_target_blocks(mesh, actuation=A),
                       pd.build_bone_blocks(geom.embed_points(mesh, pins), h=1.0))
    s = pd.solve_quasistatic(mesh.vertices, blocks)
    assert np.abs(s.u - mesh.vertices).max() < 1e-12
