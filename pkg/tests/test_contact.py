import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from physface import contact, geom, pd, scenes
from physface.kernels import pair_barrier, pair_distance
from physface.kernels.contact import EE, VT


def make_proxy(points, tris, groups=None, region=None):
    points = np.asarray(points, float)
    lo = np.floor(points.min(axis=0)) - 1
    hi = np.ceil(points.max(axis=0)) + 1
    mesh = geom.build_hex_lattice((lo, hi), 1.0)
    return mesh, contact.ContactProxy(geom.embed_points(mesh, points), np.asarray(tris), region=region, groups=groups)


def tri_samples(a, b, c, n=10_000, rng=None):
    rng = np.random.default_rng(0) if rng is None else rng
    w = rng.dirichlet([1, 1, 1], n)
    # include the boundary densely as well
    t = np.linspace(0, 1, n // 10)[:, None]
    edges = np.concatenate([(1 - t) * a + t * b, (1 - t) * b + t * c, (1 - t) * c + t * a])
    return np.concatenate([w @ np.array([a, b, c]), edges])


# barrier

def test_barrier_clamp():
    assert contact.barrier_1d(1.0, 1.0) == (0.0, 0.0, 0.0)
    assert contact.barrier_1d(2.0, 1.0) == (0.0, 0.0, 0.0)
    dhat = 1e-3
    b, b1, b2 = contact.barrier_1d(dhat * (1 - 1e-6), dhat)
    assert abs(b) < 1e-20 and abs(b1) < 1e-14 and abs(b2) < 1e-5


def test_barrier_half_dhat_and_derivatives():
    dhat = 0.3
    d = dhat / 2
    b, b1, b2 = contact.barrier_1d(d, dhat)
    assert b == pytest.approx(np.log(2) / 4 * dhat**2, rel=1e-14)
    e = 1e-6 * dhat
    fd1 = (contact.barrier_1d(d + e, dhat)[0] - contact.barrier_1d(d - e, dhat)[0]) / (2 * e)
    fd2 = (contact.barrier_1d(d + e, dhat)[1] - contact.barrier_1d(d - e, dhat)[1]) / (2 * e)
    assert fd1 == pytest.approx(b1, rel=1e-6)
    assert fd2 == pytest.approx(b2, rel=1e-6)


def test_barrier_rejects_contact():
    with pytest.raises(ValueError, match="positive distance"):
        contact.barrier_1d(0.0, 1.0)
    with pytest.raises(ValueError):
        contact.barrier_1d(0.5, 0.0)


# pair distances

def test_vertex_above_triangle_interior():
    x = np.array([[[0.2, 0.3, 0.7], [0, 0, 0], [1, 0, 0], [0, 1, 0]]], float)
    d, *_ = pair_distance(x, np.array([VT]))
    assert d[0] == pytest.approx(0.7, abs=1e-15)


def test_vertex_beyond_edge_matches_sampling():
    a, b, c = np.array([0, 0, 0.0]), np.array([1, 0, 0.0]), np.array([0, 1, 0.0])
    p = np.array([0.8, 0.8, 0.3])
    d, *_ = pair_distance(np.array([[p, a, b, c]]), np.array([VT]))
    # distance to the hypotenuse
    t = np.clip(np.dot(p - b, c - b) / np.dot(c - b, c - b), 0, 1)
    assert d[0] == pytest.approx(np.linalg.norm(p - (b + t * (c - b))), rel=1e-12)
    sampled = np.linalg.norm(tri_samples(a, b, c) - p, axis=1).min()
    assert sampled >= d[0] - 1e-12 and sampled - d[0] < 1e-3


def test_parallel_edges_overlap():
    x = np.array([[[0, 0, 0], [2, 0, 0], [0.5, 0.3, 0.4], [3, 0.3, 0.4]]], float)
    d, *_ = pair_distance(x, np.array([EE]))
    assert d[0] == pytest.approx(0.5, rel=1e-12)
    s = np.linspace(0, 1, 801)
    P = x[0, 0] + s[:, None] * (x[0, 1] - x[0, 0])
    Q = x[0, 2] + s[:, None] * (x[0, 3] - x[0, 2])
    grid = np.linalg.norm(P[:, None] - Q[None], axis=2).min()
    assert abs(grid - d[0]) < 1e-9


def test_degenerate_primitives_rejected():
    tri = np.array([[[0.2, 0.2, 1.0], [0, 0, 0], [1, 0, 0], [2, 0, 0]]], float)
    with pytest.raises(ValueError, match="degenerate"):
        pair_distance(tri, np.array([VT]))
    edge = np.array([[[0, 0, 0], [0, 0, 0], [0, 1, 1], [1, 1, 1]]], float)
    with pytest.raises(ValueError, match="degenerate"):
        pair_distance(edge, np.array([EE]))


def _random_pair(seed, kind):
    r = np.random.default_rng(seed)
    x = r.normal(size=(4, 3))
    if kind == VT:
        x[0] += 3 * r.normal(size=3) * 0.3
    return x


@given(st.integers(0, 2**31), st.sampled_from([VT, EE]))
def test_distance_matches_sampling_and_derivatives(seed, kind):
    x = _random_pair(seed, kind)
    d, g, H, _ = pair_distance(x[None], np.array([kind]))
    if kind == VT:
        sampled = np.linalg.norm(tri_samples(x[1], x[2], x[3], 4000) - x[0], axis=1).min()
    else:
        s = np.linspace(0, 1, 401)[:, None]
        P = x[0] + s * (x[1] - x[0])
        Q = x[2] + s * (x[3] - x[2])
        sampled = np.linalg.norm(P[:, None] - Q[None], axis=2).min()
    assert sampled >= d[0] - 1e-10
    assert sampled - d[0] < 0.05 * np.ptp(x, axis=0).max()
    # gradient and Hessian against central differences, away from subcase switches
    e = 1e-6
    flat = x.ravel()
    fd_g = np.zeros(12)
    fd_H = np.zeros((12, 12))
    for k in range(12):
        xp, xm = flat.copy(), flat.copy()
        xp[k] += e
        xm[k] -= e
        dp, gp, _, cp = pair_distance(xp.reshape(1, 4, 3), np.array([kind]))
        dm, gm, _, cm = pair_distance(xm.reshape(1, 4, 3), np.array([kind]))
        if cp[0] != cm[0]:
            return
        fd_g[k] = (dp[0] - dm[0]) / (2 * e)
        fd_H[:, k] = (gp[0] - gm[0]) / (2 * e)
    assert np.allclose(g[0], fd_g, atol=1e-6 * max(1, np.abs(fd_g).max()))
    assert np.allclose(H[0], fd_H, atol=1e-4 * max(1, np.abs(fd_H).max()))


# pair collection

def _two_triangles(gap):
    pts = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.2, 0.2, gap], [1.2, 0.3, gap], [0.3, 1.1, gap]]
    return pts, [[0, 1, 2], [3, 4, 5]], [0, 0, 0, 1, 1, 1]


def test_far_triangles_give_no_pairs():
    pts, tris, groups = _two_triangles(0.5)
    _, proxy = make_proxy(pts, tris, groups)
    assert len(contact.collect_pairs(proxy, proxy.embedding.rest_points, 0.1)) == 0


def _brute_force_pairs(proxy, p, dhat):
    found = set()
    tris = proxy.triangles[proxy.masked_triangles()]
    edges = proxy.edges[proxy.masked_edges()]
    for v in proxy.masked_vertices():
        for t in tris:
            if v in t or proxy.groups[v] == proxy.groups[t[0]]:
                continue
            d, *_ = pair_distance(p[[v, *t]][None], np.array([VT]))
            if d[0] < dhat:
                found.add((VT, v, *t))
    for a, b in itertools.combinations(edges, 2):
        if set(a) & set(b) or proxy.groups[a[0]] == proxy.groups[b[0]]:
            continue
        d, *_ = pair_distance(p[[*a, *b]][None], np.array([EE]))
        if d[0] < dhat:
            key = tuple(sorted([tuple(a), tuple(b)]))
            found.add((EE, *key[0], *key[1]))
    return found


def _as_keys(cset):
    keys = set()
    for k, idx in zip(cset.kind, cset.idx):
        if k == VT:
            keys.add((VT, *idx))
        else:
            key = tuple(sorted([tuple(idx[:2]), tuple(idx[2:])]))
            keys.add((EE, *key[0], *key[1]))
    return keys


def test_collect_pairs_matches_brute_force():
    dhat = 0.1
    pts, tris, groups = _two_triangles(dhat / 2)
    _, proxy = make_proxy(pts, tris, groups)
    p = proxy.embedding.rest_points
    cset = contact.collect_pairs(proxy, p, dhat)
    assert len(cset) > 0
    assert _as_keys(cset) == _brute_force_pairs(proxy, p, dhat)


@settings(max_examples=15)
@given(st.integers(0, 2**31))
def test_collect_pairs_random_surfaces(seed):
    r = np.random.default_rng(seed)
    lower = scenes.grid_surface((0, 0), (1, 1), 3, 0.0, angle=r.uniform(0, 0.5), center=(0.5, 0.5))
    upper = scenes.grid_surface((0, 0), (1, 1), 4, 0.05, angle=r.uniform(0, 0.5), center=(0.5, 0.5))
    pts, tris, groups = scenes.merge_surfaces(lower, upper)
    pts = pts + 0.01 * r.normal(size=pts.shape)
    _, proxy = make_proxy(pts, tris, groups)
    dhat = 0.08
    assert _as_keys(contact.collect_pairs(proxy, pts, dhat)) == _brute_force_pairs(proxy, pts, dhat)


def test_adjacent_triangles_make_no_self_pairs():
    pts = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.01]]
    _, proxy = make_proxy(pts, [[0, 1, 2], [1, 3, 2]], groups=[0, 1, 2, 3])
    cset = contact.collect_pairs(proxy, proxy.embedding.rest_points, 0.5)
    for k, idx in zip(cset.kind, cset.idx):
        if k == VT:
            assert idx[0] not in idx[1:]
        else:
            assert not set(idx[:2]) & set(idx[2:])


def test_region_mask_excludes_pairs():
    dhat = 0.1
    pts, tris, groups = _two_triangles(dhat / 2)
    _, proxy = make_proxy(pts, tris, groups)
    full = contact.collect_pairs(proxy, proxy.embedding.rest_points, dhat)
    assert len(full) > 0 and np.all(np.any(full.idx == 3, axis=1))
    # vertex 3 is the only primitive within dhat; masking it out removes every pair
    masked = proxy.with_region(np.array([True, True, True, False, True, True]))
    assert len(contact.collect_pairs(masked, proxy.embedding.rest_points, dhat)) == 0


# barrier assembly

def test_empty_assembly():
    pts, tris, groups = _two_triangles(0.5)
    mesh, proxy = make_proxy(pts, tris, groups)
    b, g, H = contact.assemble_barrier(contact.ContactSet.empty(), proxy, mesh.vertices, 0.1)
    assert b == 0.0 and not g.any() and H.nnz == 0


def test_assembled_gradient_and_psd(rng):
    dhat = 0.1
    pts, tris, groups = _two_triangles(dhat / 3)
    mesh, proxy = make_proxy(pts, tris, groups)
    u = mesh.vertices + 1e-4 * rng.normal(size=mesh.vertices.shape)
    cset = contact.collect_pairs(proxy, proxy.positions(u), dhat)
    b, g, H = contact.assemble_barrier(cset, proxy, u, dhat, kappa=2.0)

    def B(x):
        bb, *_ = pair_barrier(proxy.positions(x)[cset.idx], cset.kind, dhat, 2.0)
        return float(bb.sum())

    assert B(u) == pytest.approx(b)
    e = 1e-7
    fd = np.zeros(u.size)
    for k in range(u.size):
        up, um = u.ravel().copy(), u.ravel().copy()
        up[k] += e
        um[k] -= e
        fd[k] = (B(up.reshape(-1, 3)) - B(um.reshape(-1, 3))) / (2 * e)
    assert np.allclose(g.ravel(), fd, rtol=1e-5, atol=1e-5 * np.abs(fd).max())
    Hd = H.toarray()
    lam = np.linalg.eigvalsh(0.5 * (Hd + Hd.T))
    assert lam.min() >= -1e-8 * max(np.trace(Hd), 1.0)
    # per-pair projected blocks
    _, _, Hp, _, _ = pair_barrier(proxy.positions(u)[cset.idx], cset.kind, dhat, 2.0, True)
    for blk in Hp:
        ev = np.linalg.eigvalsh(blk)
        assert ev.min() >= -1e-10 * max(np.abs(ev).max(), 1e-300)


def test_taylor_model_exact_at_expansion_point(rng):
    sc = scenes.contact_pair_scene()
    u = sc.mesh.vertices.copy()
    u[:, 2] -= np.where(sc.mesh.vertices[:, 2] > 1.5, 0.85, 0.0)
    cset = contact.collect_pairs(sc.proxy, sc.proxy.positions(u), sc.dhat)
    assert len(cset)
    b, g, H = contact.assemble_barrier(cset, sc.proxy, u, sc.dhat, project=False)
    model = contact.TaylorBarrier(u, b, g, H)
    assert model.value(u) == b
    assert np.array_equal(model.gradient(u), g)
    du = 1e-3 * rng.normal(size=u.shape)
    # gradient of the model is affine with slope H
    assert np.allclose(model.gradient(u + du) - model.gradient(u), (H @ du.ravel()).reshape(-1, 3), atol=1e-12 * abs(H).max())


# CCD

def _vertex_and_triangle():
    pts = [[0.2, 0.2, 1.0], [0, 0, 0], [1, 0, 0], [0, 1, 0]]
    return make_proxy(pts, [[1, 2, 3]], groups=[1, 0, 0, 0])


def test_ccd_no_motion_and_head_on():
    _, proxy = _vertex_and_triangle()
    p0 = proxy.embedding.rest_points
    assert contact.ccd_max_step(p0, p0, proxy) == 1.0
    p1 = p0.copy()
    p1[0, 2] = -1.0  # crosses the plane at alpha = 0.5
    a = contact.ccd_max_step(p0, p1, proxy)
    assert 0.40 <= a <= 0.45
    # bisection oracle on the analytic crossing
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if (p0[0, 2] + mid * (p1[0, 2] - p0[0, 2])) > 0 else (lo, mid)
    assert a == pytest.approx(contact.CCD_SCALE * lo, rel=1e-6)


def test_ccd_tangential_slide():
    _, proxy = _vertex_and_triangle()
    p0 = proxy.embedding.rest_points.copy()
    p0[0, 2] = 0.01
    p1 = p0.copy()
    p1[0, :2] += [0.1, 0.05]
    alphas = np.linspace(0, 1, 1001)
    path = [pair_distance((p0 + a * (p1 - p0))[[0, 1, 2, 3]][None], np.array([VT]))[0][0] for a in alphas]
    assert min(path) > 0
    assert contact.ccd_max_step(p0, p1, proxy) == 1.0


def test_ccd_rejects_intersecting_start():
    pts = [[0.2, 0.2, 0.0], [0, 0, 0], [1, 0, 0], [0, 1, 0]]
    _, proxy = make_proxy(pts, [[1, 2, 3]], groups=[1, 0, 0, 0])
    p0 = proxy.embedding.rest_points
    p1 = p0 + [0, 0, 0.5]
    with pytest.raises(ValueError, match="intersecting"):
        contact.ccd_max_step(p0, p1, proxy)


# contact global solve

def test_global_with_empty_set_matches_pd():
    sc = scenes.beam_scene()
    K = pd.assemble_global(sc.blocks)
    R = pd.local_step(sc.mesh.vertices, sc.blocks)
    n = sc.mesh.n_vertices
    u = contact.solve_contact_global(K, sc.blocks, R, sc.mesh.vertices, np.zeros((n, 3)), None)
    assert np.abs(u - pd.global_step(K, sc.blocks, R)).max() < 1e-12


def test_global_with_active_pairs_residual():
    sc = scenes.contact_pair_scene()
    st_ = contact.solve_quasistatic_contact(sc.mesh.vertices, sc.blocks, sc.proxy, dhat=sc.dhat, tol=1e-4, max_iters=5000)
    u_hat = st_.u
    K = pd.assemble_global(sc.blocks)
    R = pd.local_step(u_hat, sc.blocks)
    info = st_.contact
    cset = contact.collect_pairs(sc.proxy, sc.proxy.positions(u_hat), info.dhat)
    assert len(cset)
    _, gB, HB = contact.assemble_barrier(cset, sc.proxy, u_hat, info.dhat, info.kappa)
    u = contact.solve_contact_global(K, sc.blocks, R, u_hat, gB, HB)
    A = K.full_matrix() + HB
    rhs = HB @ u_hat.ravel() - gB.ravel() + pd.right_hand_side(sc.blocks, R).ravel()
    assert np.linalg.norm(A @ u.ravel() - rhs) < 1e-8 * np.linalg.norm(rhs)


def test_global_is_stationary_at_solution():
    sc = scenes.beam_scene()
    st_ = pd.solve_quasistatic(sc.mesh.vertices, sc.blocks, tol=1e-12, max_iters=20000)
    K = pd.assemble_global(sc.blocks)
    R = pd.local_step(st_.u, sc.blocks)
    n = sc.mesh.n_vertices
    u = contact.solve_contact_global(K, sc.blocks, R, st_.u, np.zeros((n, 3)), None)
    assert np.abs(u - st_.u).max() < 1e-8


def test_pcg_reports_nonconvergence():
    sc = scenes.contact_pair_scene()
    K = pd.assemble_global(sc.blocks)
    H = 1e6 * contact.sp.random(3 * K.n, 3 * K.n, density=0.3, random_state=0)
    H = H @ H.T
    with pytest.raises(pd.SolverError, match="relative residual"):
        contact.pcg(K, H, np.ones(3 * K.n), maxiter=1)


# contact-aware solve

def test_contact_free_reduces_to_pd():
    sc = scenes.beam_scene()
    pts = np.array([[0.5, 0.5, 1.0], [1.5, 0.5, 1.0], [0.5, 0.5, 0.0]])
    proxy = contact.ContactProxy(geom.embed_points(sc.mesh, pts), np.array([[0, 1, 2]]))
    a = pd.solve_quasistatic(sc.mesh.vertices, sc.blocks, tol=1e-10, max_iters=20000)
    b = contact.solve_quasistatic_contact(sc.mesh.vertices, sc.blocks, proxy, tol=1e-10, max_iters=20000)
    assert np.abs(a.u - b.u).max() < 1e-8 * sc.mesh.h
    c = contact.solve_quasistatic_contact(sc.mesh.vertices, sc.blocks, proxy.with_region(np.zeros(3, bool)), tol=1e-10, max_iters=20000)
    assert np.abs(a.u - c.u).max() < 1e-12


def test_squash_stays_penetration_free_and_monotone():
    sc = scenes.squash_scene()
    st_ = contact.solve_quasistatic_contact(sc.mesh.vertices, sc.blocks, sc.proxy, dhat=sc.dhat, tol=1e-6, max_iters=5000, keep_iterates=True)
    assert st_.converged and len(st_.contact.pairs) > 0
    for u in st_.contact.iterates + [st_.u]:
        _, _, d = contact.all_pair_distances(sc.proxy, sc.proxy.positions(u))
        assert d.min() > 0
    obj = np.array(st_.contact.objective)
    assert np.all(np.diff(obj) <= pd.MONOTONE_SLACK * np.maximum(1.0, np.abs(obj[:-1])))
    lines = st_.contact.audit_lines()
    assert lines[0] == contact.AUDIT_HEADER and len(lines) == st_.iterations + 1
    assert all(float(line.split(",")[1]) > 0 for line in lines[1:])


def test_squash_without_contact_interpenetrates():
    sc = scenes.squash_scene()
    st_ = pd.solve_quasistatic(sc.mesh.vertices, sc.blocks, tol=1e-6, max_iters=5000)
    p = sc.proxy.positions(st_.u)
    lower = sc.proxy.groups == 0
    # the upper surface ends up below the lower one somewhere
    assert p[~lower, 2].min() < p[lower, 2].max()


def test_rejects_penetrating_start():
    sc = scenes.contact_pair_scene()
    u0 = sc.mesh.vertices.copy()
    u0[sc.mesh.vertices[:, 2] > 1.5, 2] -= 1.0  # upper surface lands exactly on the lower one
    with pytest.raises(ValueError):
        contact.solve_quasistatic_contact(u0, sc.blocks, sc.proxy, dhat=sc.dhat)


def test_line_search_failure(monkeypatch):
    sc = scenes.contact_pair_scene()
    monkeypatch.setattr(contact, "ccd_max_step", lambda *a: 1e-9)
    with pytest.raises(contact.LineSearchError, match="line search failure"):
        contact.solve_quasistatic_contact(sc.mesh.vertices, sc.blocks, sc.proxy, dhat=sc.dhat)


# friction

def _pressed():
    sc, upper = scenes.friction_drag_scene()
    st_ = contact.solve_quasistatic_contact(sc.mesh.vertices, sc.blocks, sc.proxy, dhat=sc.dhat, tol=1e-8, max_iters=5000)
    return sc, upper, st_


def test_friction_zero_mu_contributes_nothing():
    sc, _, st_ = _pressed()
    info = st_.contact
    fset = contact.build_friction_set(info.pairs, sc.proxy, st_.u, info.dhat, info.kappa, 0.0, diameter=sc.mesh.diameter())
    e, g, H = contact.friction_assembly(fset, sc.proxy, st_.u + 0.01)
    assert e == 0.0 and not g.any() and H.nnz == 0


def test_friction_gradient_matches_fd(rng):
    sc, _, st_ = _pressed()
    info = st_.contact
    fset = contact.build_friction_set(info.pairs, sc.proxy, st_.u, info.dhat, info.kappa, 1.0, diameter=sc.mesh.diameter())
    # keep a single pair
    one = contact.FrictionSet(fset.idx[:1], fset.coeff[:1], fset.basis[:1], fset.normal_force[:1], fset.x_ref[:1], fset.mu, fset.eps)
    for scale in (0.3, 5.0):  # inside and outside the static smoothing zone
        u = st_.u + scale * one.eps * rng.normal(size=st_.u.shape)
        e, g, H = contact.friction_assembly(one, sc.proxy, u)
        h = 1e-7 * one.eps
        fd = np.zeros(u.size)
        fdH = np.zeros((u.size, u.size))
        for k in range(u.size):
            up, um = u.ravel().copy(), u.ravel().copy()
            up[k] += h
            um[k] -= h
            fd[k] = (contact.friction_energy(one, sc.proxy, up.reshape(-1, 3)) - contact.friction_energy(one, sc.proxy, um.reshape(-1, 3))) / (2 * h)
            fdH[:, k] = (contact.friction_assembly(one, sc.proxy, up.reshape(-1, 3))[1] - contact.friction_assembly(one, sc.proxy, um.reshape(-1, 3))[1]).ravel() / (2 * h)
        assert np.abs(g.ravel() - fd).max() <= 1e-4 * np.abs(fd).max()
        assert np.abs(H.toarray() - fdH).max() <= 1e-4 * np.abs(fdH).max()


def test_high_friction_drags_lower_surface_along():
    sc = scenes.friction_drag_scene()
    free = scenes.drag_slip(0.0, scene=sc)
    assert free > 0.5 * 0.2 * sc[0].mesh.h
    assert scenes.drag_slip(1.0, scene=sc) < 0.01 * free
