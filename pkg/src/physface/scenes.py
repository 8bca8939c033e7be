"""Small reference scenes shared by the tests, the acceptance checks and the CLI."""
from dataclasses import dataclass

import numpy as np

from . import contact, geom, pd
from .transforms import rotation_about_axis


@dataclass
class Scene:
    mesh: geom.HexMesh
    blocks: pd.Blocks
    proxy: contact.ContactProxy = None
    dhat: float = None
    note: str = ""


def grid_surface(lo, hi, n, z, angle=0.0, center=None):
    """Triangulated ``n x n`` grid on the plane ``z``, optionally rotated in-plane.

    The rotated grid is clipped to the rectangle ``[lo, hi]`` by dropping
    triangles with a vertex outside it.
    """
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    if angle == 0.0:
        s = np.linspace(0.0, 1.0, n + 1)
        X, Y = np.meshgrid(lo[0] + s * (hi[0] - lo[0]), lo[1] + s * (hi[1] - lo[1]), indexing="ij")
        pts = np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, z)])
    else:
        c = (lo + hi) / 2 if center is None else np.asarray(center, float)
        ext = np.max(hi - lo) * 1.5
        s = np.linspace(-ext / 2, ext / 2, n + 1)
        X, Y = np.meshgrid(s, s, indexing="ij")
        ca, sa = np.cos(angle), np.sin(angle)
        pts = np.column_stack([c[0] + ca * X.ravel() - sa * Y.ravel(), c[1] + sa * X.ravel() + ca * Y.ravel(), np.full(X.size, z)])
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b, c_, d = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    tris = np.concatenate([np.column_stack([a, b, c_]), np.column_stack([a, c_, d])])
    if angle != 0.0:
        eps = 1e-12
        inside = np.all((pts[:, :2] >= lo[:2] - eps) & (pts[:, :2] <= hi[:2] + eps), axis=1)
        tris = tris[inside[tris].all(axis=1)]
        used = np.unique(tris)
        remap = -np.ones(len(pts), np.int64)
        remap[used] = np.arange(len(used))
        pts, tris = pts[used], remap[tris]
    return pts, tris


def merge_surfaces(*surfaces):
    pts, tris, group = [], [], []
    offset = 0
    for g, (p, t) in enumerate(surfaces):
        pts.append(p)
        tris.append(t + offset)
        group.append(np.full(len(p), g))
        offset += len(p)
    return np.concatenate(pts), np.concatenate(tris), np.concatenate(group)


def beam_scene(n=4, h=1.0, contract=0.6, tilt=0.0):
    """``n x 1 x 1`` beam clamped at x=0 with the far element actuated."""
    mesh = geom.build_hex_lattice(((0, 0, 0), (n * h, h, h)), h)
    pins = mesh.vertices[np.isclose(mesh.vertices[:, 0], 0.0)]
    bones = pd.build_bone_blocks(geom.embed_points(mesh, pins), h=h)
    A = pd.identity_actuation(mesh.n_elements)
    R = rotation_about_axis([0, 0, 1], tilt)
    A[-1] = R @ np.diag([contract, 1.0 / np.sqrt(contract), 1.0]) @ R.T
    blocks = pd.Blocks(mesh, pd.build_shape_target_blocks(mesh, actuation=A), bones)
    return Scene(mesh, blocks, note="beam")


def two_element_scene(h=1.0):
    """2x1x1 lattice pinned on its x=0 face (adjoint finite-difference scene)."""
    mesh = geom.build_hex_lattice(((0, 0, 0), (2 * h, h, h)), h)
    pins = mesh.vertices[np.isclose(mesh.vertices[:, 0], 0.0)]
    bones = pd.build_bone_blocks(geom.embed_points(mesh, pins), h=h)
    A = np.array([np.diag([0.8, 1.1, 1.05]), np.diag([1.2, 0.9, 1.0])])
    A[1] += 0.1 * np.array([[0, 1, 0], [1, 0, 0.5], [0, 0.5, 0]])
    blocks = pd.Blocks(mesh, pd.build_shape_target_blocks(mesh, actuation=A), bones)
    return Scene(mesh, blocks, note="two-element")


def squash_scene(h=0.25, stretch=1.8, n_lower=6, n_upper=5):
    """Two slabs separated by one empty cell layer.

    The lower slab is pinned at z=0, the upper one at its top face, and the
    upper slab's actuation elongates it along z so it is pressed onto the lower.
    """
    nx = ny = int(round(1.0 / h))
    occ = np.zeros((nx, ny, 5), dtype=bool)
    occ[:, :, :2] = True
    occ[:, :, 3:] = True
    mesh = geom.build_hex_lattice(occ, h)
    z_top = 5 * h
    v = mesh.vertices
    pins = v[np.isclose(v[:, 2], 0.0) | np.isclose(v[:, 2], z_top)]
    bones = pd.build_bone_blocks(geom.embed_points(mesh, pins), h=h)
    A = pd.identity_actuation(mesh.n_elements)
    upper = mesh.cells[:, 2] >= 3
    A[upper] = np.diag([1.0, 1.0, stretch])
    blocks = pd.Blocks(mesh, pd.build_shape_target_blocks(mesh, actuation=A), bones)
    lo, hi = (0.0, 0.0), (nx * h, ny * h)
    lower = grid_surface(lo, hi, n_lower, 2 * h)
    upper_s = grid_surface(lo, hi, n_upper, 3 * h, angle=0.3)
    pts, tris, groups = merge_surfaces(lower, upper_s)
    proxy = contact.ContactProxy(geom.embed_points(mesh, pts), tris, groups=groups)
    return Scene(mesh, blocks, proxy, contact.default_dhat(mesh.diameter()), note="squash")


def contact_pair_scene(h=1.0, push=0.9, n_lower=4, n_upper=6):
    """Two single elements separated by one empty cell; the upper one pushed down by its bone targets.

    Proxy grids differ in resolution and in-plane orientation so the active
    pairs sit in smooth (non-boundary) subcases.
    """
    occ = np.zeros((1, 1, 3), dtype=bool)
    occ[0, 0, 0] = occ[0, 0, 2] = True
    mesh = geom.build_hex_lattice(occ, h)
    v = mesh.vertices
    bottom = v[np.isclose(v[:, 2], 0.0)]
    top = v[np.isclose(v[:, 2], 3 * h)]
    emb = geom.embed_points(mesh, np.concatenate([bottom, top]))
    jaw = np.r_[np.zeros(len(bottom), bool), np.ones(len(top), bool)]
    targets = emb.rest_points.copy()
    targets[jaw, 2] -= push * h
    bones = pd.BoneBlocks(emb, np.full(len(targets), pd.BONE_WEIGHT_FACTOR * h**3), targets)
    blocks = pd.Blocks(mesh, pd.build_shape_target_blocks(mesh), bones)
    # distinct in-plane offsets avoid symmetric (tied, non-smooth) configurations
    lower = grid_surface((0, 0), (h, h), n_lower, h, angle=0.11, center=(0.53 * h, 0.46 * h))
    upper = grid_surface((0, 0), (h, h), n_upper, 2 * h, angle=0.53, center=(0.47 * h, 0.55 * h))
    pts, tris, groups = merge_surfaces(lower, upper)
    proxy = contact.ContactProxy(geom.embed_points(mesh, pts), tris, groups=groups)
    dhat = 0.2 * h
    return Scene(mesh, blocks, proxy, dhat, note="contact-pair")


def friction_drag_scene(h=0.5, push=1.2, n_lower=5, n_upper=7):
    """Two 2x2x1 slabs one cell apart; the upper slab's top pins press it onto the lower one.

    Returns the scene and the mask of bone points that belong to the upper slab
    (the ones moved sideways by :func:`drag_slip`).
    """
    occ = np.zeros((2, 2, 3), dtype=bool)
    occ[:, :, 0] = occ[:, :, 2] = True
    mesh = geom.build_hex_lattice(occ, h)
    v = mesh.vertices
    bottom = v[np.isclose(v[:, 2], 0.0)]
    top = v[np.isclose(v[:, 2], 3 * h)]
    emb = geom.embed_points(mesh, np.concatenate([bottom, top]))
    upper = np.r_[np.zeros(len(bottom), bool), np.ones(len(top), bool)]
    targets = emb.rest_points.copy()
    targets[upper, 2] -= push * h
    bones = pd.BoneBlocks(emb, np.full(len(targets), pd.BONE_WEIGHT_FACTOR * h**3), targets)
    blocks = pd.Blocks(mesh, pd.build_shape_target_blocks(mesh), bones)
    lower_s = grid_surface((0, 0), (2 * h, 2 * h), n_lower, h, angle=0.13, center=(1.02 * h, 0.97 * h))
    upper_s = grid_surface((0, 0), (2 * h, 2 * h), n_upper, 2 * h, angle=0.47, center=(0.98 * h, 1.03 * h))
    pts, tris, groups = merge_surfaces(lower_s, upper_s)
    proxy = contact.ContactProxy(geom.embed_points(mesh, pts), tris, groups=groups)
    return Scene(mesh, blocks, proxy, contact.default_dhat(mesh.diameter()), note="friction-drag"), upper


def drag_slip(mu, drag=0.2, eps=None, tol=1e-8, max_iters=5000, scene=None):
    """Mean tangential slip across the contact after dragging the pressed upper slab by ``drag * h``.

    The slab is first pressed without friction; friction for the drag step is
    lagged at that pressed state. Slip is the relative tangential motion of the
    closest points of every pressed contact pair.
    """
    sc, upper = friction_drag_scene() if scene is None else scene
    h = sc.mesh.h
    pressed = contact.solve_quasistatic_contact(sc.mesh.vertices, sc.blocks, sc.proxy, dhat=sc.dhat, tol=tol, max_iters=max_iters)
    if not pressed.converged or len(pressed.contact.pairs) == 0:
        raise pd.SolverError("pressing step did not reach a converged contact state")
    info = pressed.contact
    fset = contact.build_friction_set(info.pairs, sc.proxy, pressed.u, info.dhat, info.kappa, mu, eps, diameter=sc.mesh.diameter())
    targets = sc.blocks.bones.targets.copy()
    targets[upper, 0] += drag * h
    dragged = contact.solve_quasistatic_contact(
        pressed.u, sc.blocks.with_bone_targets(targets), sc.proxy, dhat=info.dhat, kappa=info.kappa,
        tol=tol, max_iters=max_iters, friction=fset if mu > 0 else None,
    )
    if not dragged.converged:
        raise pd.SolverError("drag step did not converge")
    x0 = sc.proxy.positions(pressed.u)[fset.idx]
    x1 = sc.proxy.positions(dragged.u)[fset.idx]
    rel = np.einsum("pk,pki->pi", fset.coeff, x1 - x0)
    tangential = np.einsum("pij,pi->pj", fset.basis, rel)
    return float(np.linalg.norm(tangential, axis=1).mean())
