"""Synthetic multi-identity face-slab datasets with exact ground truth.

Every identity is a smooth warp ``psi`` of one canonical slab template with a
mouth slit. Surface, bone and lip meshes share the template topology. Frames
are produced by the forward simulator from procedural canonical "muscle"
fields, warped into each identity with the exact rotation of ``psi^-1``.
"""
import hashlib
import json
import logging
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import contact, geom, pd
from .transforms import RigidTransform, polar_rotation, rotation_about_axis

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EXPR_DIM = 8
TEMPLATE_H = 0.125
TEMPLATE_SIZE = np.array([1.0, 1.0, 0.5])
SLIT_LO = np.array([0.25, 0.375, 0.25])
SLIT_HI = np.array([0.75, 0.5, 0.5])
SURFACE_SUBDIV = 3
HINGE = np.array([0.5, 0.6, -0.5])
SKULL_MIN_Y = 0.5
JAW_MAX_Y = 0.25
BONE_LAYERS = 3  # bone plates are point layers at Z = 0, h, 2h
JAW_MAX_ANGLE = 0.15
GT_TOL = 1e-7
GT_MAX_ITERS = 20000
MAX_WARP_ATTEMPTS = 20
_SIDE_EPS = 1e-6
PAYLOAD_MAGIC = b"PHYSFRM1"


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# template


def _grid(u_vals, v_vals):
    """Quad grid triangulation; returns (U, V) flat coordinates and triangles."""
    U, V = np.meshgrid(u_vals, v_vals, indexing="ij")
    nu, nv = len(u_vals), len(v_vals)
    idx = np.arange(nu * nv).reshape(nu, nv)
    a, b, c, d = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    tris = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return U.ravel(), V.ravel(), tris


def _compact(pts, tris):
    used = np.unique(tris)
    remap = -np.ones(len(pts), np.int64)
    remap[used] = np.arange(len(used))
    return pts[used], remap[tris]


@dataclass(frozen=True)
class Template:
    surface_points: np.ndarray
    surface_tris: np.ndarray
    bone_points: np.ndarray
    bone_tris: np.ndarray
    jaw_mask: np.ndarray
    lip_points: np.ndarray
    lip_tris: np.ndarray
    lip_groups: np.ndarray
    hinge: np.ndarray

    def correspondences(self):
        """All template points used as mapping correspondences (surface, bone, lips)."""
        return np.concatenate([self.surface_points, self.bone_points, self.lip_points])


@lru_cache(maxsize=1)
def canonical_template():
    h = TEMPLATE_H
    sx, sy, sz = TEMPLATE_SIZE
    n = int(round(sx / h)) * SURFACE_SUBDIV
    X, Y, tris = _grid(np.linspace(0, sx, n + 1), np.linspace(0, sy, n + 1))
    pts = np.column_stack([X, Y, np.full(X.size, sz)])
    cen = pts[tris].mean(axis=1)
    in_slit = np.all((cen[:, :2] > SLIT_LO[:2]) & (cen[:, :2] < SLIT_HI[:2]), axis=1)
    # outward normal is +z; keep counter-clockwise order seen from the front
    surface_pts, surface_tris = _compact(pts, tris[~in_slit])

    nb = int(round(sx / h)) * 2
    Xb, Yb, tb = _grid(np.linspace(0, sx, nb + 1), np.linspace(0, sy, nb + 1))
    bpts = np.column_stack([Xb, Yb, np.zeros(Xb.size)])
    keep = (bpts[:, 1] >= SKULL_MIN_Y - 1e-12) | (bpts[:, 1] <= JAW_MAX_Y + 1e-12)
    tkeep = keep[tb].all(axis=1)
    cb = bpts[tb].mean(axis=1)
    tkeep &= (cb[:, 1] > SKULL_MIN_Y) | (cb[:, 1] < JAW_MAX_Y)
    plate, plate_tris = _compact(bpts, tb[tkeep][:, ::-1])
    bone_pts = np.concatenate([plate + [0.0, 0.0, k * h] for k in range(BONE_LAYERS)])
    bone_tris = np.concatenate([plate_tris + k * len(plate) for k in range(BONE_LAYERS)])
    jaw_mask = bone_pts[:, 1] <= JAW_MAX_Y + 1e-12

    nx = int(round((SLIT_HI[0] - SLIT_LO[0]) / (h / 2)))
    nz = int(round((SLIT_HI[2] - SLIT_LO[2]) / (h / 2)))
    Xl, Zl, tl = _grid(np.linspace(SLIT_LO[0], SLIT_HI[0], nx + 1), np.linspace(SLIT_LO[2], SLIT_HI[2], nz + 1))
    lower = np.column_stack([Xl, np.full(Xl.size, SLIT_LO[1]), Zl])
    upper = np.column_stack([Xl, np.full(Xl.size, SLIT_HI[1]), Zl])
    lip_pts = np.concatenate([lower, upper])
    lip_tris = np.concatenate([tl[:, ::-1], tl + len(lower)])
    groups = np.r_[np.zeros(len(lower), np.int64), np.ones(len(upper), np.int64)]
    return Template(surface_pts, surface_tris, bone_pts, bone_tris, jaw_mask, lip_pts, lip_tris, groups, HINGE.copy())


def in_template_solid(X):
    """Membership of canonical points in the template volume (slit excluded)."""
    X = np.asarray(X, dtype=float)
    box = np.all((X >= -1e-12) & (X <= TEMPLATE_SIZE + 1e-12), axis=-1)
    slit = np.all((X > SLIT_LO) & (X < SLIT_HI + 1e-12), axis=-1)
    return box & ~slit


def _surface_side(P):
    s = np.column_stack([np.sign(P[:, 0] - 0.5), np.sign(P[:, 1] - 0.5 * (SLIT_LO[1] + SLIT_HI[1])), -np.ones(len(P))])
    return _SIDE_EPS * s


def _bone_side(P):
    return _SIDE_EPS * np.column_stack([-np.sign(P[:, 0] - 0.5), -np.sign(P[:, 1] - 0.5), np.ones(len(P))])


def _lip_side(groups):
    s = np.zeros((len(groups), 3))
    s[:, 1] = np.where(groups == 0, -1.0, 1.0)
    s[:, 2] = -1.0
    return _SIDE_EPS * s


# ---------------------------------------------------------------------------
# identity warp


@dataclass(frozen=True)
class Warp:
    """``psi(X) = X + (f, 0, g)``; both offsets vanish at the back face Z=0 except a lateral scale.

    ``f = a0 (X - 1/2) + (Z/D)(a1 sin(pi Y) + a2 cos(pi X))``
    ``g = Z (b0 + b1 sin(pi X) + b2 cos(pi Y))``
    """

    params: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    @property
    def is_identity(self):
        return not any(self.params)

    def apply(self, X):
        X = np.asarray(X, dtype=float)
        a0, a1, a2, b0, b1, b2 = self.params
        x, y, z = X[..., 0], X[..., 1], X[..., 2]
        D = TEMPLATE_SIZE[2]
        f = a0 * (x - 0.5) + (z / D) * (a1 * np.sin(np.pi * y) + a2 * np.cos(np.pi * x))
        g = z * (b0 + b1 * np.sin(np.pi * x) + b2 * np.cos(np.pi * y))
        return np.stack([x + f, y, z + g], axis=-1)

    __call__ = apply

    def jacobian(self, X):
        X = np.asarray(X, dtype=float)
        a0, a1, a2, b0, b1, b2 = self.params
        x, y, z = X[..., 0], X[..., 1], X[..., 2]
        D = TEMPLATE_SIZE[2]
        pi = np.pi
        J = np.zeros(X.shape[:-1] + (3, 3))
        J[..., 0, 0] = 1.0 + a0 - (z / D) * a2 * pi * np.sin(pi * x)
        J[..., 0, 1] = (z / D) * a1 * pi * np.cos(pi * y)
        J[..., 0, 2] = (a1 * np.sin(pi * y) + a2 * np.cos(pi * x)) / D
        J[..., 1, 1] = 1.0
        J[..., 2, 0] = z * b1 * pi * np.cos(pi * x)
        J[..., 2, 1] = -z * b2 * pi * np.sin(pi * y)
        J[..., 2, 2] = 1.0 + b0 + b1 * np.sin(pi * x) + b2 * np.cos(pi * y)
        return J

    def inverse(self, x, iters=50, tol=1e-14):
        """Newton inversion, vectorized over points."""
        x = np.asarray(x, dtype=float)
        X = x.copy()
        for _ in range(iters):
            r = self.apply(X) - x
            if np.abs(r).max(initial=0.0) < tol:
                break
            X = X - np.linalg.solve(self.jacobian(X), r[..., None])[..., 0]
        return X

    def material_to_canonical(self, x):
        """Exact ``phi = psi^-1`` with its rotation ``R_phi = polar(grad psi)^T``."""
        X = self.inverse(x)
        return X, polar_rotation(self.jacobian(X)).transpose(0, 2, 1)


def sample_warp(rng, scale=1.0):
    a0 = rng.uniform(-0.1, 0.1)
    a1, a2 = rng.uniform(-0.05, 0.05, 2)
    b0 = rng.uniform(-0.1, 0.2)
    b1, b2 = rng.uniform(-0.08, 0.08, 2)
    return Warp(tuple(float(v) * scale for v in (a0, a1, a2, b0, b1, b2)))


# ---------------------------------------------------------------------------
# procedural muscles

# center, direction, sigma, base gain (negative gain expands along the direction)
BUNDLES = (
    ((0.5, 0.56, 0.4), (1.0, 0.0, 0.0), 0.12, 0.35),  # upper ring
    ((0.5, 0.31, 0.4), (1.0, 0.0, 0.0), 0.12, 0.35),  # lower ring
    ((0.2, 0.6, 0.35), (-1.0, 1.0, 0.0), 0.13, 0.35),  # left corner raiser
    ((0.8, 0.6, 0.35), (1.0, 1.0, 0.0), 0.13, 0.35),  # right corner raiser
    ((0.5, 0.72, 0.4), (0.0, 1.0, 0.0), 0.12, 0.3),  # upper lip raiser
    ((0.5, 0.18, 0.4), (0.0, 1.0, 0.0), 0.12, 0.3),  # lower lip depressor
    ((0.5, 0.4375, 0.4), (0.0, 1.0, 0.0), 0.12, -0.6),  # lip press
)


@dataclass(frozen=True)
class Style:
    """Per-identity parameters of the procedural actuation generator."""

    gains: tuple = (1.0,) * len(BUNDLES)
    tilts: tuple = (0.0,) * len(BUNDLES)
    jaw_gain: float = 1.0
    jaw_slide: float = 0.0

    def to_dict(self):
        return {"gains": list(self.gains), "tilts": list(self.tilts), "jaw_gain": self.jaw_gain, "jaw_slide": self.jaw_slide}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["gains"]), tuple(d["tilts"]), float(d["jaw_gain"]), float(d["jaw_slide"]))


def sample_style(rng):
    k = len(BUNDLES)
    return Style(
        tuple(float(v) for v in rng.uniform(0.6, 1.4, k)),
        tuple(float(v) for v in rng.uniform(-0.35, 0.35, k)),
        float(rng.uniform(0.7, 1.3)),
        float(rng.uniform(-1.0, 1.0)),
    )


def canonical_actuation(X, expr, style=Style()):
    """Canonical actuation tensors at points ``X`` (N, 3) for one expression code."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    expr = np.asarray(expr, dtype=float)
    A = np.broadcast_to(np.eye(3), (len(X), 3, 3)).copy()
    for k, (c, d, sigma, gain) in enumerate(BUNDLES):
        e = expr[k + 1] if k + 1 < len(expr) else 0.0
        if e == 0.0:
            continue
        d = rotation_about_axis([0, 0, 1], style.tilts[k]) @ (np.asarray(d) / np.linalg.norm(d))
        dd = np.outer(d, d)
        M = -dd + 0.5 * (np.eye(3) - dd)
        r2 = np.sum((X - np.asarray(c)) ** 2, axis=1)
        a = gain * style.gains[k] * e * np.exp(-0.5 * r2 / sigma**2)
        A += a[:, None, None] * M
    return A


def canonical_jaw(expr, style=Style()):
    """Jaw motion in the canonical jaw frame (origin at the hinge)."""
    e0 = float(expr[0]) if len(expr) else 0.0
    R = rotation_about_axis([1, 0, 0], JAW_MAX_ANGLE * style.jaw_gain * e0)
    t = np.array([0.0, -0.01, 0.02 * style.jaw_slide]) * e0
    return RigidTransform(R, t)


def sample_expression(rng, dim=EXPR_DIM):
    e = np.zeros(dim)
    e[0] = rng.uniform(0, 1) if rng.uniform() < 0.5 else 0.0
    for k in range(1, min(dim, len(BUNDLES))):
        if rng.uniform() < 0.5:
            e[k] = rng.uniform(0, 1)
    if dim > len(BUNDLES) and rng.uniform() < 0.3:
        e[len(BUNDLES)] = rng.uniform(0, 0.3)  # gentle lip press, no contact
    return e


# ---------------------------------------------------------------------------
# identities


@dataclass
class SyntheticIdentity:
    seed: int
    warp: Warp
    style: Style
    mesh: geom.HexMesh
    blocks: pd.Blocks
    surface_emb: geom.Embedding
    surface_tris: np.ndarray
    bone_emb: geom.Embedding
    bone_tris: np.ndarray
    jaw_mask: np.ndarray
    lips: contact.ContactProxy
    jaw_frame: RigidTransform
    element_X: np.ndarray  # exact canonical position of every element center
    element_R: np.ndarray  # exact R_phi at every element center
    attempts: int = 1
    _K: object = field(default=None, repr=False)

    @property
    def name(self):
        return f"id{self.seed}"

    @property
    def K(self):
        if self._K is None:
            self._K = pd.assemble_global(self.blocks)
        return self._K

    @property
    def rest_surface(self):
        return self.surface_emb.rest_points

    def correspondences(self):
        """``(material points, canonical points)`` in template order."""
        t = canonical_template()
        mat = np.concatenate([self.surface_emb.rest_points, self.bone_emb.rest_points, self.lips.embedding.rest_points])
        return mat, t.correspondences()

    def world_jaw(self, T_canonical):
        return T_canonical.conjugate(self.jaw_frame)

    def bone_targets(self, T_canonical):
        return pd.jaw_targets(self.bone_emb.rest_points, self.jaw_mask, self.world_jaw(T_canonical))

    def warped_actuation(self, expr, style=None):
        A = canonical_actuation(self.element_X, expr, self.style if style is None else style)
        R = self.element_R
        return R.transpose(0, 2, 1) @ A @ R

    def surface(self, u):
        return self.surface_emb.matrix @ u


def _identity_lattice(warp, tpl, h):
    pts = np.concatenate([warp(tpl.surface_points), warp(tpl.bone_points), warp(tpl.lip_points)])
    sides = np.concatenate([_surface_side(tpl.surface_points), _bone_side(tpl.bone_points), _lip_side(tpl.lip_groups)])
    corners = np.array(np.meshgrid(*[np.linspace(0, s, 9) for s in TEMPLATE_SIZE], indexing="ij")).reshape(3, -1).T
    extent = np.concatenate([warp(corners), pts])
    origin = np.floor(extent.min(axis=0) / h + 1e-9) * h
    dims = np.maximum(np.ceil((extent.max(axis=0) - origin) / h - 1e-9).astype(int), 1)
    idx = np.array(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij")).reshape(3, -1).T
    centers = origin + (idx + 0.5) * h
    occ = in_template_solid(warp.inverse(centers)).reshape(tuple(dims))
    mesh = geom.build_hex_lattice(occ, h, origin=origin)
    elem, _ = geom.locate_points(mesh, pts, side=sides)
    missing = elem < 0
    if missing.any():
        cells = np.clip(np.floor((pts[missing] + sides[missing] - origin) / h).astype(int), 0, dims - 1)
        occ[cells[:, 0], cells[:, 1], cells[:, 2]] = True
        mesh = geom.build_hex_lattice(occ, h, origin=origin)
    return mesh


def make_identity(seed, h=TEMPLATE_H):
    """Deterministic synthetic identity; seed 0 is the canonical template itself."""
    tpl = canonical_template()
    seed = int(seed)
    attempts = 0
    while True:
        attempts += 1
        if seed == 0:
            warp, style = Warp(), Style()
        else:
            rng = np.random.default_rng([seed, attempts])
            warp, style = sample_warp(rng), sample_style(rng)
        probe = np.array(np.meshgrid(*[np.linspace(0, s, 17) for s in TEMPLATE_SIZE], indexing="ij")).reshape(3, -1).T
        if np.all(np.linalg.det(warp.jacobian(probe)) > 0):
            mesh = _identity_lattice(warp, tpl, h)
            X, _ = warp.material_to_canonical(mesh.element_centers())
            if np.all(np.linalg.det(warp.jacobian(X)) > 0):
                break
        log.warning("identity seed %d: warp with det J <= 0 rejected (attempt %d)", seed, attempts)
        if attempts >= MAX_WARP_ATTEMPTS:
            raise DatasetError(f"identity seed {seed}: no valid warp after {attempts} attempts")
    X_e, R_e = warp.material_to_canonical(mesh.element_centers())
    surf = geom.embed_points(mesh, warp(tpl.surface_points), side=_surface_side(tpl.surface_points))
    bones = geom.embed_points(mesh, warp(tpl.bone_points), side=_bone_side(tpl.bone_points))
    lip_emb = geom.embed_points(mesh, warp(tpl.lip_points), side=_lip_side(tpl.lip_groups))
    lips = contact.ContactProxy(lip_emb, tpl.lip_tris, groups=tpl.lip_groups)
    blocks = pd.Blocks(mesh, pd.build_shape_target_blocks(mesh), pd.build_bone_blocks(bones, h=h))
    frame = RigidTransform(polar_rotation(warp.jacobian(tpl.hinge)), warp(tpl.hinge))
    return SyntheticIdentity(
        seed, warp, style, mesh, blocks, surf, tpl.surface_tris.copy(), bones, tpl.bone_tris.copy(),
        tpl.jaw_mask.copy(), lips, frame, X_e, R_e, attempts,
    )


@lru_cache(maxsize=16)
def cached_identity(seed):
    return make_identity(seed)


# ---------------------------------------------------------------------------
# frames


def vertex_normals(points, tris):
    """Area-weighted unit vertex normals."""
    P = np.asarray(points)
    fn = np.cross(P[tris[:, 1]] - P[tris[:, 0]], P[tris[:, 2]] - P[tris[:, 0]])
    n = np.zeros_like(P)
    for k in range(3):
        np.add.at(n, tris[:, k], fn)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


@dataclass
class GroundTruthFrame:
    identity: int  # identity seed
    index: int
    expr: np.ndarray
    actuation: np.ndarray  # warped, (m, 3, 3)
    jaw_rotation: np.ndarray  # canonical jaw frame
    jaw_translation: np.ndarray
    bone_targets: np.ndarray
    u: np.ndarray
    surface: np.ndarray
    normals: np.ndarray
    contact: bool = False
    split: str = "train"
    style_of: int = None  # identity whose style generated the field (defaults to the own one)

    @property
    def jaw(self):
        return RigidTransform(self.jaw_rotation, self.jaw_translation)


def simulate(identity, actuation, bone_targets, with_contact=False, u0=None, tol=GT_TOL, max_iters=GT_MAX_ITERS, **contact_kw):
    blocks = identity.blocks.with_actuation(actuation).with_bone_targets(bone_targets)
    u0 = identity.mesh.vertices if u0 is None else u0
    if with_contact:
        return contact.solve_quasistatic_contact(u0, blocks, identity.lips, tol=tol, max_iters=max_iters, K=identity.K, **contact_kw)
    return pd.solve_quasistatic(u0, blocks, tol=tol, max_iters=max_iters, K=identity.K)


def make_ground_truth(identity, expr, with_contact=False, style=None, index=0, style_of=None, tol=GT_TOL):
    expr = np.asarray(expr, dtype=float)
    style = identity.style if style is None else style
    A = identity.warped_actuation(expr, style)
    T = canonical_jaw(expr, style)
    targets = identity.bone_targets(T)
    state = simulate(identity, A, targets, with_contact, tol=tol)
    if not state.converged:
        raise pd.SolverError(f"ground-truth frame {index} of identity {identity.name} did not converge")
    s = identity.surface(state.u)
    return GroundTruthFrame(
        identity.seed, index, expr, A, T.rotation, T.translation, targets, state.u, s,
        vertex_normals(s, identity.surface_tris), with_contact, style_of=identity.seed if style_of is None else style_of,
    )


def resimulate(identity, frame, tol=GT_TOL):
    """Re-run the forward solver from the stored constraints of a frame."""
    state = simulate(identity, frame.actuation, frame.bone_targets, frame.contact, tol=tol)
    return identity.surface(state.u)


def cross_ground_truth(expr, style_identity, geometry_identity, tol=GT_TOL):
    """Target for ``expr`` performed with the style of one identity on the geometry of another."""
    return make_ground_truth(geometry_identity, expr, style=style_identity.style, style_of=style_identity.seed, tol=tol)


@dataclass
class Dataset:
    identities: list
    frames: list
    config: dict = field(default_factory=dict)

    def identity(self, seed):
        for ident in self.identities:
            if ident.seed == seed:
                return ident
        raise KeyError(f"unknown identity {seed}")

    def split(self, name):
        return [f for f in self.frames if f.split == name]


def _frame_job(args):
    seed, index, expr, with_contact, split = args
    fr = make_ground_truth(cached_identity(seed), expr, with_contact, index=index)
    fr.split = split
    return fr


def identity_seeds(seed, n_identities):
    return [seed * 1000 + k for k in range(n_identities)]


def make_dataset(n_identities=2, n_frames=40, seed=0, expr_dim=EXPR_DIM, holdout=0.2, workers=1):
    """Identities ``seed*1000 + k`` and ``n_frames`` random expression codes each.

    The last ``holdout`` fraction of each identity's codes form the test split.
    """
    if expr_dim < 1:
        raise ValueError("expression dimension must be positive")
    seeds = identity_seeds(seed, n_identities)
    identities = [cached_identity(s) for s in seeds]
    jobs = []
    n_test = int(round(holdout * n_frames))
    for s in seeds:
        rng = np.random.default_rng([seed, s, 7])
        for i in range(n_frames):
            split = "test" if i >= n_frames - n_test else "train"
            jobs.append((s, i, sample_expression(rng, expr_dim), False, split))
    if workers > 1 and jobs:
        with ProcessPoolExecutor(workers) as ex:
            frames = list(ex.map(_frame_job, jobs))
    else:
        frames = [_frame_job(j) for j in jobs]
    config = {"n_identities": n_identities, "n_frames": n_frames, "seed": seed, "expr_dim": expr_dim, "holdout": holdout}
    return Dataset(identities, frames, config)


# ---------------------------------------------------------------------------
# bundle I/O


def _write_payload(path, fr):
    arrays = [fr.expr, fr.actuation.reshape(-1), fr.jaw_rotation.reshape(-1), fr.jaw_translation,
              fr.bone_targets.reshape(-1), fr.u.reshape(-1), fr.surface.reshape(-1), fr.normals.reshape(-1)]
    head = struct.pack("<IIIII", len(fr.expr), len(fr.actuation), len(fr.bone_targets), len(fr.u), len(fr.surface))
    with open(path, "wb") as fh:
        fh.write(PAYLOAD_MAGIC + head)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_payload(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != PAYLOAD_MAGIC:
        raise DatasetError(f"{path}: not a frame payload")
    ne, m, nb, n, ns = struct.unpack_from("<IIIII", data, 8)
    sizes = [ne, 9 * m, 9, 3, 3 * nb, 3 * n, 3 * ns, 3 * ns]
    if len(data) != 28 + 8 * sum(sizes):
        raise DatasetError(f"{path}: truncated payload")
    flat = np.frombuffer(data, "<f8", offset=28)
    out, k = [], 0
    for s in sizes:
        out.append(flat[k:k + s].copy())
        k += s
    expr, A, R, t, bt, u, s, nrm = out
    return expr, A.reshape(m, 3, 3), R.reshape(3, 3), t, bt.reshape(nb, 3), u.reshape(n, 3), s.reshape(ns, 3), nrm.reshape(ns, 3)


def export_dataset(dataset, path):
    """Write a bundle directory; returns its hash."""
    os.makedirs(path, exist_ok=True)
    tpl = canonical_template()
    manifest = {"schema_version": SCHEMA_VERSION, "config": dataset.config, "identities": [], "frames": []}
    geom.write_obj(os.path.join(path, "template_surface.obj"), tpl.surface_points, tpl.surface_tris)
    for ident in dataset.identities:
        d = os.path.join(path, ident.name)
        os.makedirs(d, exist_ok=True)
        geom.write_lattice(os.path.join(d, "lattice.txt"), ident.mesh)
        geom.write_obj(os.path.join(d, "rest_surface.obj"), ident.rest_surface, ident.surface_tris)
        geom.write_obj(os.path.join(d, "bones.obj"), ident.bone_emb.rest_points, ident.bone_tris)
        manifest["identities"].append({
            "name": ident.name, "seed": ident.seed, "attempts": ident.attempts, "warp": list(ident.warp.params),
            "style": ident.style.to_dict(), "lattice": f"{ident.name}/lattice.txt",
            "rest_surface": f"{ident.name}/rest_surface.obj",
        })
    for fr in dataset.frames:
        name = f"id{fr.identity}/frame_{fr.index:04d}"
        _write_payload(os.path.join(path, name + ".bin"), fr)
        ident = dataset.identity(fr.identity)
        geom.write_obj(os.path.join(path, name + ".obj"), fr.surface, ident.surface_tris)
        manifest["frames"].append({
            "identity": fr.identity, "index": fr.index, "split": fr.split, "contact": fr.contact,
            "style_of": fr.style_of, "payload": name + ".bin", "surface": name + ".obj",
        })
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return bundle_hash(path)


def load_dataset(path):
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise DatasetError(f"{path}: missing manifest.json")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"{path}: unsupported schema version {manifest.get('schema_version')}")
    identities = []
    for rec in manifest["identities"]:
        ident = cached_identity(int(rec["seed"]))
        stored = geom.read_lattice(os.path.join(path, rec["lattice"]))
        if stored.n_elements != ident.mesh.n_elements or not np.array_equal(stored.vertices, ident.mesh.vertices):
            raise DatasetError(f"{path}: lattice of {rec['name']} does not match its seed")
        identities.append(ident)
    frames = []
    for rec in manifest["frames"]:
        expr, A, R, t, bt, u, s, nrm = _read_payload(os.path.join(path, rec["payload"]))
        frames.append(GroundTruthFrame(int(rec["identity"]), int(rec["index"]), expr, A, R, t, bt, u, s, nrm,
                                       bool(rec["contact"]), rec["split"], rec.get("style_of")))
    return Dataset(identities, frames, manifest.get("config", {}))


RUN_MANIFEST = "run_manifest.json"


def bundle_hash(path):
    """SHA-256 over the relative paths and bytes of every file in a bundle (run records excluded)."""
    h = hashlib.sha256()
    for root, _, files in sorted(os.walk(path)):
        for name in sorted(files):
            if name == RUN_MANIFEST:
                continue
            full = os.path.join(root, name)
            h.update(os.path.relpath(full, path).encode())
            with open(full, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()
