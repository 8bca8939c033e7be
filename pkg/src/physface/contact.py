"""Barrier-based contact on an embedded triangle proxy.

The proxy points are trilinearly embedded in the simulation lattice
(``p = W u``), so straight-line motion of ``u`` moves every proxy point on a
straight line as well and linear CCD is exact. Pairs are vertex-triangle and
edge-edge combinations closer than ``dhat``; each contributes the clamped log
barrier ``kappa * b(d)``.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import pd
from .kernels import pair_barrier, pair_distance, pair_toi
from .kernels.contact import EE, VT, barrier_scalar, classify_numpy

log = logging.getLogger(__name__)

DHAT_FACTOR = 1e-3
CCD_SCALE = 0.9
MIN_ALPHA = 1e-8
CG_RTOL = 1e-8
CG_MAXITER = 500
FRICTION_MU = 0.3
FRICTION_EPS_FACTOR = 1e-3
AUDIT_HEADER = "sweep,min_distance,pair_count,alpha,E,B"
# process-wide counters read by the benchmark command
STATS = {"cg_solves": 0, "cg_iterations": 0}


class LineSearchError(pd.SolverError):
    pass


def default_dhat(diameter):
    return DHAT_FACTOR * float(diameter)


def default_kappa(blocks, dhat):
    """Barrier stiffness giving forces of the order of a unit-strain elastic force near ``dhat``."""
    return blocks.weight_scale() / (blocks.mesh.h * dhat)


def barrier_1d(d, dhat):
    """``-(d - dhat)^2 ln(d / dhat)`` below ``dhat`` (zero above) and its two derivatives."""
    if not dhat > 0:
        raise ValueError("dhat must be positive")
    b, b1, b2 = barrier_scalar(np.asarray(d, dtype=float), dhat)
    if np.ndim(d) == 0:
        return float(b), float(b1), float(b2)
    return b, b1, b2


def _edges_of(triangles):
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    return np.unique(np.sort(e, axis=1), axis=0)


@dataclass
class ContactProxy:
    """Triangle surface embedded in the lattice, restricted to a collision-prone region."""

    embedding: object  # geom.Embedding, one row per proxy vertex
    triangles: np.ndarray  # (nt, 3)
    region: np.ndarray = None  # bool per proxy vertex
    groups: np.ndarray = None  # int per proxy vertex; only pairs across groups are tested
    edges: np.ndarray = field(default=None)

    def __post_init__(self):
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        n = self.embedding.point_count
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise ValueError("triangle index out of range of the embedded proxy points")
        if self.edges is None:
            self.edges = _edges_of(self.triangles) if len(self.triangles) else np.zeros((0, 2), np.int64)
        self.region = np.ones(n, dtype=bool) if self.region is None else np.asarray(self.region, dtype=bool)
        self.groups = np.zeros(n, dtype=np.int64) if self.groups is None else np.asarray(self.groups, dtype=np.int64)
        if len(self.region) != n or len(self.groups) != n:
            raise ValueError("region and groups need one entry per proxy vertex")

    @property
    def n_points(self):
        return self.embedding.point_count

    @property
    def W(self):
        return self.embedding.matrix

    def positions(self, u):
        return self.W @ np.asarray(u, dtype=float)

    def masked_vertices(self):
        return np.where(self.region)[0]

    def masked_triangles(self):
        return np.where(self.region[self.triangles].all(axis=1))[0]

    def masked_edges(self):
        return np.where(self.region[self.edges].all(axis=1))[0]

    def with_region(self, region):
        return ContactProxy(self.embedding, self.triangles, region, self.groups, self.edges)


@dataclass
class ContactSet:
    kind: np.ndarray  # (P,) VT or EE
    idx: np.ndarray  # (P, 4) proxy vertex indices
    d: np.ndarray  # (P,) distances at collection time
    code: np.ndarray  # (P,) subcase codes

    def __len__(self):
        return len(self.kind)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, np.int64), np.zeros((0, 4), np.int64), np.zeros(0), np.zeros(0, np.int64))

    def min_distance(self):
        return float(self.d.min()) if len(self.d) else np.inf


# ---------------------------------------------------------------------------
# broad phase


def _cell_entries(lo, hi, cell):
    """(item, cell key) for every lattice cell overlapped by each box."""
    a = np.floor(lo / cell).astype(np.int64)
    b = np.floor(hi / cell).astype(np.int64)
    span = b - a + 1
    count = np.prod(span, axis=1)
    item = np.repeat(np.arange(len(lo)), count)
    # local offset of each entry within its box, decoded mixed-radix
    start = np.repeat(np.cumsum(count) - count, count)
    k = np.arange(count.sum()) - start
    sx, sy = span[item, 0], span[item, 1]
    off = np.stack([k % sx, (k // sx) % sy, k // (sx * sy)], axis=1)
    c = a[item] + off
    # hash the (unbounded) integer cell triple into one int64 key
    key = (c[:, 0] * 73856093) ^ (c[:, 1] * 19349663) ^ (c[:, 2] * 83492791)
    return item, key


def hash_candidates(qlo, qhi, plo, phi, cell):
    """Pairs (query, primitive) whose boxes overlap, found through a uniform spatial hash."""
    if len(qlo) == 0 or len(plo) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    pi, pk = _cell_entries(plo, phi, cell)
    qi, qk = _cell_entries(qlo, qhi, cell)
    order = np.argsort(pk, kind="stable")
    pk, pi = pk[order], pi[order]
    left = np.searchsorted(pk, qk, "left")
    right = np.searchsorted(pk, qk, "right")
    cnt = right - left
    q = np.repeat(qi, cnt)
    start = np.repeat(left - (np.cumsum(cnt) - cnt), cnt)
    p = pi[start + np.arange(cnt.sum())]
    if len(q) == 0:
        return q, p
    # dedupe, then exact box overlap (hash collisions and multi-cell boxes)
    nprim = len(plo)
    pairs = np.unique(q * nprim + p)
    q, p = pairs // nprim, pairs % nprim
    ok = np.all((qlo[q] <= phi[p]) & (plo[p] <= qhi[q]), axis=1)
    return q[ok], p[ok]


def _cell_size(dhat, *extents):
    sizes = [dhat] + [float(np.percentile(e, 90)) for e in extents if len(e)]
    return max(sizes) if max(sizes) > 0 else 1.0


def candidate_pairs(proxy, lo_pt, hi_pt, pad):
    """All masked VT/EE candidates whose (padded) bounding boxes overlap.

    ``lo_pt``/``hi_pt`` are per-point boxes (equal for static queries, the swept
    extent for CCD). Returns ``(kind, idx)`` with adjacency and same-group pairs
    removed.
    """
    verts = proxy.masked_vertices()
    tris = proxy.triangles[proxy.masked_triangles()]
    edges = proxy.edges[proxy.masked_edges()]
    kinds, idxs = [], []

    tlo = lo_pt[tris].min(axis=1)
    thi = hi_pt[tris].max(axis=1)
    elo = lo_pt[edges].min(axis=1)
    ehi = hi_pt[edges].max(axis=1)
    cell = _cell_size(pad, (thi - tlo).max(axis=1) if len(tris) else [], (ehi - elo).max(axis=1) if len(edges) else [])

    q, p = hash_candidates(lo_pt[verts] - pad, hi_pt[verts] + pad, tlo, thi, cell)
    v, t = verts[q], tris[p]
    ok = np.all(t != v[:, None], axis=1) & (proxy.groups[v] != proxy.groups[t[:, 0]])
    if ok.any():
        kinds.append(np.full(ok.sum(), VT))
        idxs.append(np.column_stack([v[ok], t[ok]]))

    q, p = hash_candidates(elo - pad, ehi + pad, elo, ehi, cell)
    keep = q < p
    ea, eb = edges[q[keep]], edges[p[keep]]
    ok = (
        (ea[:, 0] != eb[:, 0]) & (ea[:, 0] != eb[:, 1]) & (ea[:, 1] != eb[:, 0]) & (ea[:, 1] != eb[:, 1])
        & (proxy.groups[ea[:, 0]] != proxy.groups[eb[:, 0]])
    )
    if ok.any():
        kinds.append(np.full(ok.sum(), EE))
        idxs.append(np.column_stack([ea[ok], eb[ok]]))
    if not kinds:
        return np.zeros(0, np.int64), np.zeros((0, 4), np.int64)
    return np.concatenate(kinds).astype(np.int64), np.concatenate(idxs).astype(np.int64)


def collect_pairs(proxy, p, dhat):
    """Masked vertex-triangle and edge-edge pairs with distance below ``dhat``."""
    p = np.asarray(p, dtype=float)
    kind, idx = candidate_pairs(proxy, p, p, dhat)
    if len(kind) == 0:
        return ContactSet.empty()
    code, D = classify_numpy(p[idx], kind)
    d = np.sqrt(np.maximum(D, 0.0))
    if np.any(d <= 0.0):
        raise ValueError("proxy is self-intersecting (zero pair distance)")
    keep = d < dhat
    return ContactSet(kind[keep], idx[keep], d[keep], code[keep])


def all_pair_distances(proxy, p):
    """Brute-force distances over every masked pair (used for audits and oracles)."""
    p = np.asarray(p, dtype=float)
    lo = p.min(axis=0)
    span = float(np.max(p.max(axis=0) - lo)) + 1.0
    kind, idx = candidate_pairs(proxy, p, p, span)
    if len(kind) == 0:
        return kind, idx, np.zeros(0)
    _, D = classify_numpy(p[idx], kind)
    return kind, idx, np.sqrt(np.maximum(D, 0.0))


# ---------------------------------------------------------------------------
# barrier assembly


def _scatter_pairs(proxy, cset, g_pairs, H_pairs):
    """Pull per-pair proxy gradients/Hessians back to simulation coordinates."""
    n_p = proxy.n_points
    dof = (3 * cset.idx[:, :, None] + np.arange(3)).reshape(-1, 12)
    g_p = np.zeros(3 * n_p)
    np.add.at(g_p, dof.ravel(), g_pairs.ravel())
    W = proxy.W
    grad = (W.T @ g_p.reshape(-1, 3))
    if H_pairs is None:
        return grad, None
    rows = np.repeat(dof, 12, axis=1).ravel()
    cols = np.tile(dof, (1, 12)).ravel()
    Hp = sp.csr_matrix((H_pairs.ravel(), (rows, cols)), shape=(3 * n_p, 3 * n_p))
    W3 = sp.kron(W, sp.identity(3), format="csr")
    H = (W3.T @ Hp @ W3).tocsr()
    return grad, H


def assemble_barrier(cset, proxy, u, dhat, kappa=1.0, project=True):
    """Total barrier ``B``, its gradient (n, 3) and Hessian (3n, 3n sparse) w.r.t. ``u``."""
    n = proxy.W.shape[1]
    if len(cset) == 0:
        return 0.0, np.zeros((n, 3)), sp.csr_matrix((3 * n, 3 * n))
    p = proxy.positions(u)
    b, g, H, _, _ = pair_barrier(p[cset.idx], cset.kind, dhat, kappa, project)
    grad, Hs = _scatter_pairs(proxy, cset, g, H)
    return float(b.sum()), grad, Hs


def barrier_energy(proxy, u, dhat, kappa=1.0):
    """Barrier value at ``u`` with the pair set recollected there."""
    p = proxy.positions(u)
    cset = collect_pairs(proxy, p, dhat)
    if len(cset) == 0:
        return 0.0, cset
    b, _, _ = barrier_scalar(cset.d, dhat, kappa)
    return float(b.sum()), cset


@dataclass
class TaylorBarrier:
    """Second-order model of ``B`` around ``u_hat`` (the hyperparaboloid used by the global step)."""

    u_hat: np.ndarray
    value0: float
    grad0: np.ndarray
    hess: sp.csr_matrix

    def value(self, u):
        du = (np.asarray(u) - self.u_hat).ravel()
        return self.value0 + float(self.grad0.ravel() @ du) + 0.5 * float(du @ (self.hess @ du))

    def gradient(self, u):
        du = (np.asarray(u) - self.u_hat).ravel()
        return (self.grad0.ravel() + self.hess @ du).reshape(-1, 3)


# ---------------------------------------------------------------------------
# CCD


def ccd_max_step(p_start, p_end, proxy):
    """Largest safe step along ``p_start -> p_end``: 0.9 x earliest impact, or 1."""
    p0 = np.asarray(p_start, dtype=float)
    p1 = np.asarray(p_end, dtype=float)
    lo, hi = np.minimum(p0, p1), np.maximum(p0, p1)
    kind, idx = candidate_pairs(proxy, lo, hi, 0.0)
    if len(kind) == 0:
        return 1.0
    moving = np.any(p0[idx] != p1[idx], axis=(1, 2))
    if not moving.any():
        return 1.0
    toi = pair_toi(p0[idx[moving]], p1[idx[moving]], kind[moving])
    t = float(np.min(toi))
    return 1.0 if not np.isfinite(t) else CCD_SCALE * t


# ---------------------------------------------------------------------------
# global solve with contact


class _Preconditioner(spla.LinearOperator):
    def __init__(self, K):
        super().__init__(np.float64, (3 * K.n, 3 * K.n))
        self.K = K

    def _matvec(self, x):
        return self.K.solve(np.asarray(x).ravel())


def pcg(K, H_extra, rhs, x0=None, rtol=CG_RTOL, maxiter=CG_MAXITER):
    """Solve ``(K + H_extra) x = rhs`` by CG preconditioned with the factorized ``K``."""
    rhs = np.asarray(rhs, dtype=float).ravel()
    Kf = K.full_matrix()
    A = (Kf + H_extra).tocsr() if H_extra is not None else Kf
    M = _Preconditioner(K)
    x0 = K.solve(rhs) if x0 is None else np.asarray(x0, dtype=float).ravel()
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return np.zeros_like(rhs)
    def count(_):
        STATS["cg_iterations"] += 1

    STATS["cg_solves"] += 1
    x, info = spla.cg(A, rhs, x0=x0, rtol=rtol * 0.5, atol=0.0, maxiter=maxiter, M=M, callback=count)
    res = np.linalg.norm(A @ x - rhs) / bnorm
    if res >= rtol:
        raise pd.SolverError(f"PCG did not converge: relative residual {res:.3e} after {maxiter} iterations")
    return x


def solve_contact_global(K, blocks, rotations, u_hat, grad_B, hess_B):
    """Global step with the barrier replaced by its Taylor model at ``u_hat``."""
    rhs = pd.right_hand_side(blocks, rotations)
    if hess_B is None or hess_B.nnz == 0:
        if grad_B is None or not np.any(grad_B):
            return K.solve(rhs)
        return K.solve(rhs - grad_B)
    # Solve for the step from u_hat: same system, but the CG tolerance then
    # scales with the current gradient instead of the full right-hand side.
    u_hat = np.asarray(u_hat, dtype=float)
    g = K.matvec(u_hat) - rhs + np.asarray(grad_B).reshape(-1, 3)
    step = pcg(K, hess_B, -g.ravel())
    return u_hat + step.reshape(-1, 3)


# ---------------------------------------------------------------------------
# friction


@dataclass
class FrictionSet:
    """Lagged friction data computed from the previous frame's converged contact state."""

    idx: np.ndarray  # (P, 4)
    coeff: np.ndarray  # (P, 4) closest-point weights: relative position = sum coeff_k x_k
    basis: np.ndarray  # (P, 3, 2) tangent frame
    normal_force: np.ndarray  # (P,)
    x_ref: np.ndarray  # (P, 4, 3) proxy positions at the previous frame
    mu: float
    eps: float

    def __len__(self):
        return len(self.idx)


def _closest_point_coefficients(x, kind):
    """Weights ``c`` with ``sum_k c_k x_k`` = vector between the closest points of each pair."""
    P = len(x)
    c = np.zeros((P, 4))
    vt = kind == VT
    if vt.any():
        p, a, b, t = (x[vt, i] for i in range(4))
        # closest point on the triangle by dense-free projection + clamping via candidates
        e1, e2, r = b - a, t - a, p - a
        m11, m12, m22 = np.sum(e1 * e1, 1), np.sum(e1 * e2, 1), np.sum(e2 * e2, 1)
        r1, r2 = np.sum(r * e1, 1), np.sum(r * e2, 1)
        det = m11 * m22 - m12 * m12
        s = (m22 * r1 - m12 * r2) / det
        w = (m11 * r2 - m12 * r1) / det
        inside = (s >= 0) & (w >= 0) & (s + w <= 1)
        bary = np.column_stack([1 - s - w, s, w])
        best = np.full(len(p), np.inf)
        for k, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
            q0, q1 = (a, b, t)[i], (a, b, t)[j]
            e = q1 - q0
            tt = np.clip(np.sum((p - q0) * e, 1) / np.sum(e * e, 1), 0, 1)
            dd = np.sum((p - q0 - tt[:, None] * e) ** 2, 1)
            better = ~inside & (dd < best)
            best = np.where(better, dd, best)
            cand = np.zeros((len(p), 3))
            cand[:, i] = 1 - tt
            cand[:, j] = tt
            bary = np.where(better[:, None], cand, bary)
        c[vt, 0] = 1.0
        c[vt, 1:] = -bary
    ee = kind == EE
    if ee.any():
        a0, a1, b0, b1 = (x[ee, i] for i in range(4))
        d1, d2, r = a1 - a0, b1 - b0, a0 - b0
        aa, bb, cc = np.sum(d1 * d1, 1), np.sum(d2 * d2, 1), np.sum(d1 * d2, 1)
        dd, ff = np.sum(d1 * r, 1), np.sum(d2 * r, 1)
        den = aa * bb - cc * cc
        s = np.where(den > 1e-12 * aa * bb, (cc * ff - dd * bb) / np.where(den > 0, den, 1), 0.0)
        s = np.clip(s, 0, 1)
        t = np.clip((cc * s + ff) / bb, 0, 1)
        s = np.clip((cc * t - dd) / aa, 0, 1)
        c[ee] = np.column_stack([1 - s, s, -(1 - t), -t])
    return c


def _tangent_basis(n):
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    helper = np.where(np.abs(n[:, [0]]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
    t1 = np.cross(n, helper)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2], axis=2)


def build_friction_set(cset, proxy, u_prev, dhat, kappa, mu=FRICTION_MU, eps=None, diameter=None):
    """Lag normal forces, closest points and tangent frames at the previous frame's state."""
    if eps is None:
        if diameter is None:
            raise ValueError("need eps or the scene diameter for the default friction smoothing")
        eps = FRICTION_EPS_FACTOR * diameter
    p = proxy.positions(u_prev)
    if len(cset) == 0:
        z = np.zeros((0, 4))
        return FrictionSet(cset.idx, z, np.zeros((0, 3, 2)), np.zeros(0), np.zeros((0, 4, 3)), mu, eps)
    x = p[cset.idx]
    d, _, _, _ = pair_distance(x, cset.kind)
    _, b1, _ = barrier_scalar(d, dhat, kappa)
    coeff = _closest_point_coefficients(x, cset.kind)
    rel = np.einsum("pk,pki->pi", coeff, x)
    basis = _tangent_basis(rel)
    return FrictionSet(cset.idx.copy(), coeff, basis, np.abs(b1), x.copy(), float(mu), float(eps))


def _f0(y, eps):
    return np.where(y < eps, -(y**3) / (3 * eps**2) + y**2 / eps + eps / 3, y)


def friction_assembly(fset, proxy, u):
    """Smoothed lagged friction energy, gradient (n, 3) and Hessian (3n, 3n) at ``u``."""
    n = proxy.W.shape[1]
    if len(fset) == 0 or fset.mu == 0.0:
        return 0.0, np.zeros((n, 3)), sp.csr_matrix((3 * n, 3 * n))
    x = proxy.positions(u)[fset.idx]
    eps = fset.eps
    rel = np.einsum("pk,pki->pi", fset.coeff, x - fset.x_ref)
    uT = np.einsum("pij,pi->pj", fset.basis, rel)  # (P, 2)
    y = np.linalg.norm(uT, axis=1)
    scale = fset.mu * fset.normal_force
    energy = float(np.sum(scale * _f0(y, eps)))
    small = y < eps
    f1_over_y = np.where(small, 2.0 / eps - y / eps**2, 1.0 / np.where(small, 1.0, y))
    g2 = (scale * f1_over_y)[:, None] * uT
    ysafe = np.where(y > 0, y, 1.0)
    outer = uT[:, :, None] * uT[:, None, :]
    H2 = np.where(
        small[:, None, None],
        -outer / (eps**2 * ysafe[:, None, None]) + f1_over_y[:, None, None] * np.eye(2),
        (np.eye(2) - outer / ysafe[:, None, None] ** 2) / ysafe[:, None, None],
    )
    H2 *= scale[:, None, None]
    # J maps the 12 pair coordinates to uT: J[p, a, 3k+i] = coeff[p,k] * basis[p,i,a]
    J = (fset.coeff[:, None, :, None] * np.swapaxes(fset.basis, 1, 2)[:, :, None, :]).reshape(-1, 2, 12)
    g12 = np.einsum("paj,pa->pj", J, g2)
    H12 = np.swapaxes(J, 1, 2) @ H2 @ J
    tmp = ContactSet(np.zeros(len(fset), np.int64), fset.idx, np.zeros(len(fset)), np.zeros(len(fset), np.int64))
    grad, H = _scatter_pairs(proxy, tmp, g12, H12)
    return energy, grad, H


def friction_energy(fset, proxy, u):
    if len(fset) == 0 or fset.mu == 0.0:
        return 0.0
    x = proxy.positions(u)[fset.idx]
    rel = np.einsum("pk,pki->pi", fset.coeff, x - fset.x_ref)
    uT = np.einsum("pij,pi->pj", fset.basis, rel)
    return float(np.sum(fset.mu * fset.normal_force * _f0(np.linalg.norm(uT, axis=1), fset.eps)))


# ---------------------------------------------------------------------------
# contact-aware quasistatic solve


@dataclass
class ContactInfo:
    dhat: float
    kappa: float
    proxy: ContactProxy
    pairs: ContactSet = None
    barrier: float = 0.0
    audit: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    friction: FrictionSet = None

    def audit_lines(self):
        return [AUDIT_HEADER] + list(self.audit)


def solve_quasistatic_contact(
    u0,
    blocks,
    proxy,
    actuation=None,
    tol=pd.DEFAULT_TOL,
    max_iters=pd.DEFAULT_MAX_ITERS,
    dhat=None,
    kappa=None,
    K=None,
    friction=None,
    keep_iterates=False,
):
    """Minimize ``E(u) + B(u) [+ D(u)]`` with barrier-aware local/global sweeps.

    Each sweep: local step, barrier Taylor model at the current iterate,
    PCG global solve, CCD step cap, then backtracking until the true
    objective does not increase.
    """
    if actuation is not None:
        blocks = blocks.with_actuation(actuation)
    if K is None:
        K = pd.assemble_global(blocks)
    if dhat is None:
        dhat = default_dhat(blocks.mesh.diameter())
    if kappa is None:
        kappa = default_kappa(blocks, dhat)
    u = np.array(u0, dtype=float)
    if u.shape != (blocks.mesh.n_vertices, 3) or not np.all(np.isfinite(u)):
        raise ValueError("initial positions must be finite with one row per mesh vertex")
    thr = pd.gradient_threshold(blocks, tol)
    info = ContactInfo(dhat, kappa, proxy, friction=friction)
    state = pd.SimState(u, None, False, np.inf, 0, np.inf, blocks, K, contact=info)

    def objective(x):
        R = pd.local_step(x, blocks)
        e = pd.energy(x, blocks, R)
        b, cset = barrier_energy(proxy, x, dhat, kappa)
        f = friction_energy(friction, proxy, x) if friction is not None else 0.0
        return e, b, f, R, cset

    e, b, f, R, cset = objective(u)
    if len(cset) and cset.min_distance() <= 0:
        raise ValueError("initial state is not penetration-free")
    alpha = 1.0
    for it in range(max_iters):
        if not np.isfinite(e + b + f):
            raise pd.SolverError(f"NaN energy at iteration {it}")
        _, gB, HB = assemble_barrier(cset, proxy, u, dhat, kappa, project=True)
        if friction is not None:
            _, gF, HF = friction_assembly(friction, proxy, u)
            gB, HB = gB + gF, HB + HF
        g = K.matvec(u) - pd.right_hand_side(blocks, R) + gB
        gnorm = float(np.abs(g).max())
        state.trace.append((it, e + b + f, gnorm))
        info.objective.append(e + b + f)
        info.audit.append(f"{it},{float(cset.min_distance())!r},{len(cset)},{float(alpha)!r},{float(e)!r},{float(b)!r}")
        if keep_iterates:
            info.iterates.append(u.copy())
        state.iterations = it + 1
        state.rotations, state.energy, state.grad_norm = R, e + b + f, gnorm
        info.pairs, info.barrier = cset, b
        if gnorm < thr:
            state.converged = True
            break
        u_plus = solve_contact_global(K, blocks, R, u, gB, HB)
        delta = u_plus - u
        p0 = proxy.positions(u)
        alpha = ccd_max_step(p0, proxy.positions(u_plus), proxy)
        current = e + b + f
        while True:
            if alpha < MIN_ALPHA:
                raise LineSearchError(f"line search failure at sweep {it} (alpha={alpha:.3e})")
            cand = u + alpha * delta
            try:
                ne, nb, nf, nR, ncset = objective(cand)
            except ValueError:
                alpha *= 0.5
                continue
            if ne + nb + nf <= current + pd.MONOTONE_SLACK * max(1.0, abs(current)):
                break
            alpha *= 0.5
        if ne + nb + nf > current:
            state.monotone = False
        u, e, b, f, R, cset = cand, ne, nb, nf, nR, ncset
    state.u = u
    return state
