"""Unsigned pair distances with derivatives and the clamped log barrier.

A pair is four proxy points ``x[p]`` of shape (4, 3) plus a kind:

* ``VT`` (0): point ``x0`` against triangle ``(x1, x2, x3)``
* ``EE`` (1): edge ``(x0, x1)`` against edge ``(x2, x3)``

The distance is the minimum over the primitives, evaluated with the closed
form of the active subcase (point-point, point-edge, point-plane or
line-line). Derivatives are taken w.r.t. the 12 stacked coordinates.

Subcase codes::

    VT: 0..2 point-vertex(1,2,3), 3..5 point-edge(12, 23, 31), 6 point-plane
    EE: 7..10 vertex-vertex(02, 03, 12, 13), 11..14 vertex-edge
        (0|23, 1|23, 2|01, 3|01), 15 line-line
"""
import numpy as np

from .._jit import njit

VT, EE = 0, 1

# points taking part in each subcase, in the order the local formula expects
SUBCASE_POINTS = (
    (0, 1), (0, 2), (0, 3),
    (0, 1, 2), (0, 2, 3), (0, 3, 1),
    (0, 1, 2, 3),
    (0, 2), (0, 3), (1, 2), (1, 3),
    (0, 2, 3), (1, 2, 3), (2, 0, 1), (3, 0, 1),
    (0, 1, 2, 3),
)
N_SUBCASES = len(SUBCASE_POINTS)
PARALLEL_EPS = 1e-10

_I = np.eye(3)
_Z = np.zeros((3, 3))
# selection matrices: rows pick (difference) vectors out of the stacked local coordinates
_PE_U = np.hstack([_I, -_I, _Z])
_PE_V = np.hstack([_Z, -_I, _I])
_PT_U = np.hstack([_I, -_I, _Z, _Z])
_PT_V = np.hstack([_Z, -_I, _I, _Z])
_PT_W = np.hstack([_Z, -_I, _Z, _I])
_EE_U = np.hstack([-_I, _Z, _I, _Z])
_EE_V = np.hstack([-_I, _I, _Z, _Z])
_EE_W = np.hstack([_Z, _Z, -_I, _I])


def _skew(w):
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def _sym(M):
    return M + np.swapaxes(M, -1, -2)


def _outer(a, b):
    return a[..., :, None] * b[..., None, :]


def _quotient(N, gN, HN, q, gq, Hq):
    """Value, gradient and Hessian of ``N / q``."""
    qq = q[:, None]
    D = N / q
    gD = gN / qq - N[:, None] * gq / qq**2
    q3 = qq[..., None]
    HD = (
        HN / q3
        - _sym(_outer(gN, gq)) / q3**2
        - N[:, None, None] * Hq / q3**2
        + 2.0 * N[:, None, None] * _outer(gq, gq) / q3**3
    )
    return D, gD, HD


def _pp_d2(X):
    """Squared point-point distance, X (P, 6)."""
    r = X[:, :3] - X[:, 3:]
    D = np.sum(r * r, axis=1)
    g = 2.0 * np.hstack([r, -r])
    H = np.broadcast_to(2.0 * np.block([[_I, -_I], [-_I, _I]]), (len(X), 6, 6)).copy()
    return D, g, H


def _pe_d2(X):
    """Squared point-line distance, X (P, 9) = (p, a, b)."""
    u = X @ _PE_U.T
    v = X @ _PE_V.T
    r = np.cross(u, v)
    Jr = _skew(u) @ _PE_V - _skew(v) @ _PE_U
    N = np.sum(r * r, axis=1)
    gN = 2.0 * np.einsum("pi,pij->pj", r, Jr)
    HN = 2.0 * np.swapaxes(Jr, 1, 2) @ Jr + 2.0 * _sym(_PE_U.T @ (-_skew(r)) @ _PE_V)
    q = np.sum(v * v, axis=1)
    gq = 2.0 * v @ _PE_V
    Hq = np.broadcast_to(2.0 * _PE_V.T @ _PE_V, HN.shape)
    return _quotient(N, gN, HN, q, gq, Hq)


def _triple_d2(X, Su, Sv, Sw):
    """Squared distance ``(u . (v x w))^2 / |v x w|^2`` (point-plane and line-line)."""
    u, v, w = X @ Su.T, X @ Sv.T, X @ Sw.T
    n = np.cross(v, w)
    f = np.sum(u * n, axis=1)
    gf = n @ Su + np.cross(w, u) @ Sv + np.cross(u, v) @ Sw
    Hf = _sym(Su.T @ (-_skew(w)) @ Sv) + _sym(Sv.T @ (-_skew(u)) @ Sw) + _sym(Sw.T @ (-_skew(v)) @ Su)
    N = f * f
    gN = 2.0 * f[:, None] * gf
    HN = 2.0 * _outer(gf, gf) + 2.0 * f[:, None, None] * Hf
    Jn = _skew(v) @ Sw - _skew(w) @ Sv
    q = np.sum(n * n, axis=1)
    gq = 2.0 * np.einsum("pi,pij->pj", n, Jn)
    Hq = 2.0 * np.swapaxes(Jn, 1, 2) @ Jn + 2.0 * _sym(Sv.T @ (-_skew(n)) @ Sw)
    return _quotient(N, gN, HN, q, gq, Hq)


def _point_segment(p, a, b):
    """Clamped parameter and squared distance from points to segments."""
    e = b - a
    t = np.sum((p - a) * e, axis=1) / np.sum(e * e, axis=1)
    t = np.clip(t, 0.0, 1.0)
    r = p - (a + t[:, None] * e)
    return t, np.sum(r * r, axis=1)


def classify_numpy(x, kind):
    """Subcase code and squared distance for every pair."""
    P = len(x)
    code = np.zeros(P, dtype=np.int64)
    D = np.full(P, np.inf)
    vt = kind == VT
    if vt.any():
        p, a, b, c = (x[vt, i] for i in range(4))
        e1, e2, r = b - a, c - a, p - a
        m11, m12, m22 = np.sum(e1 * e1, 1), np.sum(e1 * e2, 1), np.sum(e2 * e2, 1)
        r1, r2 = np.sum(r * e1, 1), np.sum(r * e2, 1)
        det = m11 * m22 - m12 * m12
        b1 = (m22 * r1 - m12 * r2) / det
        b2 = (m11 * r2 - m12 * r1) / det
        inside = (b1 >= 0) & (b2 >= 0) & (b1 + b2 <= 1)
        n = np.cross(e1, e2)
        dplane = np.sum(r * n, 1) ** 2 / np.sum(n * n, 1)
        best = np.full(len(p), np.inf)
        bcode = np.zeros(len(p), dtype=np.int64)
        for k, (s, t) in enumerate(((a, b), (b, c), (c, a))):
            par, d2 = _point_segment(p, s, t)
            sub = np.where(par <= 0.0, k, np.where(par >= 1.0, (k + 1) % 3, 3 + k))
            better = d2 < best
            best = np.where(better, d2, best)
            bcode = np.where(better, sub, bcode)
        best = np.where(inside, dplane, best)
        bcode = np.where(inside, 6, bcode)
        code[vt], D[vt] = bcode, best
    ee = kind == EE
    if ee.any():
        a0, a1, b0, b1 = (x[ee, i] for i in range(4))
        d1, d2, r = a1 - a0, b1 - b0, a0 - b0
        aa, ee_, bb = np.sum(d1 * d1, 1), np.sum(d2 * d2, 1), np.sum(d1 * d2, 1)
        cc, ff = np.sum(d1 * r, 1), np.sum(d2 * r, 1)
        den = aa * ee_ - bb * bb
        ok = den > PARALLEL_EPS * aa * ee_
        safe = np.where(ok, den, 1.0)
        s = (bb * ff - cc * ee_) / safe
        t = (aa * ff - bb * cc) / safe
        interior = ok & (s > 0) & (s < 1) & (t > 0) & (t < 1)
        n = np.cross(d1, d2)
        nn = np.where(interior, np.sum(n * n, 1), 1.0)
        dline = np.where(interior, np.sum((b0 - a0) * n, 1) ** 2 / nn, np.inf)
        best = np.full(len(a0), np.inf)
        bcode = np.zeros(len(a0), dtype=np.int64)
        # point-segment candidates: (point, seg start, seg end, vv codes, ve code)
        cands = (
            (a0, b0, b1, 7, 8, 11),
            (a1, b0, b1, 9, 10, 12),
            (b0, a0, a1, 7, 9, 13),
            (b1, a0, a1, 8, 10, 14),
        )
        for p, s0, s1, c0, c1, ce in cands:
            par, d2_ = _point_segment(p, s0, s1)
            sub = np.where(par <= 0.0, c0, np.where(par >= 1.0, c1, ce))
            better = d2_ < best
            best = np.where(better, d2_, best)
            bcode = np.where(better, sub, bcode)
        best = np.where(interior, dline, best)
        bcode = np.where(interior, 15, bcode)
        code[ee], D[ee] = bcode, best
    return code, D


def _subcase_d2(code, X):
    """Local squared distance derivatives for one subcase, X (P, 3k)."""
    if code <= 2 or 7 <= code <= 10:
        return _pp_d2(X)
    if code <= 5 or 11 <= code <= 14:
        return _pe_d2(X)
    if code == 6:
        return _triple_d2(X, _PT_U, _PT_V, _PT_W)
    return _triple_d2(X, _EE_U, _EE_V, _EE_W)


DEGENERATE_REL = 1e-12


def check_primitives(x, kind):
    """Reject zero-length edges and zero-area triangles (relative to the pair's extent)."""
    x = np.asarray(x, dtype=float).reshape(-1, 4, 3)
    if len(x) == 0:
        return
    L = np.max(np.ptp(x, axis=1), axis=1)
    vt = np.asarray(kind) == VT
    e_ee = np.stack([np.linalg.norm(x[:, 1] - x[:, 0], axis=1), np.linalg.norm(x[:, 3] - x[:, 2], axis=1)], axis=1)
    area2 = np.linalg.norm(np.cross(x[:, 2] - x[:, 1], x[:, 3] - x[:, 1]), axis=1)
    edge_tri = np.stack([np.linalg.norm(x[:, a] - x[:, b], axis=1) for a, b in ((1, 2), (2, 3), (3, 1))], axis=1)
    bad_vt = vt & ((area2 <= DEGENERATE_REL * L**2) | np.any(edge_tri <= DEGENERATE_REL * L[:, None], axis=1))
    bad_ee = ~vt & np.any(e_ee <= DEGENERATE_REL * L[:, None], axis=1)
    bad = np.where(bad_vt | bad_ee)[0]
    if len(bad):
        raise ValueError(f"degenerate primitive in pair {bad[0]} (zero-length edge or zero-area triangle)")


def pair_distance_numpy(x, kind):
    """Distances ``d`` (P,), gradients (P, 12), Hessians (P, 12, 12) and subcase codes."""
    x = np.asarray(x, dtype=float).reshape(-1, 4, 3)
    kind = np.asarray(kind, dtype=np.int64)
    check_primitives(x, kind)
    P = len(x)
    code, _ = classify_numpy(x, kind)
    D = np.zeros(P)
    g = np.zeros((P, 12))
    H = np.zeros((P, 12, 12))
    for c in np.unique(code):
        sel = np.where(code == c)[0]
        pts = SUBCASE_POINTS[c]
        X = x[sel][:, pts, :].reshape(len(sel), -1)
        Dc, gc, Hc = _subcase_d2(c, X)
        slots = np.concatenate([[3 * p, 3 * p + 1, 3 * p + 2] for p in pts])
        D[sel] = Dc
        g[np.ix_(sel, slots)] = gc
        H[np.ix_(sel, slots, slots)] = Hc
    if np.any(D <= 0.0):
        raise ValueError("intersecting or touching primitives (zero distance)")
    d = np.sqrt(D)
    gd = g / (2.0 * d[:, None])
    Hd = H / (2.0 * d[:, None, None]) - _outer(g, g) / (4.0 * d[:, None, None] ** 3)
    return d, gd, Hd, code


def barrier_scalar(d, dhat, kappa=1.0):
    """Clamped log barrier ``-kappa (d - dhat)^2 ln(d / dhat)`` and its first two derivatives."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("barrier requires positive distance")
    act = d < dhat
    dd = np.where(act, d, dhat)
    lg = np.log(dd / dhat)
    diff = dd - dhat
    b = -kappa * diff**2 * lg
    b1 = -kappa * (2.0 * diff * lg + diff**2 / dd)
    b2 = -kappa * (2.0 * lg + 4.0 * diff / dd - diff**2 / dd**2)
    zero = np.zeros_like(d)
    return np.where(act, b, zero), np.where(act, b1, zero), np.where(act, b2, zero)


def project_psd(H):
    """Clamp negative eigenvalues of symmetric blocks to zero."""
    w, V = np.linalg.eigh(0.5 * (H + np.swapaxes(H, -1, -2)))
    return (V * np.maximum(w, 0.0)[..., None, :]) @ np.swapaxes(V, -1, -2)


def pair_barrier_numpy(x, kind, dhat, kappa=1.0, project=True):
    """Barrier value (P,), gradient (P, 12), Hessian (P, 12, 12) and distances."""
    d, gd, Hd, code = pair_distance_numpy(x, kind)
    b, b1, b2 = barrier_scalar(d, dhat, kappa)
    g = b1[:, None] * gd
    H = b2[:, None, None] * _outer(gd, gd) + b1[:, None, None] * Hd
    if project and len(H):
        H = project_psd(H)
    return b, g, H, d, code


# ---------------------------------------------------------------------------
# numba path: the same formulas, one pair at a time


@njit
def _nb_skew(w):
    S = np.zeros((3, 3))
    S[0, 1] = -w[2]
    S[0, 2] = w[1]
    S[1, 0] = w[2]
    S[1, 2] = -w[0]
    S[2, 0] = -w[1]
    S[2, 1] = w[0]
    return S


@njit
def _nb_cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


@njit
def _nb_quotient(N, gN, HN, q, gq, Hq):
    D = N / q
    gD = gN / q - N * gq / (q * q)
    HD = (
        HN / q
        - (np.outer(gN, gq) + np.outer(gq, gN)) / (q * q)
        - N * Hq / (q * q)
        + 2.0 * N * np.outer(gq, gq) / (q * q * q)
    )
    return D, gD, HD


@njit
def _nb_pp(X):
    r = X[:3] - X[3:]
    g = np.empty(6)
    g[:3] = 2.0 * r
    g[3:] = -2.0 * r
    H = np.zeros((6, 6))
    for i in range(3):
        H[i, i] = 2.0
        H[i + 3, i + 3] = 2.0
        H[i, i + 3] = -2.0
        H[i + 3, i] = -2.0
    return np.dot(r, r), g, H


@njit
def _nb_pe(X, Su, Sv):
    u = np.dot(Su, X)
    v = np.dot(Sv, X)
    r = _nb_cross(u, v)
    Jr = np.dot(_nb_skew(u), Sv) - np.dot(_nb_skew(v), Su)
    N = np.dot(r, r)
    gN = 2.0 * np.dot(Jr.T, r)
    M = np.dot(Su.T, np.dot(-_nb_skew(r), Sv))
    HN = 2.0 * np.dot(Jr.T, Jr) + 2.0 * (M + M.T)
    q = np.dot(v, v)
    gq = 2.0 * np.dot(Sv.T, v)
    Hq = 2.0 * np.dot(Sv.T, Sv)
    return _nb_quotient(N, gN, HN, q, gq, Hq)


@njit
def _nb_triple(X, Su, Sv, Sw):
    u = np.dot(Su, X)
    v = np.dot(Sv, X)
    w = np.dot(Sw, X)
    n = _nb_cross(v, w)
    f = np.dot(u, n)
    gf = np.dot(Su.T, n) + np.dot(Sv.T, _nb_cross(w, u)) + np.dot(Sw.T, _nb_cross(u, v))
    M1 = np.dot(Su.T, np.dot(-_nb_skew(w), Sv))
    M2 = np.dot(Sv.T, np.dot(-_nb_skew(u), Sw))
    M3 = np.dot(Sw.T, np.dot(-_nb_skew(v), Su))
    Hf = M1 + M1.T + M2 + M2.T + M3 + M3.T
    N = f * f
    gN = 2.0 * f * gf
    HN = 2.0 * np.outer(gf, gf) + 2.0 * f * Hf
    Jn = np.dot(_nb_skew(v), Sw) - np.dot(_nb_skew(w), Sv)
    q = np.dot(n, n)
    gq = 2.0 * np.dot(Jn.T, n)
    M4 = np.dot(Sv.T, np.dot(-_nb_skew(n), Sw))
    Hq = 2.0 * np.dot(Jn.T, Jn) + 2.0 * (M4 + M4.T)
    return _nb_quotient(N, gN, HN, q, gq, Hq)


@njit
def _nb_point_segment(p, a, b):
    e = b - a
    t = np.dot(p - a, e) / np.dot(e, e)
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    r = p - (a + t * e)
    return t, np.dot(r, r)


@njit
def _nb_classify(x, kind):
    best = np.inf
    code = 0
    if kind == 0:
        p, a, b, c = x[0], x[1], x[2], x[3]
        e1 = b - a
        e2 = c - a
        r = p - a
        m11 = np.dot(e1, e1)
        m12 = np.dot(e1, e2)
        m22 = np.dot(e2, e2)
        r1 = np.dot(r, e1)
        r2 = np.dot(r, e2)
        det = m11 * m22 - m12 * m12
        b1 = (m22 * r1 - m12 * r2) / det
        b2 = (m11 * r2 - m12 * r1) / det
        if b1 >= 0.0 and b2 >= 0.0 and b1 + b2 <= 1.0:
            n = _nb_cross(e1, e2)
            return 6, np.dot(r, n) ** 2 / np.dot(n, n)
        for k in range(3):
            s = x[1 + k]
            t = x[1 + (k + 1) % 3]
            par, d2 = _nb_point_segment(p, s, t)
            if par <= 0.0:
                sub = k
            elif par >= 1.0:
                sub = (k + 1) % 3
            else:
                sub = 3 + k
            if d2 < best:
                best = d2
                code = sub
        return code, best
    a0, a1, b0, b1 = x[0], x[1], x[2], x[3]
    d1 = a1 - a0
    d2 = b1 - b0
    r = a0 - b0
    aa = np.dot(d1, d1)
    ee = np.dot(d2, d2)
    bb = np.dot(d1, d2)
    cc = np.dot(d1, r)
    ff = np.dot(d2, r)
    den = aa * ee - bb * bb
    if den > PARALLEL_EPS * aa * ee:
        s = (bb * ff - cc * ee) / den
        t = (aa * ff - bb * cc) / den
        if 0.0 < s < 1.0 and 0.0 < t < 1.0:
            n = _nb_cross(d1, d2)
            return 15, np.dot(b0 - a0, n) ** 2 / np.dot(n, n)
    pts = (0, 1, 2, 3)
    seg0 = (2, 2, 0, 0)
    seg1 = (3, 3, 1, 1)
    c0s = (7, 9, 7, 8)
    c1s = (8, 10, 9, 10)
    ces = (11, 12, 13, 14)
    for k in range(4):
        par, dd = _nb_point_segment(x[pts[k]], x[seg0[k]], x[seg1[k]])
        if par <= 0.0:
            sub = c0s[k]
        elif par >= 1.0:
            sub = c1s[k]
        else:
            sub = ces[k]
        if dd < best:
            best = dd
            code = sub
    return code, best


# subcase -> participating points, padded with -1
_SUBCASE_TABLE = np.full((N_SUBCASES, 4), -1, dtype=np.int64)
for _c, _pts in enumerate(SUBCASE_POINTS):
    _SUBCASE_TABLE[_c, : len(_pts)] = _pts


@njit
def _nb_pair_d2(x, code, table, PEU, PEV, PTU, PTV, PTW, EEU, EEV, EEW):
    k = 0
    while k < 4 and table[code, k] >= 0:
        k += 1
    X = np.empty(3 * k)
    for i in range(k):
        X[3 * i: 3 * i + 3] = x[table[code, i]]
    if code <= 2 or (7 <= code <= 10):
        D, gl, Hl = _nb_pp(X)
    elif code <= 5 or (11 <= code <= 14):
        D, gl, Hl = _nb_pe(X, PEU, PEV)
    elif code == 6:
        D, gl, Hl = _nb_triple(X, PTU, PTV, PTW)
    else:
        D, gl, Hl = _nb_triple(X, EEU, EEV, EEW)
    g = np.zeros(12)
    H = np.zeros((12, 12))
    for i in range(k):
        pi = table[code, i]
        for a in range(3):
            g[3 * pi + a] = gl[3 * i + a]
            for j in range(k):
                pj = table[code, j]
                for b in range(3):
                    H[3 * pi + a, 3 * pj + b] = Hl[3 * i + a, 3 * j + b]
    return D, g, H


@njit
def _nb_distance_loop(x, kind, table, PEU, PEV, PTU, PTV, PTW, EEU, EEV, EEW, d, gd, Hd, codes):
    for p in range(x.shape[0]):
        code, _ = _nb_classify(x[p], kind[p])
        D, g, H = _nb_pair_d2(x[p], code, table, PEU, PEV, PTU, PTV, PTW, EEU, EEV, EEW)
        if D <= 0.0:
            return p
        dist = np.sqrt(D)
        d[p] = dist
        codes[p] = code
        gd[p] = g / (2.0 * dist)
        Hd[p] = H / (2.0 * dist) - np.outer(g, g) / (4.0 * dist**3)
    return -1


def _selection_args():
    return (_SUBCASE_TABLE, _PE_U, _PE_V, _PT_U, _PT_V, _PT_W, _EE_U, _EE_V, _EE_W)


def pair_distance_numba(x, kind):
    x = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 4, 3)
    kind = np.ascontiguousarray(kind, dtype=np.int64)
    check_primitives(x, kind)
    P = len(x)
    d = np.zeros(P)
    gd = np.zeros((P, 12))
    Hd = np.zeros((P, 12, 12))
    codes = np.zeros(P, dtype=np.int64)
    bad = _nb_distance_loop(x, kind, *_selection_args(), d, gd, Hd, codes)
    if bad >= 0:
        raise ValueError("intersecting or touching primitives (zero distance)")
    return d, gd, Hd, codes


@njit
def _nb_barrier_loop(d, gd, Hd, dhat, kappa, project, b, g, H):
    for p in range(d.shape[0]):
        x = d[p]
        if x >= dhat:
            continue
        lg = np.log(x / dhat)
        diff = x - dhat
        b[p] = -kappa * diff * diff * lg
        b1 = -kappa * (2.0 * diff * lg + diff * diff / x)
        b2 = -kappa * (2.0 * lg + 4.0 * diff / x - diff * diff / (x * x))
        g[p] = b1 * gd[p]
        Hp = b2 * np.outer(gd[p], gd[p]) + b1 * Hd[p]
        if project:
            Hs = 0.5 * (Hp + Hp.T)
            w, V = np.linalg.eigh(Hs)
            for i in range(12):
                if w[i] < 0.0:
                    w[i] = 0.0
            Hp = np.dot(V * w, V.T)
        H[p] = Hp


def pair_barrier_numba(x, kind, dhat, kappa=1.0, project=True):
    d, gd, Hd, codes = pair_distance_numba(x, kind)
    P = len(d)
    b = np.zeros(P)
    g = np.zeros((P, 12))
    H = np.zeros((P, 12, 12))
    _nb_barrier_loop(d, gd, Hd, float(dhat), float(kappa), bool(project), b, g, H)
    return b, g, H, d, codes
