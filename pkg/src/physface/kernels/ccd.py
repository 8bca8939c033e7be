"""Linear-trajectory time of impact for vertex-triangle and edge-edge pairs.

Both pair kinds can only touch at an instant where their four points are
coplanar, so candidate times are the roots in [0, 1] of a cubic (the triple
product of three difference vectors). Each root is bracketed on a monotone
piece of the cubic and refined by bisection, then accepted only if the
primitives are actually (numerically) touching there. When the cubic is
identically ~0 (motion inside a common plane) the roots carry no information
and conservative advancement on the distance is used instead.

``toi`` returns a time in [0, 1] or ``inf`` when the pair never touches.
"""
import numpy as np

from .._jit import njit
from .contact import VT, _nb_classify, classify_numpy

BISECT_ITERS = 60
TOUCH_REL = 1e-7
DEGENERATE_REL = 1e-12
ADVANCE_MAX_STEPS = 2000


def _triple_vectors(x, kind):
    """Difference vectors ``(u, v, w)`` whose triple product vanishes at contact."""
    vt = (kind == VT)[:, None]
    u = np.where(vt, x[:, 0] - x[:, 1], x[:, 2] - x[:, 0])
    v = np.where(vt, x[:, 2] - x[:, 1], x[:, 1] - x[:, 0])
    w = np.where(vt, x[:, 3] - x[:, 1], x[:, 3] - x[:, 2])
    return u, v, w


def _dot_cross(a, b, c):
    return np.sum(a * np.cross(b, c), axis=-1)


def cubic_coefficients(x0, x1, kind):
    """Coefficients ``c0..c3`` of the coplanarity polynomial, shape (P, 4)."""
    u0, v0, w0 = _triple_vectors(x0, kind)
    ue, ve, we = _triple_vectors(x1, kind)
    u1, v1, w1 = ue - u0, ve - v0, we - w0
    c0 = _dot_cross(u0, v0, w0)
    c1 = _dot_cross(u1, v0, w0) + _dot_cross(u0, v1, w0) + _dot_cross(u0, v0, w1)
    c2 = _dot_cross(u1, v1, w0) + _dot_cross(u1, v0, w1) + _dot_cross(u0, v1, w1)
    c3 = _dot_cross(u1, v1, w1)
    return np.stack([c0, c1, c2, c3], axis=1)


def _length_scale(x0, x1):
    both = np.concatenate([x0, x1], axis=1)
    c = both.mean(axis=1, keepdims=True)
    return np.max(np.linalg.norm(both - c, axis=2), axis=1)


def _critical_points(c):
    """Sorted breakpoints 0 <= t <= 1 splitting each cubic into monotone pieces, (P, 4)."""
    a, b, cc = 3.0 * c[:, 3], 2.0 * c[:, 2], c[:, 1]
    P = len(c)
    r = np.full((P, 2), np.nan)
    quad = np.abs(a) > 1e-300
    disc = b * b - 4.0 * a * cc
    ok = quad & (disc >= 0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    safe_a = np.where(quad, a, 1.0)
    r[ok, 0] = ((-b - sq) / (2.0 * safe_a))[ok]
    r[ok, 1] = ((-b + sq) / (2.0 * safe_a))[ok]
    lin = ~quad & (np.abs(b) > 1e-300)
    r[lin, 0] = (-cc / np.where(lin, b, 1.0))[lin]
    r = np.where((r > 0) & (r < 1), r, np.nan)
    pts = np.column_stack([np.zeros(P), r, np.ones(P)])
    # nan sorts last; replace with 1 so empty pieces collapse
    pts = np.sort(np.where(np.isnan(pts), 1.0, pts), axis=1)
    return pts


def _horner(c, t):
    return ((c[..., 3] * t + c[..., 2]) * t + c[..., 1]) * t + c[..., 0]


def _advance_numpy(x0, x1, kind, L):
    """Conservative advancement on the distance for one pair."""
    v = x1 - x0
    speed = 2.0 * np.max(np.linalg.norm(v - v.mean(axis=0), axis=1))
    if speed == 0.0:
        return np.inf
    t = 0.0
    eta = TOUCH_REL * L
    for _ in range(ADVANCE_MAX_STEPS):
        _, D = classify_numpy((x0 + t * v)[None], np.array([kind]))
        d = np.sqrt(max(D[0], 0.0))
        if d <= eta:
            return t
        t += 0.9 * d / speed
        if t > 1.0:
            return np.inf
    return t


def pair_toi_numpy(x0, x1, kind):
    x0 = np.asarray(x0, dtype=float).reshape(-1, 4, 3)
    x1 = np.asarray(x1, dtype=float).reshape(-1, 4, 3)
    kind = np.asarray(kind, dtype=np.int64)
    P = len(x0)
    toi = np.full(P, np.inf)
    if P == 0:
        return toi
    L = _length_scale(x0, x1)
    _, D0 = classify_numpy(x0, kind)
    if np.any(np.sqrt(np.maximum(D0, 0.0)) <= TOUCH_REL * L):
        raise ValueError("start configuration already intersecting")
    moving = np.any(np.abs(x1 - x0) > 0, axis=(1, 2))
    c = cubic_coefficients(x0, x1, kind)
    degenerate = moving & (np.max(np.abs(c), axis=1) <= DEGENERATE_REL * L**3)
    regular = moving & ~degenerate
    if regular.any():
        idx = np.where(regular)[0]
        cr = c[idx]
        pts = _critical_points(cr)
        lo, hi = pts[:, :-1], pts[:, 1:]
        flo, fhi = _horner(cr[:, None, :], lo), _horner(cr[:, None, :], hi)
        bracket = (flo * fhi <= 0) & (hi > lo)
        a, b = lo.copy(), hi.copy()
        fa = flo.copy()
        for _ in range(BISECT_ITERS):
            m = 0.5 * (a + b)
            fm = _horner(cr[:, None, :], m)
            left = fa * fm <= 0
            b = np.where(left, m, b)
            a = np.where(left, a, m)
            fa = np.where(left, fa, fm)
        roots = np.where(bracket, np.where(flo == 0, lo, a), np.inf)
        # critical points touching zero (double roots) are candidates too
        fpts = _horner(cr[:, None, :], pts)
        tiny = np.abs(fpts) <= DEGENERATE_REL * L[idx, None] ** 3
        cand = np.concatenate([roots, np.where(tiny, pts, np.inf)], axis=1)
        cand = np.sort(cand, axis=1)
        found = np.full(len(idx), np.inf)
        for k in range(cand.shape[1]):
            t = cand[:, k]
            open_ = np.isfinite(t) & ~np.isfinite(found)
            if not open_.any():
                continue
            sub = np.where(open_)[0]
            xt = x0[idx[sub]] + t[sub, None, None] * (x1[idx[sub]] - x0[idx[sub]])
            _, Dt = classify_numpy(xt, kind[idx[sub]])
            hit = np.sqrt(np.maximum(Dt, 0.0)) <= TOUCH_REL * L[idx[sub]]
            found[sub[hit]] = t[sub[hit]]
        toi[idx] = found
    for p in np.where(degenerate)[0]:
        toi[p] = _advance_numpy(x0[p], x1[p], kind[p], L[p])
    return toi


# ---------------------------------------------------------------------------
# numba path


@njit
def _nb_triple_vectors(x, kind):
    if kind == 0:
        return x[0] - x[1], x[2] - x[1], x[3] - x[1]
    return x[2] - x[0], x[1] - x[0], x[3] - x[2]


@njit
def _nb_dc(a, b, c):
    return (
        a[0] * (b[1] * c[2] - b[2] * c[1])
        + a[1] * (b[2] * c[0] - b[0] * c[2])
        + a[2] * (b[0] * c[1] - b[1] * c[0])
    )


@njit
def _nb_hval(c, t):
    return ((c[3] * t + c[2]) * t + c[1]) * t + c[0]


@njit
def _nb_touching(x0, v, t, kind, eta):
    _, D = _nb_classify(x0 + t * v, kind)
    if D < 0.0:
        D = 0.0
    return np.sqrt(D) <= eta


@njit
def _nb_pair_toi(x0, x1, kind, bisect_iters, touch_rel, degen_rel, max_steps):
    v = x1 - x0
    cen = np.zeros(3)
    for i in range(4):
        cen += x0[i] + x1[i]
    cen /= 8.0
    L = 0.0
    for i in range(4):
        L = max(L, np.sqrt(np.sum((x0[i] - cen) ** 2)), np.sqrt(np.sum((x1[i] - cen) ** 2)))
    eta = touch_rel * L
    if _nb_touching(x0, v, 0.0, kind, eta):
        return -1.0
    if np.max(np.abs(v)) == 0.0:
        return np.inf
    u0, v0, w0 = _nb_triple_vectors(x0, kind)
    ue, ve, we = _nb_triple_vectors(x1, kind)
    u1 = ue - u0
    v1 = ve - v0
    w1 = we - w0
    c = np.empty(4)
    c[0] = _nb_dc(u0, v0, w0)
    c[1] = _nb_dc(u1, v0, w0) + _nb_dc(u0, v1, w0) + _nb_dc(u0, v0, w1)
    c[2] = _nb_dc(u1, v1, w0) + _nb_dc(u1, v0, w1) + _nb_dc(u0, v1, w1)
    c[3] = _nb_dc(u1, v1, w1)
    if np.max(np.abs(c)) <= degen_rel * L**3:
        vm = np.zeros(3)
        for i in range(4):
            vm += v[i]
        vm /= 4.0
        speed = 0.0
        for i in range(4):
            speed = max(speed, np.sqrt(np.sum((v[i] - vm) ** 2)))
        speed *= 2.0
        if speed == 0.0:
            return np.inf
        t = 0.0
        for _ in range(max_steps):
            _, D = _nb_classify(x0 + t * v, kind)
            d = np.sqrt(max(D, 0.0))
            if d <= eta:
                return t
            t += 0.9 * d / speed
            if t > 1.0:
                return np.inf
        return t
    pts = np.ones(4)
    pts[0] = 0.0
    a = 3.0 * c[3]
    b = 2.0 * c[2]
    cc = c[1]
    n = 1
    if abs(a) > 1e-300:
        disc = b * b - 4.0 * a * cc
        if disc >= 0.0:
            sq = np.sqrt(disc)
            for r in ((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)):
                if 0.0 < r < 1.0:
                    pts[n] = r
                    n += 1
    elif abs(b) > 1e-300:
        r = -cc / b
        if 0.0 < r < 1.0:
            pts[n] = r
            n += 1
    pts = np.sort(pts)
    cand = np.full(7, np.inf)
    tiny = degen_rel * L**3
    for k in range(3):
        lo = pts[k]
        hi = pts[k + 1]
        flo = _nb_hval(c, lo)
        fhi = _nb_hval(c, hi)
        if hi > lo and flo * fhi <= 0.0:
            if flo == 0.0:
                cand[k] = lo
            else:
                aa = lo
                bb = hi
                fa = flo
                for _ in range(bisect_iters):
                    m = 0.5 * (aa + bb)
                    fm = _nb_hval(c, m)
                    if fa * fm <= 0.0:
                        bb = m
                    else:
                        aa = m
                        fa = fm
                cand[k] = aa
    for k in range(4):
        if abs(_nb_hval(c, pts[k])) <= tiny:
            cand[3 + k] = pts[k]
    cand = np.sort(cand)
    for k in range(7):
        t = cand[k]
        if not np.isfinite(t):
            break
        if _nb_touching(x0, v, t, kind, eta):
            return t
    return np.inf


@njit
def _nb_toi_loop(x0, x1, kind, out, bisect_iters, touch_rel, degen_rel, max_steps):
    for p in range(x0.shape[0]):
        out[p] = _nb_pair_toi(x0[p], x1[p], kind[p], bisect_iters, touch_rel, degen_rel, max_steps)


def pair_toi_numba(x0, x1, kind):
    x0 = np.ascontiguousarray(x0, dtype=np.float64).reshape(-1, 4, 3)
    x1 = np.ascontiguousarray(x1, dtype=np.float64).reshape(-1, 4, 3)
    kind = np.ascontiguousarray(kind, dtype=np.int64)
    out = np.empty(len(x0))
    if len(x0):
        _nb_toi_loop(x0, x1, kind, out, BISECT_ITERS, TOUCH_REL, DEGENERATE_REL, ADVANCE_MAX_STEPS)
    if np.any(out < 0):
        raise ValueError("start configuration already intersecting")
    return out
