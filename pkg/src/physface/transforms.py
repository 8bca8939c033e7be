"""Small-matrix helpers: polar rotations, skew maps, rigid transforms, 6D rotations."""
import numpy as np


def skew(w):
    """Cross-product matrix(es) ``[w]x`` for ``w`` of shape (..., 3)."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def axial(X):
    """Inverse of :func:`skew` applied to the skew part of ``X``."""
    X = np.asarray(X, dtype=float)
    return 0.5 * np.stack(
        [X[..., 2, 1] - X[..., 1, 2], X[..., 0, 2] - X[..., 2, 0], X[..., 1, 0] - X[..., 0, 1]],
        axis=-1,
    )


def signed_svd(M):
    """SVD with the determinant sign folded into the smallest singular value.

    Returns ``U, s, Vt`` with ``det(U) = det(Vt) = +1`` so that ``U @ Vt`` is a
    proper rotation; ``s[..., 2]`` may be negative for inverted input.
    """
    U, s, Vt = np.linalg.svd(M)
    dU = np.linalg.det(U)
    dV = np.linalg.det(Vt)
    flipU = dU < 0
    flipV = dV < 0
    U = U.copy()
    Vt = Vt.copy()
    s = s.copy()
    U[flipU, :, 2] *= -1.0
    Vt[flipV, 2, :] *= -1.0
    s[..., 2] *= np.where(flipU ^ flipV, -1.0, 1.0)
    return U, s, Vt


def polar_rotation(M):
    """Closest proper rotation to ``M`` (batched over leading axes)."""
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ValueError("non-finite matrix in polar decomposition")
    U, _, Vt = signed_svd(M)
    return U @ Vt


def rotation_about_axis(axis, angle):
    """Rodrigues rotation matrix for a unit ``axis`` and ``angle`` in radians."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = skew(axis)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def random_rotations(rng, n):
    """Uniformly distributed rotations via normalized quaternions."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    R = np.empty((n, 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - z * w)
    R[:, 0, 2] = 2 * (x * z + y * w)
    R[:, 1, 0] = 2 * (x * y + z * w)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - x * w)
    R[:, 2, 0] = 2 * (x * z - y * w)
    R[:, 2, 1] = 2 * (y * z + x * w)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def is_rigid(R, tol=1e-8):
    R = np.asarray(R, dtype=float)
    return (
        R.shape == (3, 3)
        and np.abs(R.T @ R - np.eye(3)).max() <= tol
        and np.linalg.det(R) > 0
    )


class RigidTransform:
    """``x -> R x + t``; ``R`` must be a proper rotation."""

    def __init__(self, rotation=None, translation=None):
        self.rotation = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
        self.translation = np.zeros(3) if translation is None else np.asarray(translation, dtype=float)

    @classmethod
    def identity(cls):
        return cls()

    def apply(self, points):
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def compose(self, other):
        """``self ∘ other``."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def conjugate(self, frame):
        """Express ``self`` (given in ``frame`` coordinates) in world coordinates."""
        return frame.compose(self).compose(frame.inverse())

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


_SIX_D_BASE = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def rotation_from_6d(r):
    """Gram-Schmidt map from a 6-vector (two columns) to SO(3).

    Returns ``R`` and a cache for :func:`rotation_from_6d_backward`.
    """
    r = np.asarray(r, dtype=float)
    a1, a2 = r[:3], r[3:]
    n1 = np.linalg.norm(a1)
    b1 = a1 / n1
    p = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(p)
    b2 = p / n2
    b3 = np.cross(b1, b2)
    R = np.stack([b1, b2, b3], axis=1)
    return R, (a1, a2, n1, b1, p, n2, b2)


def rotation_from_6d_backward(cache, dR):
    """Gradient of a scalar w.r.t. the 6-vector given ``dR = dL/dR``."""
    a1, a2, n1, b1, p, n2, b2 = cache
    g1, g2, g3 = dR[:, 0], dR[:, 1], dR[:, 2]
    # b3 = b1 x b2
    gb1 = g1 + np.cross(b2, g3)
    gb2 = g2 + np.cross(g3, b1)
    # b2 = p / |p|
    gp = (gb2 - b2 * (b2 @ gb2)) / n2
    # p = a2 - (b1.a2) b1
    ga2 = gp - b1 * (b1 @ gp)
    gb1 = gb1 - (b1 @ a2) * gp - a2 * (b1 @ gp)
    ga1 = (gb1 - b1 * (b1 @ gb1)) / n1
    return np.concatenate([ga1, ga2])
