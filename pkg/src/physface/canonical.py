"""Per-identity maps from material to canonical space and rotational actuation warping.

A mapping ``phi`` sends material points ``x`` of one identity to canonical
points ``X``. Actuation tensors learned in canonical space are pulled back with
the rotation of ``grad phi``: ``A~ = R^T A(phi(x)) R``.
"""
import struct
from dataclasses import dataclass

import numpy as np

from . import nn
from .transforms import polar_rotation

MAP_WIDTH = 64
MAP_OMEGA0 = 5.0
MAP_SINE_LAYERS = 4
ELASTIC_WEIGHT = 10.0
# reference length units per scene diameter: the elastic weight is calibrated
# for positions measured in millimetres on a ~200 mm face
REFERENCE_SCENE_SIZE = 200.0
WARP_MAGIC = b"PHYSWARP"
WARP_VERSION = 1


class MappingError(ValueError):
    pass


def rotation_extract(J):
    """Polar rotation of a mapping Jacobian (batched)."""
    J = np.asarray(J, dtype=float)
    if np.any(np.linalg.det(J) <= 0):
        raise MappingError("inverted mapping Jacobian")
    return polar_rotation(J)


def warp_actuation(A, R):
    """``R^T A R`` for canonical tensors ``A`` and mapping rotations ``R`` (batched)."""
    A = np.asarray(A, dtype=float)
    R = np.asarray(R, dtype=float)
    out = np.swapaxes(R, -1, -2) @ A @ R
    return 0.5 * (out + np.swapaxes(out, -1, -2))


# ---------------------------------------------------------------------------
# mappings


class AffineMapping:
    """Exact ``X = Q x + t``; used for rigid maps and as a reference."""

    def __init__(self, Q=None, t=None, tag=""):
        self.Q = np.eye(3) if Q is None else np.asarray(Q, dtype=float)
        self.t = np.zeros(3) if t is None else np.asarray(t, dtype=float)
        self.tag = tag

    def __call__(self, x):
        return np.asarray(x, dtype=float) @ self.Q.T + self.t

    def jacobian(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self(x), np.broadcast_to(self.Q, (len(x), 3, 3)).copy()


class NetworkMapping:
    """Residual sine network ``X = x + s N((x - c) / s)``; identity when the last layer is zero."""

    def __init__(self, stack, center, scale, tag=""):
        self.stack = stack
        self.center = np.asarray(center, dtype=float)
        self.scale = float(scale)
        self.tag = tag

    @classmethod
    def create(cls, rng, center, scale, width=MAP_WIDTH, omega0=MAP_OMEGA0, tag=""):
        sizes = [3] + [width] * MAP_SINE_LAYERS + [3]
        kinds = ["sine"] * MAP_SINE_LAYERS + ["linear"]
        stack = nn.mlp(rng, sizes, kinds, omega0=omega0, zero_last=True)
        return cls(stack, center, scale, tag)

    def _normalize(self, x):
        return (np.atleast_2d(np.asarray(x, dtype=float)) - self.center) / self.scale

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return x + self.scale * self.stack.forward(self._normalize(x), keep=False)

    def jacobian(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y, Jn = self.stack.forward_jac(self._normalize(x))
        return x + self.scale * y, np.eye(3) + Jn

    def save(self, path):
        nn.save_stacks(path, [self.stack, _meta_stack(self.center, self.scale)])

    @classmethod
    def load(cls, path, tag=""):
        stacks = nn.load_stacks(path)
        if len(stacks) != 2:
            raise MappingError(f"{path}: not a mapping checkpoint")
        meta = stacks[1].layers[0]
        return cls(stacks[0], meta.b[:3].copy(), float(meta.b[3]), tag)


def _meta_stack(center, scale):
    # normalization constants ride along as the bias of a 1x4 placeholder layer
    return nn.Sequential([nn.DenseLayer(np.zeros((4, 1)), np.r_[center, scale], "linear")])


# ---------------------------------------------------------------------------
# training


def lr_at(step, total, lr, decay_start=0.5):
    """Constant, then linear decay to zero over the last ``1 - decay_start`` of training."""
    k0 = int(decay_start * total)
    if step < k0:
        return lr
    return lr * max(total - step, 0) / max(total - k0, 1)


def _sample_in_elements(rng, mesh):
    return mesh.vertices[mesh.elements[:, 0]] + rng.uniform(0.0, mesh.h, (mesh.n_elements, 3))


def mapping_loss_terms(mapping, x_corr, X_corr, x_reg, lam_e, length_scale):
    """Correspondence and elastic terms with their gradients accumulated into the stack."""
    st = mapping.stack
    xn = mapping._normalize(x_corr)
    y = st.forward(xn)
    r = (x_corr + mapping.scale * y - X_corr) * length_scale
    dist = np.linalg.norm(r, axis=1)
    n = len(r)
    l_corr = float(dist.mean())
    g = np.where(dist[:, None] > 0, r / np.where(dist > 0, dist, 1.0)[:, None], 0.0) / n
    st.backward(g * length_scale * mapping.scale)

    _, Jn = st.forward_jac(mapping._normalize(x_reg))
    J = np.eye(3) + Jn
    D = J - polar_rotation(J)
    nrm = np.linalg.norm(D, axis=(1, 2))
    l_el = float(nrm.mean())
    gJ = np.where(nrm[:, None, None] > 0, D / np.where(nrm > 0, nrm, 1.0)[:, None, None], 0.0) * (lam_e / len(J))
    st.backward_jac(np.zeros((len(J), 3)), gJ)
    return l_corr, l_el


@dataclass
class MappingTrace:
    steps: list
    corr: list
    elastic: list

    def lines(self):
        return ["step,corr,elastic"] + [f"{s},{float(c)!r},{float(e)!r}" for s, c, e in zip(self.steps, self.corr, self.elastic)]


def train_mapping(material_points, canonical_points, mesh, lam_e=ELASTIC_WEIGHT, steps=3000, lr=1e-4,
                  seed=0, width=MAP_WIDTH, omega0=MAP_OMEGA0, length_scale=None, log_every=50, tag=""):
    """Fit ``phi`` so that ``phi(material_points) ~ canonical_points``.

    The elastic term ``mean |grad phi - R|_F`` is evaluated at the simulation
    vertices plus one uniformly drawn point per element, redrawn every step.
    ``length_scale`` converts lengths to the units ``lam_e`` is calibrated for
    (default: scene diameter maps to 200 units).
    """
    x = np.asarray(material_points, dtype=float)
    X = np.asarray(canonical_points, dtype=float)
    if x.shape != X.shape:
        raise MappingError(f"correspondence count mismatch: {len(x)} material vs {len(X)} canonical points")
    if lam_e < 0:
        raise MappingError("elastic weight must be nonnegative")
    rng = np.random.default_rng(seed)
    lo, hi = x.min(axis=0), x.max(axis=0)
    diameter = float(np.linalg.norm(hi - lo))
    if length_scale is None:
        length_scale = REFERENCE_SCENE_SIZE / diameter
    mapping = NetworkMapping.create(rng, 0.5 * (lo + hi), 0.5 * np.max(hi - lo), width, omega0, tag)
    opt = nn.Adam(mapping.stack, lr=lr)
    trace = MappingTrace([], [], [])
    for k in range(steps):
        mapping.stack.zero_grad()
        x_reg = np.concatenate([mesh.vertices, _sample_in_elements(rng, mesh)])
        lc, le = mapping_loss_terms(mapping, x, X, x_reg, lam_e, length_scale)
        opt.step(lr=lr_at(k, steps, lr))
        if k % log_every == 0 or k == steps - 1:
            trace.steps.append(k)
            trace.corr.append(lc / length_scale)
            trace.elastic.append(le)
    return mapping, trace


# ---------------------------------------------------------------------------
# warp cache and quality report


@dataclass
class WarpCache:
    X: np.ndarray  # (m, 3) canonical positions of element quadrature points
    R: np.ndarray  # (m, 3, 3) mapping rotations
    det: np.ndarray = None  # det grad phi
    anisotropy: np.ndarray = None  # singular value ratio of grad phi

    def warp(self, A_canonical):
        return warp_actuation(A_canonical, self.R)


def compute_warp_cache(mapping, mesh):
    X, J = mapping.jacobian(mesh.element_centers())
    det = np.linalg.det(J)
    R = rotation_extract(J)
    s = np.linalg.svd(J, compute_uv=False)
    return WarpCache(X, R, det, s[:, 0] / s[:, 2])


def write_warp_cache(path, cache):
    m = len(cache.X)
    with open(path, "wb") as fh:
        fh.write(WARP_MAGIC + struct.pack("<II", WARP_VERSION, m))
        fh.write(np.ascontiguousarray(cache.X, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(cache.R, dtype="<f8").tobytes())


def read_warp_cache(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != WARP_MAGIC:
        raise MappingError(f"{path}: not a warp cache")
    version, m = struct.unpack_from("<II", data, 8)
    if version != WARP_VERSION:
        raise MappingError(f"{path}: unsupported warp cache version {version}")
    if len(data) != 16 + 8 * 12 * m:
        raise MappingError(f"{path}: truncated warp cache")
    flat = np.frombuffer(data, "<f8", offset=16)
    return WarpCache(flat[:3 * m].reshape(m, 3).copy(), flat[3 * m:].reshape(m, 3, 3).copy())


def quality_report(mapping, mesh, material_points, canonical_points, bins=10):
    """Determinant and anisotropy histograms plus correspondence error statistics."""
    cache = compute_warp_cache(mapping, mesh)
    err = np.linalg.norm(mapping(material_points) - canonical_points, axis=1)
    det_hist, det_edges = np.histogram(cache.det, bins=bins)
    an_hist, an_edges = np.histogram(cache.anisotropy, bins=bins)
    return {
        "det_min": float(cache.det.min()),
        "det_max": float(cache.det.max()),
        "det_histogram": {"counts": det_hist.tolist(), "edges": det_edges.tolist()},
        "anisotropy_max": float(cache.anisotropy.max()),
        "anisotropy_histogram": {"counts": an_hist.tolist(), "edges": an_edges.tolist()},
        "vertex_error_mean": float(err.mean()),
        "vertex_error_max": float(err.max()),
    }
