"""Shape-targeting Projective Dynamics: constraint blocks, global operator, local-global solver.

Energy terms (all quadratic in ``u`` for fixed auxiliary targets):

* shape targeting, one block per element: ``w/2 |F_e - R_e A_e|^2``
* hourglass control, one block per element: ``w/2 sum_k |q_k|^2`` with
  ``q_k = (1/h) sum_c gamma_kc x_c`` (constant target zero)
* bone attachment, one block per embedded bone point: ``w/2 |W_i u - t_i|^2``

Because every block acts identically on x, y and z, the global matrix is
``L kron I3`` and only the scalar ``L`` is factorized.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import geom
from .kernels import project_rotations
from .transforms import RigidTransform, axial, is_rigid, signed_svd, skew

log = logging.getLogger(__name__)

BONE_WEIGHT_FACTOR = 1e3
HOURGLASS_WEIGHT_FACTOR = 1.0 / 24.0
DEFAULT_TOL = 1e-4
DEFAULT_MAX_ITERS = 200
MONOTONE_SLACK = 1e-12

HOURGLASS_VECTORS = np.array(
    [
        [sx * sy, sy * sz, sx * sz, sx * sy * sz]
        for sx, sy, sz in (2.0 * geom.CORNER_OFFSETS - 1.0)
    ]
).T  # (4, 8)


class SolverError(RuntimeError):
    pass


def shape_target_project(F, A):
    """Optimal rotation and energy density ``min_R |F - R A|_F^2`` for one element."""
    F = np.asarray(F, dtype=float)
    A = np.asarray(A, dtype=float)
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(A))):
        raise ValueError("NaN or infinite input to shape_target_project")
    if np.abs(A - A.T).max() > 1e-12 * max(1.0, np.abs(A).max()):
        raise ValueError("actuation tensor must be symmetric")
    R = project_rotations(F[None], A[None])[0]
    return R, float(np.sum((F - R @ A) ** 2))


def identity_actuation(m):
    return np.broadcast_to(np.eye(3), (m, 3, 3)).copy()


def check_actuation(A):
    A = np.asarray(A, dtype=float)
    if A.ndim != 3 or A.shape[1:] != (3, 3):
        raise ValueError(f"actuation must have shape (m, 3, 3), got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("actuation contains non-finite entries")
    if np.abs(A - A.transpose(0, 2, 1)).max(initial=0.0) >= 1e-12 * max(1.0, np.abs(A).max(initial=0.0)):
        raise ValueError("actuation tensors must be symmetric")
    return A


@dataclass
class ShapeTargetBlocks:
    weights: np.ndarray  # (m,)
    actuation: np.ndarray  # (m, 3, 3)


@dataclass
class BoneBlocks:
    embedding: geom.Embedding
    weights: np.ndarray  # (nb,)
    targets: np.ndarray  # (nb, 3)

    @property
    def matrix(self):
        return self.embedding.matrix


@dataclass
class Blocks:
    """All PD constraints of one scene; the actuation can be swapped per frame."""

    mesh: geom.HexMesh
    shape: ShapeTargetBlocks
    bones: BoneBlocks = None
    hourglass_weights: np.ndarray = None
    Gs: sp.csr_matrix = field(default=None, repr=False)
    Hs: sp.csr_matrix = field(default=None, repr=False)

    def __post_init__(self):
        if self.Gs is None:
            self.Gs = geom.scalar_gradient_operator(self.mesh)
        if self.Hs is None:
            self.Hs = hourglass_operator(self.mesh)
        if self.hourglass_weights is None:
            self.hourglass_weights = np.full(self.mesh.n_elements, HOURGLASS_WEIGHT_FACTOR * self.mesh.h**3)

    @property
    def actuation(self):
        return self.shape.actuation

    def with_actuation(self, actuation):
        A = check_actuation(actuation)
        if len(A) != self.mesh.n_elements:
            raise ValueError(f"expected {self.mesh.n_elements} actuation tensors, got {len(A)}")
        return Blocks(self.mesh, ShapeTargetBlocks(self.shape.weights, A), self.bones, self.hourglass_weights, self.Gs, self.Hs)

    def with_bone_targets(self, targets):
        bones = BoneBlocks(self.bones.embedding, self.bones.weights, np.asarray(targets, dtype=float))
        return Blocks(self.mesh, self.shape, bones, self.hourglass_weights, self.Gs, self.Hs)

    def weight_scale(self):
        """Mean shape-targeting weight, the reference scale of the convergence test."""
        return float(np.mean(self.shape.weights))


def hourglass_operator(mesh):
    """Sparse ``(4m, n)`` operator giving the hourglass amplitudes ``q_k`` of every element."""
    m = mesh.n_elements
    rows = (4 * np.arange(m)[:, None, None] + np.arange(4)[None, :, None]).repeat(8, axis=2)
    cols = np.broadcast_to(mesh.elements[:, None, :], (m, 4, 8))
    vals = np.broadcast_to(HOURGLASS_VECTORS[None] / mesh.h, (m, 4, 8))
    return sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(4 * m, mesh.n_vertices))


def build_shape_target_blocks(mesh, gradient_ops=None, actuation=None, weight=None):
    """One shape-targeting block per element, weighted by element volume by default."""
    m = mesh.n_elements
    if gradient_ops is not None and len(gradient_ops) != m:
        raise ValueError(f"expected {m} gradient operators, got {len(gradient_ops)}")
    A = identity_actuation(m) if actuation is None else check_actuation(actuation)
    if len(A) != m:
        raise ValueError(f"expected {m} actuation tensors, got {len(A)}")
    w = mesh.h**3 if weight is None else weight
    weights = np.broadcast_to(np.asarray(w, dtype=float), (m,)).copy()
    if np.any(weights <= 0):
        raise ValueError("constraint weights must be positive")
    return ShapeTargetBlocks(weights, A.copy())


def build_bone_blocks(bone_embedding, jaw_mask=None, jaw_transform=None, weight=None, h=None):
    """Attachment blocks: skull points target rest, jaw points target ``jaw_transform(rest)``.

    ``jaw_transform`` is a :class:`RigidTransform` already expressed in world
    coordinates (conjugate by the identity's jaw frame beforehand).
    """
    rest = bone_embedding.rest_points
    nb = len(rest)
    if weight is None:
        if h is None:
            raise ValueError("need either an explicit weight or the element size h")
        weight = BONE_WEIGHT_FACTOR * h**3
    weights = np.broadcast_to(np.asarray(weight, dtype=float), (nb,)).copy()
    targets = rest.copy()
    if jaw_transform is not None:
        if not is_rigid(jaw_transform.rotation, 1e-8):
            raise ValueError("jaw transform is not rigid (R^T R != I)")
        jaw = np.zeros(nb, dtype=bool) if jaw_mask is None else np.asarray(jaw_mask, dtype=bool)
        targets[jaw] = jaw_transform.apply(rest[jaw])
    return BoneBlocks(bone_embedding, weights, targets)


def jaw_targets(rest, jaw_mask, transform):
    targets = np.array(rest, dtype=float)
    targets[jaw_mask] = transform.apply(targets[jaw_mask])
    return targets


# ---------------------------------------------------------------------------
# global operator


class GlobalOperator:
    """Scalar Laplacian-like ``L`` (so that ``K = L kron I3``) and its factorization."""

    def __init__(self, L):
        self.L = sp.csc_matrix(L)
        n = self.L.shape[0]
        try:
            lu = spla.splu(
                self.L,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:
            raise SolverError("K not positive definite — check attachments") from exc
        pivots = lu.U.diagonal()
        scale = np.abs(self.L.diagonal()).max(initial=0.0)
        if n == 0 or np.any(pivots <= 1e-12 * scale):
            raise SolverError("K not positive definite — check attachments")
        self._lu = lu

    @property
    def n(self):
        return self.L.shape[0]

    def solve(self, rhs):
        """Solve ``K u = rhs`` for ``rhs`` of shape (n, 3) (or flat 3n)."""
        rhs = np.asarray(rhs, dtype=float)
        flat = rhs.ndim == 1
        out = self._lu.solve(rhs.reshape(-1, 3))
        if not np.all(np.isfinite(out)):
            raise SolverError("global solve produced non-finite values")
        return out.ravel() if flat else out

    def matvec(self, u):
        u = np.asarray(u, dtype=float)
        return (self.L @ u.reshape(-1, 3)).reshape(u.shape)

    def full_matrix(self):
        return sp.kron(self.L, sp.identity(3), format="csr")


def assemble_global(blocks):
    """Assemble and factorize ``K = sum_i w_i S_i^T G_i^T G_i S_i``."""
    Gs, Hs = blocks.Gs, blocks.Hs
    L = Gs.T @ sp.diags(np.repeat(blocks.shape.weights, 3)) @ Gs
    L = L + Hs.T @ sp.diags(np.repeat(blocks.hourglass_weights, 4)) @ Hs
    if blocks.bones is not None and len(blocks.bones.weights):
        W = blocks.bones.matrix
        L = L + W.T @ sp.diags(blocks.bones.weights) @ W
    L = 0.5 * (L + L.T)
    return GlobalOperator(L)


# ---------------------------------------------------------------------------
# local / global steps


def local_step(u, blocks, actuation=None):
    """Optimal rotations ``R_e`` for every shape-targeting block."""
    A = blocks.actuation if actuation is None else actuation
    F = geom.deformation_gradients(blocks.mesh, u, blocks.Gs)
    return project_rotations(F, A)


def right_hand_side(blocks, rotations):
    """``sum_i w_i S_i^T G_i^T B_i y_i`` as an (n, 3) array."""
    T = rotations @ blocks.actuation
    stacked = (blocks.shape.weights[:, None, None] * T.transpose(0, 2, 1)).reshape(-1, 3)
    rhs = blocks.Gs.T @ stacked
    if blocks.bones is not None and len(blocks.bones.weights):
        rhs = rhs + blocks.bones.matrix.T @ (blocks.bones.weights[:, None] * blocks.bones.targets)
    return rhs


def global_step(K, blocks, rotations):
    """Solve ``K u = rhs(y)`` for the current auxiliary targets."""
    return K.solve(right_hand_side(blocks, rotations))


def energy_terms(u, blocks, rotations):
    """Separate shape-targeting, hourglass and bone energies for given targets."""
    F = geom.deformation_gradients(blocks.mesh, u, blocks.Gs)
    T = rotations @ blocks.actuation
    e_st = 0.5 * float(np.sum(blocks.shape.weights * np.sum((F - T) ** 2, axis=(1, 2))))
    q = (blocks.Hs @ u).reshape(-1, 4, 3)
    e_hg = 0.5 * float(np.sum(blocks.hourglass_weights * np.sum(q**2, axis=(1, 2))))
    e_b = 0.0
    if blocks.bones is not None and len(blocks.bones.weights):
        d = blocks.bones.matrix @ u - blocks.bones.targets
        e_b = 0.5 * float(np.sum(blocks.bones.weights * np.sum(d**2, axis=1)))
    return e_st, e_hg, e_b


def energy(u, blocks, rotations=None):
    """Total PD energy; with ``rotations=None`` the rotations are optimized (true energy)."""
    if rotations is None:
        rotations = local_step(u, blocks)
    return sum(energy_terms(u, blocks, rotations))


def gradient(u, K, blocks, rotations=None):
    """Gradient of the true energy: ``K u - rhs(R*(u))``."""
    if rotations is None:
        rotations = local_step(u, blocks)
    return K.matvec(u) - right_hand_side(blocks, rotations)


@dataclass
class SimState:
    u: np.ndarray
    rotations: np.ndarray
    converged: bool
    grad_norm: float
    iterations: int
    energy: float
    blocks: Blocks = field(repr=False, default=None)
    K: GlobalOperator = field(repr=False, default=None)
    trace: list = field(default_factory=list)  # (iter, E, grad_norm)
    half_steps: list = field(default_factory=list)  # energies after each half step
    monotone: bool = True
    contact: object = field(repr=False, default=None)

    def trace_lines(self):
        return ["iter,E,grad_norm"] + [f"{i},{float(e)!r},{float(g)!r}" for i, e, g in self.trace]


def gradient_threshold(blocks, tol):
    return tol * blocks.mesh.h * blocks.weight_scale()


def solve_quasistatic(u0, blocks, actuation=None, tol=DEFAULT_TOL, max_iters=DEFAULT_MAX_ITERS, K=None):
    """Alternate local and global steps until ``|grad E|_inf < tol * h * mean(w)``."""
    if actuation is not None:
        blocks = blocks.with_actuation(actuation)
    if K is None:
        K = assemble_global(blocks)
    u = np.array(u0, dtype=float)
    if u.shape != (blocks.mesh.n_vertices, 3) or not np.all(np.isfinite(u)):
        raise ValueError("initial positions must be finite with one row per mesh vertex")
    thr = gradient_threshold(blocks, tol)
    state = SimState(u, None, False, np.inf, 0, np.inf, blocks, K)
    prev = None
    for it in range(max_iters):
        R = local_step(u, blocks)
        e_local = energy(u, blocks, R)
        if not np.isfinite(e_local):
            raise SolverError(f"NaN energy at iteration {it}")
        g = K.matvec(u) - right_hand_side(blocks, R)
        gnorm = float(np.abs(g).max())
        state.half_steps.append(e_local)
        if prev is not None and e_local > prev + MONOTONE_SLACK:
            state.monotone = False
        state.trace.append((it, e_local, gnorm))
        log.debug("%d,%r,%r", it, e_local, gnorm)
        state.iterations = it + 1
        state.rotations, state.energy, state.grad_norm = R, e_local, gnorm
        if gnorm < thr:
            state.converged = True
            break
        u = global_step(K, blocks, R)
        e_global = energy(u, blocks, R)
        if not np.isfinite(e_global):
            raise SolverError(f"NaN energy at iteration {it}")
        if e_global > e_local + MONOTONE_SLACK:
            state.monotone = False
        state.half_steps.append(e_global)
        prev = e_global
    state.u = u
    return state


# ---------------------------------------------------------------------------
# second-order information for the adjoint


def _rotation_differential(R, S_inv, dM):
    """``dR`` of the polar rotation for perturbations ``dM`` (batched, trailing 3x3)."""
    X = np.swapaxes(R, -1, -2) @ dM
    x = 2.0 * axial(X)  # axial of R^T dM - dM^T R
    w = np.einsum("...ij,...j->...i", S_inv, x)
    return R @ skew(w)


def projection_derivatives(F, A):
    """Jacobians of ``P = R*(F A) A`` w.r.t. row-major ``vec(F)`` and ``vec(A)``.

    Returns two arrays of shape (m, 9, 9) with ``[e, 3i+j, 3a+b] = dP_ij / dX_ab``.
    Degenerate cases where two signed singular values cancel produce large
    but finite entries (a tiny floor is applied).
    """
    F = np.asarray(F, dtype=float)
    A = np.asarray(A, dtype=float)
    M = F @ A
    U, s, Vt = signed_svd(M)
    R = U @ Vt
    V = np.swapaxes(Vt, -1, -2)
    # (tr(S) I - S)^-1 in the V basis: eigenvalues s_j + s_k
    pair = np.stack([s[:, 1] + s[:, 2], s[:, 0] + s[:, 2], s[:, 0] + s[:, 1]], axis=1)
    pair = np.where(np.abs(pair) < 1e-14, np.copysign(1e-14, pair + 0.0), pair)
    S_inv = V @ (np.eye(3)[None] / pair[:, None, :]) @ Vt
    m = len(F)
    E = np.zeros((9, 3, 3))
    for k in range(9):
        E[k, k // 3, k % 3] = 1.0
    Rb, Sb = R[:, None], S_inv[:, None]
    # d/dF: dM = E A
    dR_F = _rotation_differential(Rb, Sb, E[None] @ A[:, None])
    dP_F = dR_F @ A[:, None]
    # d/dA: dM = F E, dP = dR A + R E
    dR_A = _rotation_differential(Rb, Sb, F[:, None] @ E[None])
    dP_A = dR_A @ A[:, None] + Rb @ E[None]
    return dP_F.reshape(m, 9, 9).transpose(0, 2, 1), dP_A.reshape(m, 9, 9).transpose(0, 2, 1), R


def element_dof_indices(mesh):
    """Global flat dof index (3v + i) for each element's 24 local dofs."""
    return (3 * mesh.elements[:, :, None] + np.arange(3)[None, None, :]).reshape(-1, 24)


def energy_hessian(u, blocks, K=None, exact=True):
    """Hessian of the true PD energy at ``u`` as a sparse (3n, 3n) matrix.

    With ``exact=False`` the Gauss-Newton approximation ``K`` is returned.
    """
    if K is None:
        K = assemble_global(blocks)
    H = K.full_matrix()
    if not exact:
        return H
    F = geom.deformation_gradients(blocks.mesh, u, blocks.Gs)
    dP_F, _, _ = projection_derivatives(F, blocks.actuation)
    G = geom.element_gradient_matrix(blocks.mesh.h)
    local = -blocks.shape.weights[:, None, None] * (G.T[None] @ dP_F @ G[None])
    dofs = element_dof_indices(blocks.mesh)
    rows = np.repeat(dofs, 24, axis=1).ravel()
    cols = np.tile(dofs, (1, 24)).ravel()
    Hc = sp.csr_matrix((local.ravel(), (rows, cols)), shape=H.shape)
    H = H + Hc
    return (0.5 * (H + H.T)).tocsr()


def rigid_targets(blocks, transform):
    """Bone targets after applying a rigid transform to the current targets."""
    return transform.apply(blocks.bones.targets)


__all__ = [
    "Blocks",
    "BoneBlocks",
    "GlobalOperator",
    "RigidTransform",
    "ShapeTargetBlocks",
    "SimState",
    "SolverError",
    "assemble_global",
    "build_bone_blocks",
    "build_shape_target_blocks",
    "energy",
    "energy_hessian",
    "global_step",
    "gradient",
    "local_step",
    "projection_derivatives",
    "shape_target_project",
    "solve_quasistatic",
]
