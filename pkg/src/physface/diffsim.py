"""Adjoint sensitivities of the converged quasistatic state.

At a converged state ``grad E(u; A, t) (+ grad B(u)) = 0``. For a loss
``L(u)`` the adjoint ``lam`` solves ``H lam = dL/du`` with ``H`` the Hessian of
the total energy, and the parameter gradients are
``dL/dtheta = -lam . d(grad E)/d theta``.
"""
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import contact, geom, pd

ADJOINT_RTOL = 1e-10
REPORT_HEADER = "param_id,analytic,fd,rel_err"


@dataclass
class AdjointState:
    lam: np.ndarray  # (n, 3)
    dL_du: np.ndarray  # (n, 3)
    include_contact: bool
    residual: float
    hessian: sp.csr_matrix = None


def system_matrix(state, include_contact=None, exact=True, project_barrier=False):
    """Hessian of the total energy at ``state.u`` (3n x 3n, sparse)."""
    H = pd.energy_hessian(state.u, state.blocks, state.K, exact=exact)
    info = state.contact
    if include_contact is None:
        include_contact = info is not None
    if include_contact and info is not None:
        cset = contact.collect_pairs(info.proxy, info.proxy.positions(state.u), info.dhat)
        if len(cset):
            _, _, HB = contact.assemble_barrier(cset, info.proxy, state.u, info.dhat, info.kappa, project=project_barrier)
            H = H + HB
        if info.friction is not None:
            _, _, HF = contact.friction_assembly(info.friction, info.proxy, state.u)
            H = H + HF
    return H.tocsr(), bool(include_contact and info is not None)


def adjoint_solve(state, dL_du, include_contact=None, exact=True, project_barrier=False):
    """Solve ``(Hess E [+ Hess B]) lam = dL/du`` at a converged state."""
    if not state.converged:
        raise pd.SolverError("adjoint requires a converged state")
    g = np.asarray(dL_du, dtype=float).reshape(-1, 3)
    H, with_contact = system_matrix(state, include_contact, exact, project_barrier)
    b = g.ravel()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return AdjointState(np.zeros_like(g), g, with_contact, 0.0, H)
    lam = None
    try:
        lam = contact.pcg(state.K, H - state.K.full_matrix(), b, rtol=ADJOINT_RTOL)
    except pd.SolverError:
        lam = None
    if lam is None:
        lam = spla.spsolve(H.tocsc(), b)
    res = float(np.linalg.norm(H @ lam - b) / bnorm)
    return AdjointState(lam.reshape(-1, 3), g, with_contact, res, H)


def _element_adjoint_gradients(lam, blocks):
    """``G_e lam`` as row-major 9-vectors per element."""
    return geom.deformation_gradients(blocks.mesh, lam, blocks.Gs).reshape(-1, 9)


def grad_wrt_actuation(adj, state):
    """Symmetric ``dL/dA_e`` for every element, shape (m, 3, 3)."""
    blocks = state.blocks
    F = geom.deformation_gradients(blocks.mesh, state.u, blocks.Gs)
    _, dP_A, _ = pd.projection_derivatives(F, blocks.actuation)
    Gl = _element_adjoint_gradients(adj.lam, blocks)
    X = blocks.shape.weights[:, None] * np.einsum("ek,ekl->el", Gl, dP_A)
    X = X.reshape(-1, 3, 3)
    return 0.5 * (X + X.transpose(0, 2, 1))


def grad_wrt_bone_targets(adj, state):
    """``dL/dt_i = w_i (W lam)_i`` for every bone point, shape (nb, 3)."""
    bones = state.blocks.bones
    return bones.weights[:, None] * (bones.matrix @ adj.lam)


def grad_wrt_rigid(grad_targets, targets, mask=None):
    """Chain rule to a rigid motion of (a subset of) the targets.

    Returns ``(d/d translation, d/d rotation vector)`` at the identity.
    """
    g = np.asarray(grad_targets)
    t = np.asarray(targets)
    if mask is not None:
        g, t = g[mask], t[mask]
    return g.sum(axis=0), np.cross(t, g).sum(axis=0)


# ---------------------------------------------------------------------------
# losses and finite-difference checking


def point_loss(vertex, target):
    """``L(u) = 1/2 |u[vertex] - target|^2`` and its gradient."""
    target = np.asarray(target, dtype=float)

    def loss(u):
        d = u[vertex] - target
        g = np.zeros_like(u)
        g[vertex] = d
        return 0.5 * float(d @ d), g

    return loss


def solve_scene(blocks, u0, proxy=None, tol=1e-10, max_iters=20000, **contact_kw):
    if proxy is None:
        return pd.solve_quasistatic(u0, blocks, tol=tol, max_iters=max_iters)
    return contact.solve_quasistatic_contact(u0, blocks, proxy, tol=tol, max_iters=max_iters, **contact_kw)


def _sym_unit(i, j):
    E = np.zeros((3, 3))
    E[i, j] += 0.5
    E[j, i] += 0.5
    return E


def fd_actuation(blocks, u0, loss, element, step=1e-5, proxy=None, tol=1e-10, **kw):
    """Central differences of ``L(u*(A))`` for the 6 independent entries of ``A_element``.

    Perturbs ``A`` symmetrically (``(E_ij + E_ji) / 2``), which matches the
    symmetric gradient returned by :func:`grad_wrt_actuation`.
    """
    out = {}
    for i in range(3):
        for j in range(i, 3):
            vals = []
            for s in (1, -1):
                A = blocks.actuation.copy()
                A[element] += s * step * _sym_unit(i, j)
                st = solve_scene(blocks.with_actuation(A), u0, proxy, tol=tol, **kw)
                if not st.converged:
                    raise pd.SolverError("finite-difference re-solve did not converge")
                vals.append(loss(st.u)[0])
            out[(i, j)] = (vals[0] - vals[1]) / (2 * step)
    return out


def fd_bone_targets(blocks, u0, loss, points, step=1e-5, proxy=None, tol=1e-10, **kw):
    out = {}
    for p in points:
        for a in range(3):
            vals = []
            for s in (1, -1):
                t = blocks.bones.targets.copy()
                t[p, a] += s * step
                st = solve_scene(blocks.with_bone_targets(t), u0, proxy, tol=tol, **kw)
                if not st.converged:
                    raise pd.SolverError("finite-difference re-solve did not converge")
                vals.append(loss(st.u)[0])
            out[(p, a)] = (vals[0] - vals[1]) / (2 * step)
    return out


def relative_error(a, b, floor=1e-12):
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradcheck_actuation(blocks, u0, loss, elements=None, step=1e-5, proxy=None, tol=1e-10, floor=None, **kw):
    """Compare adjoint actuation gradients with central differences.

    Returns report rows ``(param_id, analytic, fd, rel_err)``. ``floor`` is the
    magnitude below which errors are measured against ``floor`` instead of
    the entry itself (defaults to 1e-6 of the largest gradient entry).
    """
    state = solve_scene(blocks, u0, proxy, tol=tol, **kw)
    if not state.converged:
        raise pd.SolverError("base solve did not converge")
    _, dL = loss(state.u)
    adj = adjoint_solve(state, dL)
    G = grad_wrt_actuation(adj, state)
    if elements is None:
        elements = range(blocks.mesh.n_elements)
    if floor is None:
        floor = 1e-6 * max(np.abs(G).max(), 1e-300)
    rows = []
    for e in elements:
        fd = fd_actuation(blocks, u0, loss, e, step, proxy, tol, **kw)
        for (i, j), v in fd.items():
            a = float(G[e, i, j])
            rows.append((f"A[{e}][{i}{j}]", a, float(v), relative_error(a, v, floor)))
    return rows


def gradcheck_bones(blocks, u0, loss, points, step=1e-5, proxy=None, tol=1e-10, floor=None, **kw):
    state = solve_scene(blocks, u0, proxy, tol=tol, **kw)
    if not state.converged:
        raise pd.SolverError("base solve did not converge")
    _, dL = loss(state.u)
    adj = adjoint_solve(state, dL)
    G = grad_wrt_bone_targets(adj, state)
    if floor is None:
        floor = 1e-6 * max(np.abs(G).max(), 1e-300)
    rows = []
    for (p, a), v in fd_bone_targets(blocks, u0, loss, points, step, proxy, tol, **kw).items():
        rows.append((f"t[{p}][{a}]", float(G[p, a]), float(v), relative_error(G[p, a], v, floor)))
    return rows


def format_report(rows):
    return [REPORT_HEADER] + [f"{pid},{float(a)!r},{float(f)!r},{float(e)!r}" for pid, a, f, e in rows]
