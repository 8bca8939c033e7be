"""Expression/style-conditioned actuation and jaw networks trained through the simulator.

An expression code and a per-identity style code are encoded and concatenated
into ``z``. A tiny network turns ``z`` into a modulation code ``m`` in (-1, 1)
that gates every hidden layer of a coordinate network ``A(X, m)`` over
canonical space; a second network maps ``z`` to the jaw's rigid motion in the
canonical jaw frame.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import canonical, datagen, diffsim, nn, pd
from .transforms import RigidTransform, rotation_from_6d, rotation_from_6d_backward

log = logging.getLogger(__name__)

LAMBDA_ACT = 1e-3
LAMBDA_LIP = 1e-6
# max |d/dz GeLU(z)|, attained at z = sqrt(2)
GELU_LIPSCHITZ = 1.1289017
JAW_T_SCALE = 0.1
_BASE_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
_OFFDIAG = ((0, 1), (0, 2), (1, 2))
CHECKPOINT_NETS = "model.nn"
CHECKPOINT_META = "model.json"


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    expr_dim: int = 19
    style_dim: int = 4
    expr_width: int = 32
    style_width: int = 16
    mod_width: int = 32
    width: int = 64
    n_hidden: int = 2
    omega0: float = 30.0
    jaw_width: int = 64
    center: tuple = (0.5, 0.5, 0.25)
    scale: float = 0.5
    seed: int = 0

    @property
    def z_dim(self):
        return self.expr_width + self.style_width

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["center"] = tuple(d["center"])
        return cls(**d)


def sym_from_vec(r):
    """``I + sym(r)`` from 6-vectors (diagonal first, then 01, 02, 12)."""
    r = np.atleast_2d(r)
    A = np.broadcast_to(np.eye(3), (len(r), 3, 3)).copy()
    for k in range(3):
        A[:, k, k] += r[:, k]
    for k, (i, j) in enumerate(_OFFDIAG):
        A[:, i, j] += r[:, 3 + k]
        A[:, j, i] += r[:, 3 + k]
    return A


def sym_from_vec_backward(gA):
    gr = np.empty((len(gA), 6))
    for k in range(3):
        gr[:, k] = gA[:, k, k]
    for k, (i, j) in enumerate(_OFFDIAG):
        gr[:, 3 + k] = gA[:, i, j] + gA[:, j, i]
    return gr


@dataclass
class FrameOutput:
    """Network outputs for one (expression, style) pair plus what backward needs."""

    A: np.ndarray  # canonical tensors at the queried points
    jaw: RigidTransform
    m: np.ndarray
    z: np.ndarray
    _cache: dict = field(default=None, repr=False)


class ActuationModel:
    def __init__(self, config=None, identities=()):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        W = cfg.width
        self.expr_enc = nn.mlp(rng, [cfg.expr_dim, cfg.expr_width, cfg.expr_width], ["gelu", "gelu"])
        self.style_enc = nn.mlp(rng, [cfg.style_dim, cfg.style_width, cfg.style_width], ["gelu", "gelu"])
        self.mod_net = nn.mlp(rng, [cfg.z_dim, cfg.mod_width, W], ["gelu", "tanh"])
        layers = [nn.DenseLayer.create(rng, 3, W, "sine", cfg.omega0, first=True)]
        layers += [nn.DenseLayer.create(rng, W, W, "gelu", lipschitz=True) for _ in range(cfg.n_hidden)]
        layers.append(nn.DenseLayer.create(rng, W, 6, "linear", lipschitz=True, zero=True))
        self.backbone = nn.Sequential(layers)
        self.jaw_net = nn.mlp(rng, [cfg.z_dim, cfg.jaw_width, cfg.jaw_width, 9], ["gelu", "gelu", "linear"], zero_last=True)
        self.names = []
        self.styles = np.zeros((0, cfg.style_dim))
        self._style_rng = np.random.default_rng([cfg.seed, 1])
        for name in identities:
            self.register(name)

    # -- registry -------------------------------------------------------------
    def register(self, name):
        if name in self.names:
            return self.names.index(name)
        code = 0.1 * self._style_rng.standard_normal(self.config.style_dim)
        self.names.append(name)
        self.styles = np.vstack([self.styles, code])
        return len(self.names) - 1

    def style_index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise ModelError(f"unknown identity {name!r}") from None

    def style_code(self, style):
        """Style vector from a registered name or an explicit vector."""
        if isinstance(style, str):
            return self.styles[self.style_index(style)].copy()
        v = np.asarray(style, dtype=float)
        if v.shape != (self.config.style_dim,):
            raise ModelError(f"style code must have {self.config.style_dim} entries")
        return v

    def interpolate_style(self, a, b, lam):
        if not 0.0 <= lam <= 1.0:
            raise ModelError("interpolation weight must lie in [0, 1]")
        sa, sb = self.style_code(a), self.style_code(b)
        if lam == 0.0:
            return sa
        if lam == 1.0:
            return sb
        return (1.0 - lam) * sa + lam * sb

    # -- pieces ---------------------------------------------------------------
    @property
    def sine(self):
        return self.backbone.layers[0]

    @property
    def hidden(self):
        return self.backbone.layers[1:-1]

    @property
    def head(self):
        return self.backbone.layers[-1]

    def stacks(self):
        return [self.expr_enc, self.style_enc, self.mod_net, self.backbone, self.jaw_net]

    def zero_grad(self):
        for s in self.stacks():
            s.zero_grad()

    def _check_expr(self, expr):
        e = np.asarray(expr, dtype=float).reshape(-1)
        if e.shape != (self.config.expr_dim,):
            raise ModelError(f"expression code must have {self.config.expr_dim} entries, got {e.size}")
        if not np.all(np.isfinite(e)):
            raise ModelError("expression code has non-finite entries")
        return e

    def encode(self, expr, style):
        e = self._check_expr(expr)
        s = self.style_code(style)
        ze = self.expr_enc.forward(e[None], keep=False)
        zs = self.style_enc.forward(s[None], keep=False)
        return np.concatenate([ze, zs], axis=1)[0]

    def modulation(self, z):
        return self.mod_net.forward(np.atleast_2d(z), keep=False)[0]

    def _normalize(self, X):
        return (np.atleast_2d(np.asarray(X, dtype=float)) - np.asarray(self.config.center)) / self.config.scale

    def actuation_query(self, X, m, _cache=None):
        """``A(X, m)`` for canonical points ``X`` (N, 3); depends on nothing else."""
        m = np.asarray(m, dtype=float).reshape(1, -1)
        c0 = {} if _cache is not None else None
        a = self.sine.forward(self._normalize(X), c0)
        hid = []
        for layer in self.hidden:
            c = {} if _cache is not None else None
            g = layer.forward(a, c)
            hid.append((c, g))
            a = g * m
        ch = {} if _cache is not None else None
        r = self.head.forward(a, ch)
        if _cache is not None:
            _cache.update(c0=c0, hid=hid, ch=ch, m=m)
        return sym_from_vec(r)

    def _jaw_from_output(self, o):
        R, rc = rotation_from_6d(_BASE_6D + o[:6])
        return RigidTransform(R, JAW_T_SCALE * o[6:]), rc

    def jaw_query(self, z):
        o = self.jaw_net.forward(np.atleast_2d(z), keep=False)[0]
        return self._jaw_from_output(o)[0]

    # -- differentiable evaluation -----------------------------------------------
    def forward_frame(self, expr, style, X):
        e = self._check_expr(expr)
        s = self.style_code(style)
        ze = self.expr_enc.forward(e[None])
        zs = self.style_enc.forward(s[None])
        z = np.concatenate([ze, zs], axis=1)
        m = self.mod_net.forward(z)
        o = self.jaw_net.forward(z)[0]
        jaw, rc = self._jaw_from_output(o)
        cache = {"rc": rc}
        A = self.actuation_query(X, m, cache)
        return FrameOutput(A, jaw, m[0], z[0], cache)

    def backward_frame(self, out, gA=None, gR=None, gt=None):
        """Accumulate parameter gradients; returns ``dL/d style``.

        Must directly follow the matching :meth:`forward_frame`.
        """
        cache = out._cache
        W = self.config.width
        gm = np.zeros((1, W))
        if gA is not None:
            ga = self.head.backward(cache["ch"], sym_from_vec_backward(gA))
            m = cache["m"]
            for layer, (c, g) in zip(reversed(self.hidden), reversed(cache["hid"])):
                gm += np.sum(ga * g, axis=0, keepdims=True)
                ga = layer.backward(c, ga * m)
            self.sine.backward(cache["c0"], ga)
        go = np.zeros(9)
        if gR is not None:
            go[:6] = rotation_from_6d_backward(cache["rc"], gR)
        if gt is not None:
            go[6:] = JAW_T_SCALE * np.asarray(gt)
        gz = self.mod_net.backward(gm) + self.jaw_net.backward(go[None])
        E = self.config.expr_width
        self.expr_enc.backward(gz[:, :E])
        return self.style_enc.backward(gz[:, E:])[0]

    # -- Lipschitz bookkeeping ---------------------------------------------------
    def lipschitz_layers(self):
        return self.backbone.lipschitz_layers()

    def lipschitz_product(self):
        return nn.lipschitz_loss(self.backbone)

    def certified_bound(self):
        """``L`` with ``|A(X1, m) - A(X2, m)|_F <= L |X1 - X2|_inf`` for any ``|m| < 1``."""
        s = self.sine
        L = s.omega0 * float(np.abs(s.W).sum(axis=1).max()) / self.config.scale
        for layer in self.hidden:
            L *= GELU_LIPSCHITZ * layer.bound()
        L *= self.head.bound()
        return 3.0 * L

    def lipschitz_violation(self):
        """Largest excess of an effective row l1 norm over its layer's bound (<= 0 when satisfied)."""
        worst = -np.inf
        for layer in self.lipschitz_layers():
            rows = np.abs(layer.weight()).sum(axis=1)
            worst = max(worst, float(rows.max() - layer.bound()))
        return worst

    # -- persistence ---------------------------------------------------------
    def save(self, path):
        os.makedirs(path, exist_ok=True)
        nn.save_stacks(os.path.join(path, CHECKPOINT_NETS), self.stacks())
        meta = {
            "config": asdict(self.config),
            "identities": list(self.names),
            "style_codes": self.styles.tolist(),
            "lipschitz_product": self.lipschitz_product(),
            "certified_bound": self.certified_bound(),
        }
        with open(os.path.join(path, CHECKPOINT_META), "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        mpath = os.path.join(path, CHECKPOINT_META)
        if not os.path.exists(mpath):
            raise ModelError(f"{path}: missing {CHECKPOINT_META}")
        with open(mpath) as fh:
            meta = json.load(fh)
        model = cls(ModelConfig.from_dict(meta["config"]))
        stacks = nn.load_stacks(os.path.join(path, CHECKPOINT_NETS))
        if len(stacks) != 5:
            raise ModelError(f"{path}: expected 5 network stacks, found {len(stacks)}")
        model.expr_enc, model.style_enc, model.mod_net, model.backbone, model.jaw_net = stacks
        model.names = list(meta["identities"])
        model.styles = np.array(meta["style_codes"], dtype=float).reshape(len(model.names), model.config.style_dim)
        return model


# ---------------------------------------------------------------------------
# losses


def vertex_normals_backward(points, tris, g_normals):
    """Gradient w.r.t. points of ``sum g . n`` for area-weighted unit normals."""
    P = np.asarray(points)
    e1 = P[tris[:, 1]] - P[tris[:, 0]]
    e2 = P[tris[:, 2]] - P[tris[:, 0]]
    fn = np.cross(e1, e2)
    N = np.zeros_like(P)
    for k in range(3):
        np.add.at(N, tris[:, k], fn)
    nrm = np.linalg.norm(N, axis=1, keepdims=True)
    n = N / nrm
    gN = (g_normals - n * np.sum(n * g_normals, axis=1, keepdims=True)) / nrm
    gf = gN[tris[:, 0]] + gN[tris[:, 1]] + gN[tris[:, 2]]
    g1 = np.cross(e2, gf)
    g2 = np.cross(gf, e1)
    gP = np.zeros_like(P)
    np.add.at(gP, tris[:, 1], g1)
    np.add.at(gP, tris[:, 2], g2)
    np.add.at(gP, tris[:, 0], -(g1 + g2))
    return gP


def loss_geo(s, tris, s_target, n_target):
    """Mean vertex distance plus mean ``1 - n . n_target``, and ``dL/ds``.

    Normals of ``s`` are area-weighted vertex normals.
    """
    s = np.asarray(s, dtype=float)
    N = len(s)
    d = s - s_target
    dist = np.linalg.norm(d, axis=1)
    n = datagen.vertex_normals(s, tris)
    l_pos = float(dist.mean())
    l_nrm = float(np.mean(1.0 - np.sum(n * n_target, axis=1)))
    g = np.where(dist[:, None] > 0, d / np.where(dist > 0, dist, 1.0)[:, None], 0.0) / N
    g += vertex_normals_backward(s, tris, -np.asarray(n_target) / N)
    return l_pos + l_nrm, g, (l_pos, l_nrm)


def loss_act(A):
    """``mean_i |A_i - I|_F`` and its gradient."""
    A = np.asarray(A, dtype=float)
    D = A - np.eye(3)
    nrm = np.linalg.norm(D, axis=(1, 2))
    g = np.where(nrm[:, None, None] > 0, D / np.where(nrm > 0, nrm, 1.0)[:, None, None], 0.0) / len(A)
    return float(nrm.mean()), g


def loss_total(l_geo, l_act, l_lip, lam_act=LAMBDA_ACT, lam_lip=LAMBDA_LIP):
    return l_geo + lam_act * l_act + lam_lip * l_lip


def paralysis_mask(A, region, strength):
    """``I + s (A - I)`` inside ``region`` (bool per element); unchanged elsewhere."""
    if not 0.0 <= strength <= 1.0:
        raise ModelError("paralysis strength must lie in [0, 1]")
    A = np.array(A, dtype=float)
    region = np.asarray(region, dtype=bool)
    A[region] = np.eye(3) + strength * (A[region] - np.eye(3))
    return A


def frobenius_scalar(A):
    """Per-element visualization scalar ``|A - I|_F``."""
    return np.linalg.norm(np.asarray(A) - np.eye(3), axis=(1, 2))


# ---------------------------------------------------------------------------
# identities in the model's view


@dataclass
class IdentityContext:
    """Simulation assets of one identity plus its cached warp samples."""

    name: str
    identity: object  # datagen.SyntheticIdentity
    warp: canonical.WarpCache

    def bone_targets(self, T_canonical):
        return self.identity.bone_targets(T_canonical)

    def jaw_gradient(self, g_targets):
        """``dL/dR`` and ``dL/dt`` of the canonical jaw motion from bone-target gradients."""
        F = self.identity.jaw_frame
        Rf, tf = F.rotation, F.translation
        mask = self.identity.jaw_mask
        g = g_targets[mask] @ Rf  # rows R_f^T g_i
        q = (self.identity.bone_emb.rest_points[mask] - tf) @ Rf  # rows R_f^T (x_i - t_f)
        return g.T @ q, g.sum(axis=0)


def contexts_from_dataset(dataset, warps):
    return {ident.name: IdentityContext(ident.name, ident, warps[ident.name]) for ident in dataset.identities}


def exact_warp(identity):
    """Warp cache from the generator's analytic mapping (reference for tests)."""
    return canonical.WarpCache(identity.element_X.copy(), identity.element_R.copy())


@dataclass
class Prediction:
    u: np.ndarray
    surface: np.ndarray
    actuation: np.ndarray  # warped, simulation-ready
    jaw: RigidTransform
    state: object
    m: np.ndarray


def predict(model, ctx, expr, style=None, with_contact=False, u0=None, paralysis=None, jaw_reshape=None,
            tol=datagen.GT_TOL, max_iters=datagen.GT_MAX_ITERS, **contact_kw):
    """Simulate one frame from network outputs.

    ``paralysis`` is ``(region mask, strength)``; ``jaw_reshape`` replaces the
    identity's rest bone points (e.g. a resized jaw strip).
    """
    style = ctx.name if style is None else style
    z = model.encode(expr, style)
    m = model.modulation(z)
    A = canonical.warp_actuation(model.actuation_query(ctx.warp.X, m), ctx.warp.R)
    if paralysis is not None:
        A = paralysis_mask(A, *paralysis)
    T = model.jaw_query(z)
    ident = ctx.identity
    if jaw_reshape is None:
        targets = ctx.bone_targets(T)
    else:
        targets = pd.jaw_targets(jaw_reshape, ident.jaw_mask, ident.world_jaw(T))
    state = datagen.simulate(ident, A, targets, with_contact, u0=u0, tol=tol, max_iters=max_iters, **contact_kw)
    if not state.converged:
        raise pd.SolverError("frame simulation did not converge")
    return Prediction(state.u, ident.surface(state.u), A, T, state, m)


def style_transfer(model, ctx_target, expr, style_source, **kw):
    """Expression ``expr`` with the style of ``style_source`` on the target identity's geometry."""
    model.style_index(ctx_target.name)
    return predict(model, ctx_target, expr, style=style_source, **kw)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainTrace:
    steps: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    lipschitz: list = field(default_factory=list)
    skipped: int = 0
    lipschitz_violations: int = 0
    det_nonpositive: int = 0

    def lines(self):
        return ["step,loss,lipschitz_product"] + [f"{s},{float(l)!r},{float(p)!r}" for s, l, p in zip(self.steps, self.loss, self.lipschitz)]

    def smoothed(self, window=50):
        x = np.asarray(self.loss)
        if len(x) < window:
            return x.copy()
        return np.convolve(x, np.ones(window) / window, mode="valid")


def _batches(rng, items, batch_size):
    order = rng.permutation(len(items))
    return [[items[i] for i in order[k:k + batch_size]] for k in range(0, len(order), batch_size)]


def _step(model, opt, g_styles, lr, lam_lip, trace):
    if lam_lip:
        nn.lipschitz_loss(model.backbone, weight=lam_lip, accumulate=True)
    opt.step(extra_grads=[g_styles], lr=lr)
    if model.lipschitz_violation() > 1e-12:
        trace.lipschitz_violations += 1


def stage1_frame_loss(model, ctx, frame, jaw_weight=1.0, accumulate=True):
    """Regression of the warped field and the canonical jaw pose for one frame."""
    out = model.forward_frame(frame.expr, ctx.name, ctx.warp.X)
    R = ctx.warp.R
    A_w = canonical.warp_actuation(out.A, R)
    D = A_w - frame.actuation
    m = len(D)
    l_field = float(np.sum(D * D) / m)
    dR = out.jaw.rotation - frame.jaw_rotation
    l = ctx.identity.mesh.diameter()
    dt = (out.jaw.translation - frame.jaw_translation) / l
    l_jaw = float(np.sum(dR * dR) + dt @ dt)
    g_style = None
    if accumulate:
        gAw = 2.0 * D / m
        gA = R @ gAw @ R.transpose(0, 2, 1)
        g_style = model.backward_frame(out, gA, jaw_weight * 2.0 * dR, jaw_weight * 2.0 * dt / l)
    return l_field + jaw_weight * l_jaw, g_style, out


def train_stage1(model, dataset, contexts, epochs=400, lr=1e-4, batch_size=6, decay_start=0.5, jaw_weight=1.0,
                 lam_lip=LAMBDA_LIP, seed=0, frames=None, progress=None):
    """Warm start: regress reference fields and jaw poses, no simulator in the loop."""
    frames = dataset.split("train") if frames is None else frames
    for ctx in contexts.values():
        model.register(ctx.name)
    rng = np.random.default_rng(seed)
    opt = nn.Adam(model.stacks(), lr=lr, extra=[model.styles])
    trace = TrainTrace()
    n_batches = -(-len(frames) // batch_size)
    total = epochs * n_batches
    step = 0
    for epoch in range(epochs):
        for batch in _batches(rng, frames, batch_size):
            model.zero_grad()
            g_styles = np.zeros_like(model.styles)
            loss = 0.0
            for fr in batch:
                ctx = contexts[datagen_name(fr.identity)]
                lf, gs, _ = stage1_frame_loss(model, ctx, fr, jaw_weight)
                g_styles[model.style_index(ctx.name)] += gs / len(batch)
                loss += lf / len(batch)
            _scale_grads(model, 1.0 / len(batch))
            _step(model, opt, g_styles, canonical.lr_at(step, total, lr, decay_start), lam_lip, trace)
            trace.steps.append(step)
            trace.loss.append(loss)
            trace.lipschitz.append(model.lipschitz_product())
            step += 1
        if progress:
            progress(epoch, trace)
    return trace


def datagen_name(seed):
    return f"id{seed}"


def _scale_grads(model, f):
    for s in model.stacks():
        for layer in s.layers:
            layer.gW *= f
            layer.gb *= f
            layer.gc *= f


@dataclass
class Stage2Result:
    loss: float
    l_geo: float
    l_act: float
    state: object


def stage2_frame(model, ctx, frame, with_contact=False, u0=None, lam_act=LAMBDA_ACT, tol=1e-6,
                 max_iters=5000, accumulate=True, **contact_kw):
    """Simulate one frame from the networks, evaluate the loss and backpropagate through the adjoint."""
    out = model.forward_frame(frame.expr, ctx.name, ctx.warp.X)
    R = ctx.warp.R
    A_w = canonical.warp_actuation(out.A, R)
    ident = ctx.identity
    targets = ctx.bone_targets(out.jaw)
    state = datagen.simulate(ident, A_w, targets, with_contact, u0=u0, tol=tol, max_iters=max_iters, **contact_kw)
    if not state.converged:
        raise pd.SolverError("frame simulation did not converge")
    s = ident.surface(state.u)
    l_geo, g_s, _ = loss_geo(s, ident.surface_tris, frame.surface, frame.normals)
    l_act, g_act = loss_act(A_w)
    loss = l_geo + lam_act * l_act
    g_style = None
    if accumulate:
        adj = diffsim.adjoint_solve(state, ident.surface_emb.matrix.T @ g_s)
        gAw = diffsim.grad_wrt_actuation(adj, state) + lam_act * g_act
        gA = R @ gAw @ R.transpose(0, 2, 1)
        gR, gt = ctx.jaw_gradient(diffsim.grad_wrt_bone_targets(adj, state))
        g_style = model.backward_frame(out, gA, gR, gt)
    return Stage2Result(loss, l_geo, l_act, state), g_style, out


def train_stage2(model, dataset, contexts, epochs=20, lr=5e-5, batch_size=6, decay_start=0.0, with_contact=False,
                 lam_act=LAMBDA_ACT, lam_lip=LAMBDA_LIP, tol=1e-6, seed=0, frames=None, progress=None, **contact_kw):
    """End-to-end training through the simulator; identities are visited one at a time.

    Frames whose simulation fails are skipped and counted.
    """
    frames = dataset.split("train") if frames is None else frames
    rng = np.random.default_rng(seed)
    opt = nn.Adam(model.stacks(), lr=lr, extra=[model.styles])
    trace = TrainTrace()
    warm = {}
    by_identity = {}
    for fr in frames:
        by_identity.setdefault(fr.identity, []).append(fr)
    batches_per_epoch = sum(-(-len(v) // batch_size) for v in by_identity.values())
    total = epochs * batches_per_epoch
    step = 0
    for epoch in range(epochs):
        for ident_seed in sorted(by_identity):
            ctx = contexts[datagen_name(ident_seed)]
            for batch in _batches(rng, by_identity[ident_seed], batch_size):
                model.zero_grad()
                g_styles = np.zeros_like(model.styles)
                loss, used = 0.0, 0
                for fr in batch:
                    key = (fr.identity, fr.index)
                    try:
                        res, gs, out = stage2_frame(model, ctx, fr, with_contact, warm.get(key), lam_act, tol, **contact_kw)
                    except (pd.SolverError, ValueError) as exc:
                        trace.skipped += 1
                        log.warning("stage 2: skipped frame %s of %s (%s)", fr.index, ctx.name, exc)
                        continue
                    warm[key] = res.state.u
                    trace.det_nonpositive += int(np.sum(np.linalg.det(out.A) <= 0))
                    g_styles[model.style_index(ctx.name)] += gs
                    loss += res.loss
                    used += 1
                if used == 0:
                    continue
                _scale_grads(model, 1.0 / used)
                _step(model, opt, g_styles / used, canonical.lr_at(step, total, lr, decay_start), lam_lip, trace)
                trace.steps.append(step)
                trace.loss.append(loss / used)
                trace.lipschitz.append(model.lipschitz_product())
                step += 1
        if progress:
            progress(epoch, trace)
    return trace


def surface_error(model, ctx, frame, with_contact=False, **kw):
    """Mean vertex distance between the predicted and the reference surface."""
    pred = predict(model, ctx, frame.expr, with_contact=with_contact, **kw)
    return float(np.linalg.norm(pred.surface - frame.surface, axis=1).mean()), pred


def evaluate(model, dataset, contexts, split="test", with_contact=False, **kw):
    errs = []
    for fr in dataset.split(split):
        e, _ = surface_error(model, contexts[datagen_name(fr.identity)], fr, with_contact, **kw)
        errs.append(e)
    return np.array(errs)


def fine_tune_contact(model, ctx, frame, steps=10, lr=1e-4, lam_act=LAMBDA_ACT, lam_lip=LAMBDA_LIP, tol=1e-6, **contact_kw):
    """Stage-2 steps on a single frame with the contact model attached; returns the loss trace."""
    opt = nn.Adam(model.stacks(), lr=lr, extra=[model.styles])
    trace = TrainTrace()
    u0 = None
    for k in range(steps):
        model.zero_grad()
        res, gs, _ = stage2_frame(model, ctx, frame, True, u0, lam_act, tol, **contact_kw)
        u0 = res.state.u
        g_styles = np.zeros_like(model.styles)
        g_styles[model.style_index(ctx.name)] = gs
        _step(model, opt, g_styles, lr, lam_lip, trace)
        trace.steps.append(k)
        trace.loss.append(res.l_geo)
        trace.lipschitz.append(model.lipschitz_product())
    return trace


__all__ = [
    "ActuationModel",
    "IdentityContext",
    "ModelConfig",
    "loss_act",
    "loss_geo",
    "loss_total",
    "paralysis_mask",
    "predict",
    "style_transfer",
    "train_stage1",
    "train_stage2",
]
