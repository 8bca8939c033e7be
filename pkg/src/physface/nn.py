"""Small float64 dense-network stack with manual reverse-mode gradients.

Layers compute ``a = act(W_hat x + b)`` on row batches ``x`` of shape (B, in).
``W_hat`` is ``W`` itself, or for Lipschitz layers ``W`` with each row scaled
by ``min(1, softplus(c) / |w|_1)``.

Besides plain forward/backward, stacks can propagate input tangents
(``forward_jac``) to get ``d y / d x``, and backpropagate losses on both ``y``
and that Jacobian (``backward_jac``); the mapping network's elastic term needs
this.
"""
import struct

import numpy as np
from scipy.special import erf, expit

ACTIVATIONS = ("sine", "gelu", "tanh", "linear")
_TAGS = {name: i for i, name in enumerate(ACTIVATIONS)}
CHECKPOINT_MAGIC = b"PHYSNN01"
CHECKPOINT_VERSION = 1
_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def softplus(c):
    return np.logaddexp(0.0, c)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def activation(kind, z, omega0=1.0):
    """Value, first and second derivative of an activation at ``z``."""
    if kind == "sine":
        s, c = np.sin(omega0 * z), np.cos(omega0 * z)
        return s, omega0 * c, -(omega0**2) * s
    if kind == "gelu":
        pdf = _INV_SQRT2PI * np.exp(-0.5 * z * z)
        cdf = 0.5 * (1.0 + erf(z / _SQRT2))
        return z * cdf, cdf + z * pdf, pdf * (2.0 - z * z)
    if kind == "tanh":
        t = np.tanh(z)
        return t, 1.0 - t * t, -2.0 * t * (1.0 - t * t)
    if kind == "linear":
        return z, np.ones_like(z), np.zeros_like(z)
    raise ValueError(f"unknown activation {kind!r}")


def lipschitz_normalize(W, c):
    """Rows of ``W`` scaled by ``min(1, softplus(c) / |w|_1)``."""
    W = np.asarray(W, dtype=float)
    r = np.abs(W).sum(axis=1)
    bound = softplus(c)
    scale = np.minimum(1.0, bound / np.where(r > 0, r, np.inf))
    return W * scale[:, None]


def lipschitz_normalize_backward(W, c, gWhat):
    """Gradients w.r.t. ``W`` and ``c`` given ``dL/dW_hat``."""
    r = np.abs(W).sum(axis=1)
    bound = softplus(c)
    active = r > bound
    rs = np.where(active, r, 1.0)
    s = np.where(active, bound / rs, 1.0)
    wg = np.sum(W * gWhat, axis=1)
    gW = s[:, None] * gWhat - np.where(active, bound / rs**2 * wg, 0.0)[:, None] * np.sign(W)
    gc = float(np.sum(np.where(active, wg / rs, 0.0))) * float(expit(c))
    return gW, gc


def _init_weights(rng, n_in, n_out, kind, omega0, first):
    if kind == "sine":
        bound = 1.0 / n_in if first else np.sqrt(6.0 / n_in) / omega0
    elif kind == "gelu":
        bound = np.sqrt(6.0 / n_in)
    else:
        bound = np.sqrt(1.0 / n_in)
    W = rng.uniform(-bound, bound, size=(n_out, n_in))
    b = rng.uniform(-1.0 / np.sqrt(n_in), 1.0 / np.sqrt(n_in), size=n_out)
    if kind == "sine" and first:
        b = rng.uniform(-1.0 / n_in, 1.0 / n_in, size=n_out)
    return W, b


class DenseLayer:
    def __init__(self, W, b, kind="linear", omega0=1.0, c=None):
        if kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        self.W = np.array(W, dtype=float)
        self.b = np.array(b, dtype=float)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError("bias length must equal the weight row count")
        self.kind = kind
        self.omega0 = float(omega0)
        self.c = None if c is None else float(c)
        self.zero_grad()

    @classmethod
    def create(cls, rng, n_in, n_out, kind, omega0=1.0, first=False, lipschitz=False, zero=False):
        W, b = _init_weights(rng, n_in, n_out, kind, omega0, first)
        if zero:
            W, b = np.zeros_like(W), np.zeros_like(b)
        c = None
        if lipschitz:
            # a zeroed layer still needs room to grow, so its bound starts at 1
            r = 1.0 if zero else max(np.abs(W).sum(axis=1).max(), 1e-3)
            c = float(softplus_inv(r))
        return cls(W, b, kind, omega0, c)

    @property
    def n_in(self):
        return self.W.shape[1]

    @property
    def n_out(self):
        return self.W.shape[0]

    @property
    def lipschitz(self):
        return self.c is not None

    def bound(self):
        """Upper bound of the row l1 norms of the effective weights."""
        if self.lipschitz:
            return float(softplus(self.c))
        return float(np.abs(self.W).sum(axis=1).max())

    def weight(self):
        return lipschitz_normalize(self.W, self.c) if self.lipschitz else self.W

    def zero_grad(self):
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self.gc = 0.0

    def params(self):
        out = [("W", self.W), ("b", self.b)]
        if self.lipschitz:
            out.append(("c", np.array([self.c])))
        return out

    # -- plain mode -------------------------------------------------------
    def forward(self, x, cache=None):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"layer expects inputs of width {self.n_in}, got shape {x.shape}")
        What = self.weight()
        z = x @ What.T + self.b
        a, da, _ = activation(self.kind, z, self.omega0)
        if cache is not None:
            cache.update(x=x, What=What, da=da)
        return a

    def _accumulate_weight_grad(self, gWhat):
        if self.lipschitz:
            gW, gc = lipschitz_normalize_backward(self.W, self.c, gWhat)
            self.gW += gW
            self.gc += gc
        else:
            self.gW += gWhat

    def backward(self, cache, ga):
        gz = ga * cache["da"]
        self._accumulate_weight_grad(gz.T @ cache["x"])
        self.gb += gz.sum(axis=0)
        return gz @ cache["What"]

    # -- tangent mode ---------------------------------------------------------
    def forward_jac(self, x, xd, cache=None):
        """Values and tangents; ``xd`` has shape (B, in, k)."""
        What = self.weight()
        z = x @ What.T + self.b
        zd = np.tensordot(xd, What, axes=([1], [1])).transpose(0, 2, 1)
        a, da, dda = activation(self.kind, z, self.omega0)
        ad = da[:, :, None] * zd
        if cache is not None:
            cache.update(x=x, xd=xd, What=What, zd=zd, da=da, dda=dda)
        return a, ad

    def backward_jac(self, cache, ga, gad):
        da, dda, zd = cache["da"], cache["dda"], cache["zd"]
        gzd = da[:, :, None] * gad
        gz = da * ga + dda * np.sum(zd * gad, axis=2)
        gWhat = gz.T @ cache["x"] + np.tensordot(gzd, cache["xd"], axes=([0, 2], [0, 2]))
        self._accumulate_weight_grad(gWhat)
        self.gb += gz.sum(axis=0)
        gx = gz @ cache["What"]
        gxd = np.tensordot(gzd, cache["What"], axes=([1], [0])).transpose(0, 2, 1)
        return gx, gxd


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"layer width mismatch: {a.n_out} -> {b.n_in}")
        self._caches = None

    @property
    def n_in(self):
        return self.layers[0].n_in

    @property
    def n_out(self):
        return self.layers[-1].n_out

    def forward(self, x, keep=True):
        caches = []
        for layer in self.layers:
            c = {} if keep else None
            x = layer.forward(x, c)
            caches.append(c)
        self._caches = caches if keep else None
        return x

    __call__ = forward

    def backward(self, gy):
        if self._caches is None:
            raise RuntimeError("backward called without a cached forward pass")
        for layer, c in zip(reversed(self.layers), reversed(self._caches)):
            gy = layer.backward(c, gy)
        return gy

    def forward_jac(self, x):
        """Outputs (B, out) and Jacobians (B, out, in)."""
        x = np.asarray(x, dtype=float)
        xd = np.broadcast_to(np.eye(self.n_in), (len(x), self.n_in, self.n_in))
        caches = []
        for layer in self.layers:
            c = {}
            x, xd = layer.forward_jac(x, xd, c)
            caches.append(c)
        self._caches = caches
        return x, xd

    def backward_jac(self, gy, gJ):
        for layer, c in zip(reversed(self.layers), reversed(self._caches)):
            gy, gJ = layer.backward_jac(c, gy, gJ)
        return gy

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def lipschitz_layers(self):
        return [layer for layer in self.layers if layer.lipschitz]

    # -- flat parameter view ---------------------------------------------------
    def parameters(self):
        return [arr for layer in self.layers for _, arr in layer.params()]

    def get_flat(self):
        return np.concatenate([a.ravel() for a in self.parameters()]) if self.layers else np.zeros(0)

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=float)
        k = 0
        for layer in self.layers:
            n = layer.W.size
            layer.W = flat[k:k + n].reshape(layer.W.shape).copy()
            k += n
            layer.b = flat[k:k + layer.b.size].copy()
            k += layer.b.size
            if layer.lipschitz:
                layer.c = float(flat[k])
                k += 1
        if k != flat.size:
            raise ValueError("flat parameter vector has the wrong length")

    def get_flat_grad(self):
        parts = []
        for layer in self.layers:
            parts += [layer.gW.ravel(), layer.gb.ravel()]
            if layer.lipschitz:
                parts.append(np.array([layer.gc]))
        return np.concatenate(parts)


def mlp(rng, sizes, kinds, omega0=1.0, lipschitz=False, zero_last=False):
    """Build a stack from layer widths and per-layer activation kinds."""
    if len(kinds) != len(sizes) - 1:
        raise ValueError("need one activation kind per layer")
    layers = []
    for i, kind in enumerate(kinds):
        lip = lipschitz if isinstance(lipschitz, bool) else lipschitz[i]
        layers.append(
            DenseLayer.create(
                rng, sizes[i], sizes[i + 1], kind, omega0, first=(i == 0), lipschitz=lip,
                zero=zero_last and i == len(kinds) - 1,
            )
        )
    return Sequential(layers)


def lipschitz_loss(stacks, weight=1.0, accumulate=False):
    """``prod softplus(c_i)`` over all Lipschitz layers of the given stacks.

    With ``accumulate`` the gradient ``weight * dL/dc_i`` is added to each layer.
    """
    if isinstance(stacks, Sequential):
        stacks = [stacks]
    layers = [layer for s in stacks for layer in s.lipschitz_layers()]
    if not layers:
        raise ValueError("no Lipschitz layers in the stack")
    bounds = np.array([softplus(layer.c) for layer in layers])
    total = float(np.prod(bounds))
    if accumulate:
        for layer, sb in zip(layers, bounds):
            layer.gc += weight * total / sb * float(expit(layer.c))
    return total


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params, grads, moments, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update in place. ``moments`` is a dict holding ``m``, ``v`` lists and step ``t``."""
    if not moments:
        moments["m"] = [np.zeros_like(p) for p in params]
        moments["v"] = [np.zeros_like(p) for p in params]
        moments["t"] = 0
    moments["t"] += 1
    t = moments["t"]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, moments["m"], moments["v"]):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


class Adam:
    """Adam over the parameters of one or more stacks (plus optional extra arrays)."""

    def __init__(self, stacks, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, extra=()):
        self.stacks = list(stacks) if not isinstance(stacks, Sequential) else [stacks]
        self.extra = list(extra)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.moments = {}

    def _flat(self):
        p = np.concatenate([s.get_flat() for s in self.stacks] + [e.ravel() for e in self.extra])
        return p

    def step(self, extra_grads=(), lr=None):
        p = self._flat()
        g = np.concatenate([s.get_flat_grad() for s in self.stacks] + [np.asarray(e).ravel() for e in extra_grads])
        adam_step([p], [g], self.moments, self.lr if lr is None else lr, self.beta1, self.beta2, self.eps)
        k = 0
        for s in self.stacks:
            n = s.get_flat().size
            s.set_flat(p[k:k + n])
            k += n
        for e in self.extra:
            e[...] = p[k:k + e.size].reshape(e.shape)
            k += e.size


# ---------------------------------------------------------------------------
# checkpoints


def save_stacks(path, stacks):
    """Write stacks as one checkpoint (layers concatenated, with per-stack layer counts)."""
    if isinstance(stacks, Sequential):
        stacks = [stacks]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(stacks)))
        for s in stacks:
            fh.write(struct.pack("<I", len(s.layers)))
            for layer in s.layers:
                fh.write(struct.pack("<BBdII", _TAGS[layer.kind], int(layer.lipschitz), layer.omega0, layer.n_in, layer.n_out))
                fh.write(np.ascontiguousarray(layer.W, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(layer.b, dtype="<f8").tobytes())
                if layer.lipschitz:
                    fh.write(struct.pack("<d", layer.c))


def load_stacks(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    version, n_stacks = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    stacks = []
    for _ in range(n_stacks):
        (n_layers,) = struct.unpack_from("<I", data, off)
        off += 4
        layers = []
        for _ in range(n_layers):
            tag, has_c, omega0, n_in, n_out = struct.unpack_from("<BBdII", data, off)
            off += struct.calcsize("<BBdII")
            W = np.frombuffer(data, "<f8", n_in * n_out, off).reshape(n_out, n_in).copy()
            off += 8 * n_in * n_out
            b = np.frombuffer(data, "<f8", n_out, off).copy()
            off += 8 * n_out
            c = None
            if has_c:
                (c,) = struct.unpack_from("<d", data, off)
                off += 8
            layers.append(DenseLayer(W, b, ACTIVATIONS[tag], omega0, c))
        stacks.append(Sequential(layers))
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return stacks
