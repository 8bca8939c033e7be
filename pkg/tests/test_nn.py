import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from physface import nn


def _fd(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        d = np.zeros_like(x)
        d.flat[i] = eps
        g.flat[i] = (f(x + d) - f(x - d)) / (2 * eps)
    return g


def _rel(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-12)


def test_normalize_inactive_clamp():
    W = np.array([[0.2, -0.3], [0.1, 0.4]])
    assert np.array_equal(nn.lipschitz_normalize(W, nn.softplus_inv(1.0)), W)


def test_normalize_halves_row():
    c = 0.3
    W = np.array([[1.0, -1.0], [0.1, 0.2]]) * np.array([[nn.softplus(c)], [1.0]])
    Wh = nn.lipschitz_normalize(W, c)
    assert np.allclose(Wh[0], W[0] / 2, rtol=1e-14)
    assert np.array_equal(Wh[1], W[1])


def test_normalize_gradient_fd(rng):
    W = rng.normal(size=(4, 3))
    c = 0.5
    G = rng.normal(size=W.shape)
    gW, gc = nn.lipschitz_normalize_backward(W, c, G)
    loss = lambda W_, c_: float(np.sum(G * nn.lipschitz_normalize(W_, c_)))
    assert _rel(gW, _fd(lambda w: loss(w, c), W)) < 1e-5
    fd_c = (loss(W, c + 1e-6) - loss(W, c - 1e-6)) / 2e-6
    assert gc == pytest.approx(fd_c, rel=1e-5)


@settings(max_examples=60)
@given(st.integers(0, 2**31), st.floats(-4, 4), st.integers(1, 6), st.integers(1, 6))
def test_row_norm_bound_invariant(seed, c, n_out, n_in):
    W = np.random.default_rng(seed).normal(scale=3.0, size=(n_out, n_in))
    rows = np.abs(nn.lipschitz_normalize(W, c)).sum(axis=1)
    assert np.all(rows <= nn.softplus(c) * (1 + 1e-9))


def test_zero_weight_stack_returns_biases():
    layers = [nn.DenseLayer(np.zeros((4, 3)), np.zeros(4)), nn.DenseLayer(np.zeros((2, 4)), [0.5, -1.5])]
    y = nn.Sequential(layers)(np.ones((5, 3)))
    assert np.array_equal(y, np.tile([0.5, -1.5], (5, 1)))


def test_single_sine_layer(rng):
    W, b, x = rng.normal(size=(3, 2)), rng.normal(size=3), rng.normal(size=(4, 2))
    y = nn.Sequential([nn.DenseLayer(W, b, "sine", omega0=5.0)])(x)
    assert np.allclose(y, np.sin(5 * (x @ W.T + b)), rtol=0, atol=1e-15)


def _stack(rng, kinds=("sine", "gelu", "tanh", "linear"), lipschitz=True):
    net = nn.mlp(rng, [3, 6, 5, 4, 2], list(kinds), omega0=5.0, lipschitz=lipschitz)
    # fresh bounds sit exactly on the clamp kink; move them so some rows are clamped
    for layer in net.lipschitz_layers():
        layer.c = float(nn.softplus_inv(0.7 * np.abs(layer.W).sum(axis=1).max()))
    return net


def test_stack_gradient_fd(rng):
    net = _stack(rng)
    x = rng.normal(size=(5, 3))
    T = rng.normal(size=(5, 2))

    def loss_p(p):
        net.set_flat(p)
        return 0.5 * float(np.sum((net.forward(x, keep=False) - T) ** 2))

    p0 = net.get_flat()
    net.set_flat(p0)
    net.zero_grad()
    y = net(x)
    gx = net.backward(y - T)
    g = net.get_flat_grad()
    assert _rel(g, _fd(loss_p, p0.copy())) < 1e-5
    net.set_flat(p0)
    fx = _fd(lambda xx: 0.5 * float(np.sum((net.forward(xx, keep=False) - T) ** 2)), x)
    assert _rel(gx, fx) < 1e-5


@pytest.mark.parametrize("kind", nn.ACTIVATIONS)
def test_every_layer_kind_gradient(kind, rng):
    net = nn.mlp(rng, [3, 4], [kind], omega0=5.0)
    x = rng.normal(size=(3, 3))

    def loss_p(p):
        net.set_flat(p)
        return float(np.sum(np.cos(net.forward(x, keep=False))))

    p0 = net.get_flat()
    net.zero_grad()
    y = net(x)
    net.backward(-np.sin(y))
    assert _rel(net.get_flat_grad(), _fd(loss_p, p0.copy())) < 1e-5


def test_jacobian_mode_fd(rng):
    net = _stack(rng, kinds=("sine", "gelu", "gelu", "linear"))
    x = rng.normal(size=(4, 3))
    y, J = net.forward_jac(x)
    for b in range(len(x)):
        fd = np.stack([
            (net.forward(x[b:b + 1] + 1e-6 * e, keep=False) - net.forward(x[b:b + 1] - 1e-6 * e, keep=False))[0] / 2e-6
            for e in np.eye(3)
        ], axis=1)
        assert _rel(J[b], fd) < 1e-6
    # loss on values and Jacobian entries, backpropagated to parameters
    Gy, GJ = rng.normal(size=y.shape), rng.normal(size=J.shape)

    def loss_p(p):
        net.set_flat(p)
        yy, JJ = net.forward_jac(x)
        return float(np.sum(Gy * yy) + np.sum(GJ * JJ))

    p0 = net.get_flat()
    net.set_flat(p0)
    net.zero_grad()
    net.forward_jac(x)
    net.backward_jac(Gy, GJ)
    g = net.get_flat_grad()
    assert _rel(g, _fd(loss_p, p0.copy())) < 1e-5


def test_dimension_mismatch(rng):
    net = _stack(rng)
    with pytest.raises(ValueError, match="width 3"):
        net(np.ones((2, 4)))
    with pytest.raises(ValueError, match="mismatch"):
        nn.Sequential([nn.DenseLayer(np.ones((2, 3)), np.zeros(2)), nn.DenseLayer(np.ones((2, 4)), np.zeros(2))])


def test_forward_is_deterministic():
    x = np.random.default_rng(3).normal(size=(7, 3))
    a = _stack(np.random.default_rng(5))(x)
    b = _stack(np.random.default_rng(5))(x)
    assert np.array_equal(a, b)


def _lip_stack(values):
    layers = [nn.DenseLayer(np.eye(2), np.zeros(2), c=nn.softplus_inv(v)) for v in values]
    return nn.Sequential(layers)


def test_lipschitz_loss_values():
    assert nn.lipschitz_loss(_lip_stack([1.0, 1.0, 1.0])) == pytest.approx(1.0, rel=1e-14)
    assert nn.lipschitz_loss(_lip_stack([2.0, 3.0])) == pytest.approx(6.0, rel=1e-14)
    with pytest.raises(ValueError):
        nn.lipschitz_loss(nn.Sequential([nn.DenseLayer(np.eye(2), np.zeros(2))]))


def test_lipschitz_loss_gradient_fd():
    net = _lip_stack([0.7, 2.0, 1.3])
    nn.lipschitz_loss(net, weight=1.0, accumulate=True)
    for layer in net.layers:
        c0 = layer.c
        vals = []
        for s in (1e-6, -1e-6):
            layer.c = c0 + s
            vals.append(nn.lipschitz_loss(net))
        layer.c = c0
        assert layer.gc == pytest.approx((vals[0] - vals[1]) / 2e-6, rel=1e-6)


def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0])
    m = {}
    for _ in range(5):
        nn.adam_step([p], [np.zeros(2)], m, lr=0.1)
    assert np.array_equal(p, [1.0, -2.0])


def test_adam_constant_gradient_direction():
    p = np.zeros(3)
    m = {}
    g = np.array([0.3, -2.0, 1e-3])
    for _ in range(200):
        before = p.copy()
        nn.adam_step([p], [g], m, lr=0.01)
    assert np.allclose(p - before, -0.01 * np.sign(g), rtol=1e-3)


def test_adam_quadratic_converges():
    p = np.array([3.0])
    m = {}
    for _ in range(5000):
        nn.adam_step([p], [2.0 * (p - 1.25)], m, lr=1e-2)
    assert abs(p[0] - 1.25) < 1e-6


def test_adam_optimizer_updates_stacks_and_extras(rng):
    net = _stack(rng)
    code = np.zeros(3)
    opt = nn.Adam([net], lr=1e-2, extra=[code])
    p0 = net.get_flat()
    net.zero_grad()
    net(np.ones((1, 3)))
    net.backward(np.ones((1, 2)))
    opt.step(extra_grads=[np.array([1.0, 0.0, -1.0])])
    assert not np.array_equal(net.get_flat(), p0)
    assert np.allclose(code, [-1e-2, 0.0, 1e-2])


def test_checkpoint_round_trip(tmp_path, rng):
    a, b = _stack(rng), nn.mlp(rng, [2, 3], ["tanh"])
    path = tmp_path / "net.ckpt"
    nn.save_stacks(path, [a, b])
    la, lb = nn.load_stacks(path)
    x = rng.normal(size=(4, 3))
    assert np.array_equal(la(x), a(x))
    assert np.array_equal(la.get_flat(), a.get_flat()) and np.array_equal(lb.get_flat(), b.get_flat())
    assert [l.kind for l in la.layers] == [l.kind for l in a.layers]
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(ValueError, match="trailing"):
        nn.load_stacks(path)
    path.write_bytes(b"garbage!" * 3)
    with pytest.raises(ValueError, match="not a network checkpoint"):
        nn.load_stacks(path)
