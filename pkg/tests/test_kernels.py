import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from physface import kernels
from physface.kernels.contact import EE, VT
from physface.transforms import random_rotations

needs_numba = pytest.mark.skipif(not kernels.USE_NUMBA, reason="numba path disabled")


def _pairs(seed, n=64):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, 4, 3))
    kind = r.integers(0, 2, n)
    return x, kind


@needs_numba
@given(st.integers(0, 2**31))
def test_rotation_projection_paths_agree(seed):
    r = np.random.default_rng(seed)
    F = r.normal(size=(20, 3, 3))
    A = r.normal(size=(20, 3, 3))
    A = A + A.transpose(0, 2, 1)
    Rn = kernels.project_rotations_numba(F, A)
    Rp = kernels.project_rotations_numpy(F, A)
    assert np.allclose(Rn, Rp, atol=1e-9)
    assert np.allclose(np.linalg.det(Rn), 1.0)


@needs_numba
@given(st.integers(0, 2**31))
def test_distance_paths_agree(seed):
    x, kind = _pairs(seed)
    dn, gn, Hn, cn = kernels.pair_distance_numba(x, kind)
    dp, gp, Hp, cp = kernels.pair_distance_numpy(x, kind)
    assert np.array_equal(cn, cp)
    assert np.allclose(dn, dp, rtol=1e-12, atol=1e-14)
    assert np.allclose(gn, gp, rtol=1e-9, atol=1e-10)
    assert np.allclose(Hn, Hp, rtol=1e-7, atol=1e-7 * np.abs(Hp).max())


@needs_numba
@given(st.integers(0, 2**31), st.booleans())
def test_barrier_paths_agree(seed, project):
    x, kind = _pairs(seed)
    dhat = float(np.median(kernels.pair_distance_numpy(x, kind)[0]))
    bn, gn, Hn, *_ = kernels.pair_barrier_numba(x, kind, dhat, 3.0, project)
    bp, gp, Hp, *_ = kernels.pair_barrier_numpy(x, kind, dhat, 3.0, project)
    scale = max(np.abs(Hp).max(), 1e-300)
    assert np.allclose(bn, bp, rtol=1e-10, atol=1e-14)
    assert np.allclose(gn, gp, rtol=1e-8, atol=1e-9 * max(np.abs(gp).max(), 1e-300))
    assert np.allclose(Hn, Hp, atol=1e-7 * scale)


@needs_numba
@given(st.integers(0, 2**31))
def test_time_of_impact_paths_agree(seed):
    r = np.random.default_rng(seed)
    x0 = r.normal(size=(32, 4, 3))
    x1 = x0 + 2.0 * r.normal(size=(32, 4, 3))
    kind = r.integers(0, 2, 32)
    tn = kernels.pair_toi_numba(x0, x1, kind)
    tp = kernels.pair_toi_numpy(x0, x1, kind)
    assert np.array_equal(np.isfinite(tn), np.isfinite(tp))
    f = np.isfinite(tp)
    assert np.allclose(tn[f], tp[f], atol=1e-9)


def test_time_of_impact_is_a_touch():
    r = np.random.default_rng(3)
    x0 = r.normal(size=(200, 4, 3))
    x1 = x0 + 3.0 * r.normal(size=(200, 4, 3))
    kind = r.integers(0, 2, 200)
    t = kernels.pair_toi(x0, x1, kind)
    hit = np.isfinite(t)
    assert hit.any() and np.all((t[hit] >= 0) & (t[hit] <= 1))
    xt = x0[hit] + t[hit, None, None] * (x1[hit] - x0[hit])
    from physface.kernels.contact import classify_numpy

    _, D = classify_numpy(xt, kind[hit])
    L = np.ptp(np.concatenate([x0[hit], x1[hit]], axis=1), axis=1).max(axis=1)
    assert np.all(np.sqrt(D) <= 1e-6 * L)
    # no earlier contact: dense sampling of the path before the impact stays apart
    for a in np.linspace(0, 0.999, 50):
        xs = x0[hit] + (a * t[hit])[:, None, None] * (x1[hit] - x0[hit])
        _, Ds = classify_numpy(xs, kind[hit])
        assert np.all(np.sqrt(Ds) > 0)


def test_dispatch_follows_flag():
    assert kernels.project_rotations is (kernels.project_rotations_numba if kernels.USE_NUMBA else kernels.project_rotations_numpy)


def test_numpy_fallback_selected_by_environment():
    env = dict(os.environ, PHYSFACE_NUMBA="0")
    code = (
        "from physface import kernels, pd, scenes;"
        "assert not kernels.USE_NUMBA;"
        "assert kernels.pair_distance is kernels.pair_distance_numpy;"
        "sc = scenes.beam_scene();"
        "st = pd.solve_quasistatic(sc.mesh.vertices, sc.blocks, tol=1e-8, max_iters=5000);"
        "assert st.converged"
    )
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.returncode == 0, out.stderr


def test_rotations_from_random_matrices_are_proper():
    r = np.random.default_rng(0)
    R = kernels.project_rotations(r.normal(size=(50, 3, 3)), np.broadcast_to(np.eye(3), (50, 3, 3)))
    assert np.allclose(R @ R.transpose(0, 2, 1), np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(R), 1.0)
    Q = random_rotations(r, 5)
    assert np.allclose(kernels.project_rotations(Q, np.broadcast_to(np.eye(3), (5, 3, 3))), Q, atol=1e-12)


def test_vt_and_ee_codes_present():
    x, kind = _pairs(0, 400)
    _, _, _, codes = kernels.pair_distance(x, kind)
    assert len(np.unique(codes[kind == VT])) > 3 and len(np.unique(codes[kind == EE])) > 3
