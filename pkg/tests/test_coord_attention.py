import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdd import coord_attention as ca
from rdd import numeric
from rdd.numeric import ShapeError

from oracles import ca_loop_forward as loop_forward


def random_params(rng, c, r, kind="hard_swish"):
    p = ca.init_params(c, r, seed=int(rng.integers(1 << 30)), delta_kind=kind)
    return p.from_vector(p.to_vector() + rng.normal(scale=0.3, size=p.size))


def test_init_shapes_and_clamp():
    p = ca.init_params(8, 2, seed=7)
    assert p.c_mid == 4 and p.w_f1.shape == (4, 8) and p.w_fh.shape == (8, 4)
    assert ca.init_params(4, 32, seed=1).c_mid == 1
    assert not np.any(p.b_f1) and not np.any(p.b_fh) and not np.any(p.b_fw)
    k = math.sqrt(1 / 8)
    assert np.all(np.abs(p.w_f1) <= k)


def test_init_deterministic():
    a, b = ca.init_params(16, 4, seed=3), ca.init_params(16, 4, seed=3)
    assert a == b
    assert a.to_vector().tobytes() == b.to_vector().tobytes()
    assert ca.init_params(16, 4, seed=4) != a


def test_default_reduction():
    assert ca.init_params(64).c_mid == 2


def test_forward_shapes():
    out = ca.forward(np.random.default_rng(0).normal(size=(8, 4, 6)), ca.init_params(8, 2, seed=0))
    assert out.f.shape == (4, 10)
    assert out.g_h.shape == (8, 4) and out.g_w.shape == (8, 6) and out.y.shape == (8, 4, 6)


def test_forward_zero_input():
    out = ca.forward(np.zeros((8, 4, 6)), ca.init_params(8, 2, seed=0))
    assert np.all(out.f == 0)
    assert np.all(out.g_h == 0.5) and np.all(out.g_w == 0.5)
    assert np.all(out.y == 0)
    g_h, g_w = ca.attention_maps(out)
    assert np.all(g_h == 0.5) and np.all(g_w == 0.5)


@pytest.mark.parametrize("kind", ["hard_swish", "sigmoid"])
def test_forward_matches_loop_oracle(kind):
    rng = np.random.default_rng(11)
    x = rng.normal(size=(3, 5, 7))
    p = random_params(rng, 3, 1, kind)
    out = ca.forward(x, p)
    y, gh, gw, f = loop_forward(x, p)
    np.testing.assert_allclose(out.y, y, atol=1e-10, rtol=0)
    np.testing.assert_allclose(out.g_h, gh, atol=1e-10, rtol=0)
    np.testing.assert_allclose(out.g_w, gw, atol=1e-10, rtol=0)
    np.testing.assert_allclose(out.f, f, atol=1e-10, rtol=0)


def test_channel_mismatch():
    with pytest.raises(ShapeError):
        ca.forward(np.zeros((3, 2, 2)), ca.init_params(4, 2))
    with pytest.raises(ShapeError):
        ca.backward(np.zeros((4, 2, 2)), ca.init_params(4, 2), np.zeros((4, 2, 3)))


def test_maps_recompose_output():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 4, 3))
    out = ca.forward(x, random_params(rng, 5, 2))
    g_h, g_w = ca.attention_maps(out)
    np.testing.assert_allclose(x * g_h[:, :, None] * g_w[:, None, :], out.y, atol=1e-12, rtol=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(1, 8), st.integers(0, 1000))
def test_shape_preserved_and_contracting(c, h, w, r, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(c, h, w))
    out = ca.forward(x, random_params(rng, c, r))
    assert out.y.shape == x.shape
    assert np.all((out.g_h > 0) & (out.g_h < 1)) and np.all((out.g_w > 0) & (out.g_w < 1))
    assert np.all(np.abs(out.y) <= np.abs(x))


def test_width_height_decoupling():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(4, 5, 6))
    p = random_params(rng, 4, 2)
    base = ca.forward(x, p)
    perm = rng.permutation(6)
    col = ca.forward(x[:, :, perm], p)
    np.testing.assert_allclose(col.g_w, base.g_w[:, perm], atol=1e-12)
    np.testing.assert_allclose(col.g_h, base.g_h, atol=1e-12)
    perm = rng.permutation(5)
    row = ca.forward(x[:, perm, :], p)
    np.testing.assert_allclose(row.g_h, base.g_h[:, perm], atol=1e-12)
    np.testing.assert_allclose(row.g_w, base.g_w, atol=1e-12)


def test_backward_zero_upstream():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3, 3))
    gx, gp = ca.backward(x, random_params(rng, 4, 2), np.zeros_like(x))
    assert not gx.any() and not gp.to_vector().any()


def test_backward_scalar_closed_form():
    # C=H=W=1: y = x * s(wh*d(w1*x+b1)+bh) * s(ww*d(w1*x+b1)+bw)
    w1, b1, wh, bh, ww, bw, x = 0.7, 0.2, -1.3, 0.1, 0.9, -0.4, 0.8
    p = ca.CAParams(1, 1, [[w1]], [b1], [[wh]], [bh], [[ww]], [bw], "hard_swish")
    a = w1 * x + b1
    d = a * (a + 3) / 6
    dd = (2 * a + 3) / 6
    sig = lambda t: 1 / (1 + math.exp(-t))
    gh, gw = sig(wh * d + bh), sig(ww * d + bw)
    dgh = gh * (1 - gh) * wh * dd * w1
    dgw = gw * (1 - gw) * ww * dd * w1
    # through the two pooled copies of x, each with weight 1 (mean over size-1 axes)
    expected = gh * gw + x * (dgh * gw + gh * dgw)
    gx, _ = ca.backward(np.array([[[x]]]), p, np.ones((1, 1, 1)))
    assert abs(gx[0, 0, 0] - expected) < 1e-10


def test_backward_grad_check_random_instance():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, 3, 3))
    p = random_params(rng, 4, 2)
    up = rng.normal(size=x.shape)
    rep_x = numeric.grad_check(
        lambda v: float(np.sum(up * ca.forward(v.reshape(x.shape), p).y)),
        lambda v: ca.backward(v.reshape(x.shape), p, up)[0].ravel(), x.ravel(), tol=1e-4)
    rep_p = numeric.grad_check(
        lambda v: float(np.sum(up * ca.forward(x, p.from_vector(v)).y)),
        lambda v: ca.backward(x, p.from_vector(v), up)[1].to_vector(), p.to_vector(), tol=1e-4)
    assert rep_x.passed and rep_p.passed


@pytest.mark.parametrize("seed", range(5))
def test_sum_of_squares_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    c, h, w = rng.integers(1, 6, size=3)
    x = rng.normal(size=(c, h, w))
    p = random_params(rng, int(c), int(rng.integers(1, 4)), kind=("hard_swish", "sigmoid")[seed % 2])

    def grads(xx, pp):
        return ca.backward(xx, pp, 2 * ca.forward(xx, pp).y)

    assert numeric.grad_check(lambda v: float(np.sum(ca.forward(v.reshape(x.shape), p).y ** 2)),
                              lambda v: grads(v.reshape(x.shape), p)[0].ravel(), x.ravel()).passed
    assert numeric.grad_check(lambda v: float(np.sum(ca.forward(x, p.from_vector(v)).y ** 2)),
                              lambda v: grads(x, p.from_vector(v))[1].to_vector(), p.to_vector()).passed


def test_params_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    p = random_params(rng, 6, 2, "sigmoid")
    path = tmp_path / "ca.bin"
    ca.save_params(p, path)
    raw = path.read_bytes()
    assert raw[:4] == b"CAPM"
    assert len(raw) == 20 + 8 * p.size
    assert ca.load_params(path) == p


def test_params_bad_file(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"XXXX" + bytes(16))
    with pytest.raises(ValueError):
        ca.load_params(path)


def test_params_are_immutable():
    p = ca.init_params(4, 2)
    with pytest.raises(ValueError):
        p.w_f1[0, 0] = 1.0


def test_self_check():
    res = ca.self_check(seed=1)
    assert res["pass"] and res["max_rel_err"] < 1e-4
