import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import adam_reference, conv2d_loop
from sda import gradcore as gc
from sda.gradcore import AdamState, Tensor, adam_step, backward, finite_diff_check


def grad(f, x):
    leaf = Tensor(np.asarray(x, dtype=float), requires_grad=True)
    return backward(f(leaf), [leaf])[leaf]


# ---------------------------------------------------------------- backward

def test_square_sum_gradient():
    np.testing.assert_array_equal(grad(lambda x: gc.sum(x * x), [1.0, 2.0]), [2.0, 4.0])


def test_mean_gradient():
    np.testing.assert_array_equal(grad(gc.mean, np.arange(4.0)), [0.25] * 4)


def test_relu_dead_zone():
    g = grad(lambda x: gc.sum(gc.relu(x)), [-3.0, 2.0])
    np.testing.assert_array_equal(g, [0.0, 1.0])


def test_relu_and_leaky_subgradient_at_zero_is_zero():
    assert grad(lambda x: gc.sum(gc.relu(x)), [0.0])[0] == 0.0
    assert grad(lambda x: gc.sum(gc.leaky_relu(x)), [0.0])[0] == 0.0
    np.testing.assert_allclose(grad(lambda x: gc.sum(gc.leaky_relu(x)), [-1.0, 1.0]), [0.2, 1.0])


def test_paths_accumulate():
    # x*x + 3x reaches x along three edges
    g = grad(lambda x: gc.sum(x * x + x * 3.0), [1.5, -2.0])
    np.testing.assert_allclose(g, [6.0, -1.0])


def test_non_scalar_root_rejected():
    with pytest.raises(ValueError, match="scalar"):
        backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_disconnected_parameter_gets_zero():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    g = backward(gc.sum(a * a), [a, b])
    np.testing.assert_array_equal(g[b], np.zeros((2, 2)))


def test_backward_bit_deterministic(rng):
    w = rng.standard_normal((3, 4))
    x = rng.standard_normal((5, 3))

    def run():
        leaf = Tensor(w, requires_grad=True)
        loss = gc.mean(gc.tanh(Tensor(x) @ leaf) * gc.relu(Tensor(x) @ leaf))
        return backward(loss, [leaf])[leaf]

    assert run().tobytes() == run().tobytes()


def test_debug_checks_flag_non_finite():
    with gc.debug_checks(), np.errstate(invalid="ignore"):
        with pytest.raises(FloatingPointError):
            gc.log(Tensor([-1.0]))
    with np.errstate(invalid="ignore"):
        assert np.isnan(gc.log(Tensor([-1.0])).data[0])


# ---------------------------------------------------------------- conv2d

@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(2, 6), st.integers(2, 6),
       st.sampled_from([1, 2]), st.integers(0, 2**31 - 1))
def test_conv2d_matches_loop_oracle(b, cin, cout, h, w, stride, seed):
    r = np.random.default_rng(seed)
    x, k, bias = r.standard_normal((b, cin, h, w)), r.standard_normal((cout, cin, 3, 3)), r.standard_normal(cout)
    out = gc.conv2d(Tensor(x), Tensor(k), Tensor(bias), stride=stride).data
    assert out.shape == (b, cout, math.ceil(h / stride), math.ceil(w / stride))
    np.testing.assert_allclose(out, conv2d_loop(x, k, bias, stride), atol=1e-12)


def test_conv2d_rejects_bad_stride_and_shape():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ValueError):
        gc.conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), stride=3)
    with pytest.raises(ValueError):
        gc.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))))


def test_upsample_is_nearest():
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    out = gc.upsample2x(Tensor(x)).data
    np.testing.assert_array_equal(out[0, 0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])


def test_l2_normalize_rows_unit_norm(rng):
    out = gc.l2_normalize_rows(Tensor(rng.standard_normal((6, 5)) * 40)).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)


# ---------------------------------------------------------------- primitive gradient sweep

def _away_from_zero(r, shape, margin=1e-4):
    x = r.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * (margin + 0.1), x)


PRIMITIVES = {
    "add": lambda x, c: x + Tensor(c),
    "add_broadcast": lambda x, c: x + Tensor(c[:1]),
    "sub": lambda x, c: Tensor(c) - x,
    "mul": lambda x, c: x * Tensor(c),
    "scalar_mul": lambda x, c: x * 2.5,
    "div": lambda x, c: Tensor(c) / (gc.square(x) + 1.0),
    "matmul": lambda x, c: x @ Tensor(c.T),
    "relu": lambda x, c: gc.relu(x),
    "leaky_relu": lambda x, c: gc.leaky_relu(x),
    "tanh": lambda x, c: gc.tanh(x),
    "exp": lambda x, c: gc.exp(x),
    "log": lambda x, c: gc.log(gc.square(x) + 0.5),
    "sqrt": lambda x, c: gc.sqrt(gc.square(x) + 0.5),
    "abs": lambda x, c: gc.abs(x),
    "square": lambda x, c: gc.square(x),
    "sum_axis": lambda x, c: gc.sum(x, axis=1, keepdims=True),
    "mean_axis": lambda x, c: gc.mean(x, axis=0),
    "concat": lambda x, c: gc.concat([x, x * 2.0], axis=1),
    "slice": lambda x, c: x[1:3],
    "gather": lambda x, c: x[np.array([0, 2, 2])],
    "transpose": lambda x, c: x.T,
    "reshape": lambda x, c: gc.reshape(x, (-1,)),
    "l2_normalize_rows": lambda x, c: gc.l2_normalize_rows(x),
    "log_softmax": lambda x, c: gc.log_softmax(x),
    "atanh": lambda x, c: gc.atanh(gc.tanh(x)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_100_seeds(name):
    prim = PRIMITIVES[name]
    worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        x = _away_from_zero(r, (4, 3))
        c = r.standard_normal((4, 3))
        weights = r.standard_normal(prim(Tensor(x), c).shape)
        worst = max(worst, finite_diff_check(lambda t: gc.sum(prim(t, c) * Tensor(weights)), x, h=1e-6))
    assert worst <= 1e-5


@pytest.mark.parametrize("stride", [1, 2])
def test_image_primitive_gradients(stride):
    worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        x = r.standard_normal((2, 2, 4, 3))
        k = r.standard_normal((3, 2, 3, 3))
        out_shape = gc.conv2d(Tensor(x), Tensor(k), stride=stride).shape
        wts = r.standard_normal(out_shape)
        up_w = r.standard_normal((2, 2, 8, 6))
        worst = max(worst,
                    finite_diff_check(lambda t: gc.sum(gc.conv2d(t, Tensor(k), stride=stride) * Tensor(wts)),
                                      x, coords=r.choice(x.size, 6, replace=False)),
                    finite_diff_check(lambda t: gc.sum(gc.conv2d(Tensor(x), t, stride=stride) * Tensor(wts)),
                                      k, coords=r.choice(k.size, 6, replace=False)),
                    finite_diff_check(lambda t: gc.sum(gc.upsample2x(t) * Tensor(up_w)), x,
                                      coords=r.choice(x.size, 4, replace=False)),
                    finite_diff_check(lambda t: gc.sum(gc.global_avg_pool(t) * Tensor(wts[:, :2, 0, 0])), x,
                                      coords=r.choice(x.size, 4, replace=False)))
    assert worst <= 1e-5


# ---------------------------------------------------------------- finite differences

def test_finite_diff_sum_of_squares():
    x = np.random.default_rng(3).standard_normal(10)
    assert finite_diff_check(lambda t: gc.sum(gc.square(t)), x, h=1e-6) <= 1e-7


def test_finite_diff_linear_is_exact():
    x = np.random.default_rng(4).standard_normal(6)
    c = Tensor(np.random.default_rng(5).standard_normal(6))
    assert finite_diff_check(lambda t: gc.sum(t * c), x) <= 1e-8


def test_finite_diff_flags_wrong_gradient():
    def bad(t):  # forward is x^2, backward claims 3x
        return gc.sum(gc._make(t.data ** 2, "bad", (t,), lambda g: (3 * g * t.data,)))

    assert finite_diff_check(bad, np.array([1.0, 2.0])) > 0.1


def test_finite_diff_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        with np.errstate(all="ignore"):
            finite_diff_check(lambda t: gc.sum(gc.log(t)), np.array([-1.0, 1.0]))


# ---------------------------------------------------------------- ADAM

def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    new, st_ = adam_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p), 0.1)
    np.testing.assert_array_equal(new["w"], p["w"])
    assert st_.step == 1


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([0.5])}
    new, _ = adam_step(p, {"w": np.array([1.0])}, AdamState.zeros_like(p), 0.001)
    assert new["w"][0] == pytest.approx(0.5 - 0.001 / (1 + 1e-8), abs=1e-12)


def test_adam_matches_scalar_reference_over_steps(rng):
    p = {"w": rng.standard_normal(5)}
    state = AdamState.zeros_like(p)
    ref = [(float(v), 0.0, 0.0) for v in p["w"]]
    for t in range(1, 8):
        g = rng.standard_normal(5)
        p, state = adam_step(p, {"w": g}, state, 0.01)
        ref = [adam_reference(th, gi, m, v, t, 0.01) for (th, m, v), gi in zip(ref, g)]
        np.testing.assert_allclose(p["w"], [r[0] for r in ref], rtol=0, atol=1e-14)
    assert state.step == 7


def test_adam_does_not_mutate_and_is_deterministic(rng):
    p = {"w": rng.standard_normal(3)}
    g = {"w": rng.standard_normal(3)}
    s = AdamState.zeros_like(p)
    before = p["w"].copy()
    a = adam_step(p, g, s, 0.01)
    b = adam_step(p, g, s, 0.01)
    np.testing.assert_array_equal(p["w"], before)
    assert s.step == 0
    assert a[0]["w"].tobytes() == b[0]["w"].tobytes()


def test_adam_shape_mismatch():
    p = {"w": np.zeros(3)}
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p), 0.1)
    with pytest.raises(ValueError):
        adam_step(p, {"v": np.zeros(3)}, AdamState.zeros_like(p), 0.1)


def test_flatten_params_roundtrip(rng):
    params = {"b": rng.standard_normal(3), "a": rng.standard_normal((2, 2))}
    vec, unpack = gc.flatten_params(params)
    out = unpack(Tensor(vec))
    for k in params:
        np.testing.assert_array_equal(out[k].data, params[k])
