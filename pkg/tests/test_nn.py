import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from omniscale import nn
from omniscale.nn import AdamW, ParamStore, Tensor, grad_check, init_conv, init_linear, no_grad


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# ---------------------------------------------------------------- linear
def test_linear_identity_and_hand_case():
    x = np.array([[1.0, 2.0]])
    assert np.array_equal(nn.linear(x, np.eye(2), np.zeros(2)).data, x)
    assert nn.linear(np.array([1.0, 2.0]), 2 * np.eye(2), np.ones(2)).data.tolist() == [3.0, 5.0]


def test_linear_matches_triple_loop():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
        want = oracles.matmul(x, w) + b
        assert np.max(np.abs(nn.linear(x, w, b).data - want)) < 1e-10


def test_linear_shape_mismatch():
    with pytest.raises(ValueError):
        nn.linear(np.ones((2, 3)), np.ones((4, 2)))


# ----------------------------------------------------------------- conv2d
def test_conv_identity_kernel():
    x = np.random.default_rng(1).normal(size=(2, 5, 5))
    w = np.zeros((2, 2, 1, 1))
    w[0, 0] = w[1, 1] = 1.0
    assert np.array_equal(nn.conv2d(x, w, np.zeros(2)).data, x)


def test_conv_all_ones_interior():
    x = np.full((1, 5, 5), 0.7)
    y = nn.conv2d(x, np.ones((1, 1, 3, 3)), np.array([0.25]), pad=1).data
    assert math.isclose(y[0, 2, 2], 9 * 0.7 + 0.25, rel_tol=1e-12)


def test_conv_matches_six_loop_oracle():
    rng = np.random.default_rng(2)
    cases = 0
    for stride, pad, k in [(1, 1, 3), (1, 0, 3), (2, 1, 3), (1, 2, 5), (1, 0, 1), (3, 1, 3)]:
        for _ in range(4):
            h = int(rng.integers(5, 9))
            if (h + 2 * pad - k) % stride:
                h += stride - (h + 2 * pad - k) % stride
            x = rng.normal(size=(2, h, h))
            w = rng.normal(size=(3, 2, k, k))
            b = rng.normal(size=3)
            want = oracles.conv2d(x, w, b, stride, pad)
            got = nn.conv2d(x, w, b, stride=stride, pad=pad).data
            assert np.max(np.abs(got - want)) < 1e-10
            cases += 1
    assert cases >= 20


def test_conv_spec_case():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    assert np.max(np.abs(nn.conv2d(x, w, b, pad=1).data - oracles.conv2d(x, w, b, 1, 1))) < 1e-10


def test_conv_errors():
    with pytest.raises(ValueError):
        nn.conv2d(np.ones((1, 4, 4)), np.ones((1, 1, 3, 3)), stride=2, pad=1)  # 3.5 outputs
    with pytest.raises(ValueError):
        nn.conv2d(np.ones((1, 4, 4)), np.ones((1, 1, 2, 2)))
    with pytest.raises(ValueError):
        nn.conv2d(np.ones((2, 4, 4)), np.ones((1, 3, 3, 3)), pad=1)


# ------------------------------------------------------------------- silu
def test_silu_values():
    assert nn.silu(np.array(0.0)).data == 0.0
    assert abs(nn.silu(np.array(20.0)).data - 20.0) < 1e-6
    assert math.isclose(float(nn.silu(np.array(1.0)).data), 1.0 / (1.0 + math.exp(-1.0)), rel_tol=1e-15)


# -------------------------------------------------------------- group_norm
def test_group_norm_constant_gives_zero():
    y = nn.group_norm(np.full((4, 3, 3), 2.5), 2, np.ones(4), np.zeros(4)).data
    assert np.all(y == 0.0)


def test_group_norm_hand_case():
    y = nn.group_norm(np.array([[[1.0, 3.0]]]), 1, np.ones(1), np.zeros(1), eps=0.0).data
    assert y.reshape(-1).tolist() == [-1.0, 1.0]


def test_group_norm_affine_dominates():
    x = np.random.default_rng(4).normal(size=(4, 3, 3))
    b = np.array([0.1, -0.2, 0.3, 0.4])
    y = nn.group_norm(x, 2, np.zeros(4), b).data
    np.testing.assert_array_equal(y, np.broadcast_to(b[:, None, None], y.shape))


def test_group_norm_matches_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        groups = int(rng.choice([1, 2, 4]))
        c = groups * int(rng.integers(1, 4))
        x = rng.normal(size=(c, 3, 4)) * rng.uniform(0.1, 5) + rng.normal()
        gamma, beta = rng.normal(size=c), rng.normal(size=c)
        want = oracles.group_norm(x, groups, gamma, beta, 1e-5)
        got = nn.group_norm(x, groups, gamma, beta).data
        assert np.max(np.abs(got - want)) < 1e-10


def test_group_norm_indivisible():
    with pytest.raises(ValueError):
        nn.group_norm(np.ones((3, 2, 2)), 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(2, 5), st.integers(0, 2**16))
def test_group_norm_standardizes(groups, per, side, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(groups * per, side, side)) * 3 + 1
    y = nn.group_norm(x, groups).data.reshape(groups, -1)
    assert np.all(np.abs(y.mean(axis=1)) < 1e-6)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-4)


# ------------------------------------------------------------------ attention
def test_attention_single_key():
    rng = np.random.default_rng(6)
    v = rng.normal(size=(1, 3))
    out = nn.attention(rng.normal(size=(4, 2)), rng.normal(size=(1, 2)), v).data
    np.testing.assert_allclose(out, np.repeat(v, 4, axis=0), atol=1e-15)


def test_attention_zero_query_averages_values():
    rng = np.random.default_rng(7)
    v = rng.normal(size=(5, 3))
    out = nn.attention(np.zeros((2, 4)), rng.normal(size=(5, 4)), v).data
    np.testing.assert_allclose(out, np.repeat(v.mean(axis=0, keepdims=True), 2, axis=0), atol=1e-12)


def test_attention_matches_oracle():
    rng = np.random.default_rng(8)
    for _ in range(20):
        n, m, d, dv = rng.integers(1, 6, 4)
        q, k, v = rng.normal(size=(n, d)), rng.normal(size=(m, d)), rng.normal(size=(m, dv))
        assert np.max(np.abs(nn.attention(q, k, v).data - oracles.attention(q, k, v))) < 1e-10
    q, k, v = rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 5))
    assert np.max(np.abs(nn.attention(q, k, v).data - oracles.attention(q, k, v))) < 1e-10


def test_attention_shape_mismatch():
    with pytest.raises(ValueError):
        nn.attention(np.ones((2, 3)), np.ones((4, 2)), np.ones((4, 1)))
    with pytest.raises(ValueError):
        nn.attention(np.ones((2, 3)), np.ones((4, 3)), np.ones((5, 1)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**16))
def test_attention_is_convex_combination(n, m, d, seed):
    rng = np.random.default_rng(seed)
    q, k, v = rng.normal(size=(n, d)) * 3, rng.normal(size=(m, d)), rng.normal(size=(m, 3))
    out = nn.attention(q, k, v).data
    assert np.all(out >= v.min(axis=0) - 1e-12) and np.all(out <= v.max(axis=0) + 1e-12)
    np.testing.assert_allclose(nn.attention_weights(q, k).sum(axis=-1), 1.0, atol=1e-12)


# ----------------------------------------------------------- sinusoidal PE
def test_sinusoidal_zero_phase():
    pe = nn.sinusoidal_encode(0.0, 64)
    assert np.all(pe[:32] == 0.0) and np.all(pe[32:] == 1.0)


def test_sinusoidal_dim4_fractional_scale():
    s = 5.3125
    want = [math.sin(s), math.sin(s * 0.01), math.cos(s), math.cos(s * 0.01)]
    np.testing.assert_allclose(nn.sinusoidal_encode(s, 4), want, rtol=0, atol=1e-15)


def test_sinusoidal_odd_dim():
    with pytest.raises(ValueError):
        nn.sinusoidal_encode(1.0, 5)


def test_sinusoidal_injective_on_grid():
    s = np.round(np.arange(1.0, 32.0 + 1e-9, 1e-3), 6)
    pe = nn.sinusoidal_encode(s, 64)
    # neighbours on the grid are the closest candidates; distant scales differ in the low frequencies
    gaps = np.linalg.norm(np.diff(pe, axis=0), axis=1)
    assert gaps.min() > 1e-9
    assert np.all(np.abs(np.diff(pe[:, 31])) > 0) or np.all(np.diff(s) > 0)
    lowest = pe[:, 32 - 1]  # sin(s * w_31) is monotone over [1, 32]
    assert np.all(np.diff(lowest) > 0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e4, 1e4, allow_nan=False), st.integers(1, 64))
def test_sinusoidal_bounded(s, half):
    pe = nn.sinusoidal_encode(s, 2 * half)
    assert np.all(np.abs(pe) <= 1.0)


# ------------------------------------------------------------ grad checks
def _rng_t(rng, *shape, scale=1.0):
    return t64(rng.normal(size=shape) * scale)


GRAD_CASES = {
    "linear": lambda r: (lambda x, w, b: nn.linear(x, w, b), [_rng_t(r, 3, 4), _rng_t(r, 4, 2), _rng_t(r, 2)]),
    "conv2d": lambda r: (lambda x, w, b: nn.conv2d(x, w, b, pad=1), [_rng_t(r, 2, 2, 5, 5), _rng_t(r, 3, 2, 3, 3), _rng_t(r, 3)]),
    "conv2d_stride": lambda r: (lambda x, w: nn.conv2d(x, w, stride=2, pad=1), [_rng_t(r, 2, 5, 5), _rng_t(r, 2, 2, 3, 3)]),
    "conv1x1": lambda r: (lambda x, w, b: nn.conv2d(x, w, b), [_rng_t(r, 1, 3, 4, 4), _rng_t(r, 2, 3, 1, 1), _rng_t(r, 2)]),
    "silu": lambda r: (nn.silu, [_rng_t(r, 4, 5, scale=3)]),
    "group_norm": lambda r: (lambda x, g, b: nn.group_norm(x, 2, g, b), [_rng_t(r, 2, 4, 3, 3), _rng_t(r, 4), _rng_t(r, 4)]),
    "attention": lambda r: (nn.attention, [_rng_t(r, 2, 3, 4), _rng_t(r, 2, 5, 4), _rng_t(r, 2, 5, 3)]),
    "embedding": lambda r: (lambda tab: nn.embedding(tab, np.array([[0, 2], [2, 1]])), [_rng_t(r, 3, 4)]),
    "upsample_nearest": lambda r: (lambda x: nn.upsample_nearest(x, 2), [_rng_t(r, 1, 2, 3, 3)]),
    "space_to_depth": lambda r: (lambda x: nn.space_to_depth(x, 2) * 1.5, [_rng_t(r, 1, 2, 4, 4)]),
    "depth_to_space": lambda r: (lambda x: nn.depth_to_space(x, 2) * 1.5, [_rng_t(r, 1, 8, 2, 3)]),
    "avg_pool": lambda r: (lambda x: nn.avg_pool(x, 2), [_rng_t(r, 1, 2, 4, 4)]),
    "mse": lambda r: (nn.mse, [_rng_t(r, 3, 4), _rng_t(r, 3, 4)]),
    "l1": lambda r: (nn.l1, [_rng_t(r, 3, 4), _rng_t(r, 3, 4)]),
    "matmul_broadcast": lambda r: (lambda a, b: a @ b, [_rng_t(r, 2, 3, 4), _rng_t(r, 4, 2)]),
    "mul_add_broadcast": lambda r: (lambda a, b: a * b + b, [_rng_t(r, 2, 3), _rng_t(r, 3)]),
    "concat_transpose": lambda r: (lambda a, b: nn.concat([a, b], axis=1).transpose(1, 0).reshape(-1), [_rng_t(r, 2, 3), _rng_t(r, 2, 2)]),
    "sum_mean": lambda r: (lambda a: a.sum(axis=1) * a.mean(), [_rng_t(r, 3, 4)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_grad_check_primitives(name):
    fn, inputs = GRAD_CASES[name](np.random.default_rng(abs(hash(name)) % 2**32))
    report = grad_check(fn, inputs, tol=1e-4)
    assert report.passed, str(report)
    assert report.n_checked >= min(32, sum(t.size for t in inputs))


def test_grad_check_identity_is_exact():
    report = grad_check(lambda x: x * 1.0, [np.random.default_rng(9).normal(size=(6, 6))])
    assert report.max_rel_err < 1e-8


def test_grad_check_detects_wrong_gradient():
    def bad(x):
        from omniscale.nn.tensor import make_node

        return make_node(x.data**2, (x,), lambda g: (g * x.data,))  # missing factor 2

    assert not grad_check(bad, [np.random.default_rng(10).normal(size=(5,)) + 3]).passed


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 6), st.integers(0, 2**16))
def test_conv_gradients_random_shapes(cin, cout, side, seed):
    rng = np.random.default_rng(seed)
    report = grad_check(lambda x, w: nn.conv2d(x, w, pad=1),
                        [rng.normal(size=(cin, side, side)), rng.normal(size=(cout, cin, 3, 3))], seed=seed)
    assert report.passed, str(report)


# ------------------------------------------------------------ tensor basics
def test_space_depth_round_trip():
    x = np.random.default_rng(11).normal(size=(2, 3, 4, 6))
    assert np.array_equal(nn.depth_to_space(nn.space_to_depth(x, 2), 2).data, x)


def test_no_grad_records_nothing():
    w = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = w * 2.0
    assert not y.requires_grad and y._parents == ()


def test_forward_is_pure():
    rng = np.random.default_rng(12)
    x, w = rng.normal(size=(1, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3))
    a = nn.group_norm(nn.conv2d(x, w, pad=1), 3).data
    b = nn.group_norm(nn.conv2d(x, w, pad=1), 3).data
    assert np.array_equal(a, b)


def test_float32_graph_stays_float32():
    x = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
    assert (x + 1.0).dtype == np.float32
    assert (x * 0.5 - 2).dtype == np.float32


# ----------------------------------------------------------- params, optim
def test_param_store_contract():
    p = ParamStore()
    rng = np.random.default_rng(0)
    init_linear(p, rng, "a", 3, 2)
    init_conv(p, rng, "b", 2, 4, zero=True, trainable=False)
    assert p.names("a") == ["a.w", "a.b"]
    assert not p.is_trainable("b.w") and np.all(p["b.w"].data == 0)
    assert p.num_params() == 3 * 2 + 2 + 4 * 2 * 9 + 4
    with pytest.raises(KeyError):
        p.add("a.w", np.zeros(1))
    with pytest.raises(KeyError, match="missing parameter"):
        p["nope"]


def test_adamw_zero_gradient_leaves_weights_unchanged():
    p = ParamStore()
    init_linear(p, np.random.default_rng(1), "l", 4, 3)
    before = {k: v.copy() for k, v in p.arrays().items()}
    opt = AdamW(p, lr=1e-2)
    for _, t in p.trainable():
        t.grad = np.zeros_like(t.data)
    opt.step()
    for k, v in p.arrays().items():
        assert np.array_equal(v, before[k])
        assert p[k].grad is None


def test_adamw_first_step_moves_by_lr():
    p = ParamStore(np.float64)
    p.add("x", np.array([1.0, -2.0]))
    p["x"].grad = np.array([0.5, -3.0])
    AdamW(p, lr=0.1).step()
    np.testing.assert_allclose(p["x"].data, [0.9, -1.9], atol=1e-7)


def test_adamw_minimizes_quadratic():
    p = ParamStore(np.float64)
    p.add("x", np.array([3.0, -4.0]))
    opt = AdamW(p, lr=0.1)
    for _ in range(300):
        loss = (p["x"] * p["x"]).sum()
        loss.backward()
        opt.step()
    assert np.all(np.abs(p["x"].data) < 0.05)


def test_adamw_skips_frozen():
    p = ParamStore()
    p.add("frozen", np.ones(2), trainable=False)
    p.add("live", np.ones(2))
    (p["frozen"] * p["live"]).sum().backward()
    AdamW(p, lr=0.5).step()
    assert np.array_equal(p["frozen"].data, np.ones(2))
    assert not np.array_equal(p["live"].data, np.ones(2))
