import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fdcheck import check_fn
from lspst import t32
from lspst.tensor import (
    Tensor, activation, add, backward, channel_pool, concat_channels, conv2d,
    ewise, group_norm, maxpool2d, mul, no_grad, reduce_mean, reduce_sum, scale,
    split_channels, upsample_nearest,
)

SEEDS = range(5)


def T(a, grad=False):
    return Tensor(np.asarray(a, np.float32), requires_grad=grad)


def projected(y, seed=123):
    r = np.random.default_rng(seed).standard_normal(y.shape)
    return reduce_sum(y * Tensor(r.astype(y.dtype)))


# ---------------------------------------------------------------- conv2d

def test_conv_identity_kernel():
    x = np.ones((1, 1, 3, 3))
    y = conv2d(T(x), T(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(y.data, x)


def test_conv_hand_sum():
    x = T(np.arange(1, 6).reshape(1, 1, 1, 5))
    y = conv2d(x, T(np.ones((1, 1, 1, 3))), pad=(0, 1))
    np.testing.assert_array_equal(y.data.ravel(), [3, 6, 9, 12, 9])


def test_conv_output_size_formula():
    x = T(np.zeros((1, 2, 11, 9)))
    y = conv2d(x, T(np.zeros((4, 2, 3, 3))), stride=2, pad=1, dilation=2)
    assert y.shape == (1, 4, (11 + 2 - 4 - 1) // 2 + 1, (9 + 2 - 4 - 1) // 2 + 1)


def test_conv_rejects_bad_shapes():
    with pytest.raises(ValueError, match="input channels"):
        conv2d(T(np.zeros((1, 3, 4, 4))), T(np.zeros((2, 2, 3, 3))))
    with pytest.raises(ValueError, match="groups"):
        conv2d(T(np.zeros((1, 3, 4, 4))), T(np.zeros((2, 1, 3, 3))), groups=2)
    with pytest.raises(ValueError, match="does not fit"):
        conv2d(T(np.zeros((1, 1, 2, 2))), T(np.zeros((1, 1, 3, 3))))


@pytest.mark.parametrize("groups,cout", [(1, 4), (3, 3), (3, 6)])
def test_conv_matches_direct_loops(groups, cout):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 6, 7))
    w = rng.standard_normal((cout, 3 // groups, 3, 2))
    b = rng.standard_normal(cout)
    y = conv2d(T(x), T(w), T(b), stride=2, pad=(1, 2), dilation=1, groups=groups).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (2, 2)))
    cog, cpg = cout // groups, 3 // groups
    ref = np.zeros_like(y, dtype=float)
    for n in range(2):
        for o in range(cout):
            g = o // cog
            for i in range(y.shape[2]):
                for j in range(y.shape[3]):
                    patch = xp[n, g * cpg:(g + 1) * cpg, 2 * i:2 * i + 3, 2 * j:2 * j + 2]
                    ref[n, o, i, j] = (patch * w[o]).sum() + b[o]
    np.testing.assert_allclose(y, ref, rtol=1e-4, atol=1e-4)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_gradcheck(seed):
    rng = np.random.default_rng(seed)
    arrays_ = {"x": rng.standard_normal((2, 3, 8, 8)),
               "w": rng.standard_normal((4, 3, 3, 3)),
               "b": rng.standard_normal(4)}
    fn = lambda t: reduce_sum(conv2d(t["x"], t["w"], t["b"], pad=1))
    assert check_fn(fn, arrays_, seed=seed) < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
def test_depthwise_and_strided_gradcheck(seed):
    rng = np.random.default_rng(seed)
    arrays_ = {"x": rng.standard_normal((2, 3, 8, 8)), "w": rng.standard_normal((3, 1, 3, 3))}
    fn = lambda t: projected(conv2d(t["x"], t["w"], stride=2, pad=2, dilation=2, groups=3))
    assert check_fn(fn, arrays_, seed=seed) < 1e-3


# ---------------------------------------------------------------- pooling

def test_maxpool_window():
    np.testing.assert_array_equal(maxpool2d(T([[[[1, 2], [3, 4]]]]), 2).data, [[[[4]]]])


def test_maxpool_rejects_indivisible():
    with pytest.raises(ValueError):
        maxpool2d(T(np.zeros((1, 1, 3, 4))), 2)


def test_maxpool_tie_goes_to_first():
    x = T(np.ones((1, 1, 2, 2)), grad=True)
    backward(reduce_sum(maxpool2d(x, 2)))
    np.testing.assert_array_equal(x.grad, [[[[1, 0], [0, 0]]]])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (1, 2, 3, 3), elements=st.floats(-1e3, 1e3, width=32)),
       st.sampled_from([2, 4]))
def test_maxpool_inverts_upsample(x, s):
    y = maxpool2d(upsample_nearest(T(x), s), s)
    np.testing.assert_array_equal(y.data, x)


@pytest.mark.parametrize("seed", SEEDS)
def test_maxpool_gradcheck(seed):
    rng = np.random.default_rng(seed)
    # off-tie: a permutation spaced well beyond the FD step
    x = rng.permutation(2 * 3 * 4 * 4).reshape(2, 3, 4, 4).astype(float)
    assert check_fn(lambda t: projected(maxpool2d(t["x"], 2)), {"x": x}, seed=seed) < 1e-3


def test_upsample_identity_and_blocks():
    x = T([[[[1, 2], [3, 4]]]])
    assert upsample_nearest(x, 1) is x
    np.testing.assert_array_equal(
        upsample_nearest(x, 2).data[0, 0],
        [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    with pytest.raises(ValueError):
        upsample_nearest(x, 0)


@pytest.mark.parametrize("f", [2, 3])
def test_upsample_grad_is_factor_squared(f):
    x = T(np.random.default_rng(0).standard_normal((1, 2, 3, 3)), grad=True)
    backward(reduce_sum(upsample_nearest(x, f)))
    np.testing.assert_array_equal(x.grad, np.full(x.shape, f * f))


# ---------------------------------------------------------------- group norm

def _affine(c, g=1.0, b=0.0):
    return T(np.full(c, g), True), T(np.full(c, b), True)


def test_group_norm_constant_input_is_zero():
    out = group_norm(T(np.full((1, 4, 3, 3), 7.0)), 2, *_affine(4))
    np.testing.assert_array_equal(out.data, 0)


def test_group_norm_affine_dominates():
    x = np.random.default_rng(0).standard_normal((2, 4, 3, 3))
    out = group_norm(T(x), 2, *_affine(4, 0.0, 5.0))
    np.testing.assert_array_equal(out.data, 5)


def test_group_norm_rejects_bad_groups():
    with pytest.raises(ValueError):
        group_norm(T(np.zeros((1, 6, 2, 2))), 4, *_affine(6))


@pytest.mark.parametrize("seed", SEEDS)
def test_group_norm_standardizes(seed):
    x = np.random.default_rng(seed).normal(3.0, 2.0, (3, 16, 4, 4))
    y = group_norm(T(x), 4, *_affine(16)).data.astype(np.float64).reshape(3, 4, -1)
    assert np.abs(y.mean(-1)).max() <= 1e-5
    assert np.abs(y.var(-1) - 1).max() <= 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_group_norm_gradcheck(seed):
    rng = np.random.default_rng(seed)
    arrays_ = {"x": rng.standard_normal((2, 8, 4, 4)),
               "g": rng.standard_normal(8), "b": rng.standard_normal(8)}
    fn = lambda t: projected(group_norm(t["x"], 2, t["g"], t["b"]))
    assert check_fn(fn, arrays_, seed=seed) < 2e-3


# ---------------------------------------------------------------- activations

def test_activation_symmetry_points():
    z = T(np.zeros((1, 1, 1, 1)))
    assert activation(z, "silu").data.item() == 0
    assert activation(z, "sigmoid").data.item() == 0.5
    assert activation(z, "gelu").data.item() == 0


def test_silu_saturates():
    assert abs(activation(T(np.full((1, 1, 1, 1), 20.0)), "silu").data.item() - 20) <= 1e-6


def test_gelu_is_exact_erf_form():
    from math import erf, sqrt
    xs = np.linspace(-4, 4, 17)
    out = activation(Tensor(xs.reshape(1, 1, 1, -1)), "gelu").data.ravel()
    np.testing.assert_allclose(out, [x * 0.5 * (1 + erf(x / sqrt(2))) for x in xs], rtol=1e-12)


@pytest.mark.parametrize("kind", ["gelu", "silu", "sigmoid"])
@pytest.mark.parametrize("seed", SEEDS)
def test_activation_gradcheck(kind, seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, 4, 4)) * 2
    assert check_fn(lambda t: projected(activation(t["x"], kind)), {"x": x}, seed=seed) < 1e-4


# ---------------------------------------------------------------- elementwise

def test_ewise_identities():
    x = T(np.random.default_rng(0).standard_normal((2, 3, 4, 4)))
    np.testing.assert_array_equal(mul(x, T(np.ones(x.shape))).data, x.data)
    np.testing.assert_array_equal(add(x, T(np.zeros(x.shape))).data, x.data)
    with pytest.raises(ValueError):
        ewise(x, T(np.zeros((2, 3, 4, 5))), "add")


def test_scale_zero_and_lambda_grad():
    rng = np.random.default_rng(1)
    x = T(rng.standard_normal((2, 3, 4, 4)))
    lam = T(np.zeros(3), True)
    y = scale(x, lam)
    assert not y.data.any()
    g = rng.standard_normal(y.shape)
    backward(reduce_sum(y * Tensor(g.astype(np.float32))))
    np.testing.assert_allclose(lam.grad, (g * x.data).sum(axis=(0, 2, 3)), rtol=1e-5)


@pytest.mark.parametrize("seed", SEEDS)
def test_scale_and_mul_gradcheck(seed):
    rng = np.random.default_rng(seed)
    arrays_ = {"x": rng.standard_normal((2, 3, 4, 4)), "y": rng.standard_normal((2, 3, 4, 4)),
               "lam": rng.standard_normal(3)}
    fn = lambda t: projected(scale(mul(t["x"], t["y"]), t["lam"]))
    assert check_fn(fn, arrays_, seed=seed) < 1e-4


def test_mul_grad_is_other_operand():
    rng = np.random.default_rng(0)
    a, b = T(rng.standard_normal((1, 2, 3, 3)), True), T(rng.standard_normal((1, 2, 3, 3)))
    backward(reduce_sum(mul(a, b)))
    np.testing.assert_array_equal(a.grad, b.data)


# ---------------------------------------------------------------- channels

def test_split_concat_round_trip_bitwise():
    x = np.random.default_rng(0).standard_normal((2, 6, 4, 4)).astype(np.float32)
    parts = split_channels(T(x), [2, 2, 2])
    assert concat_channels(parts).data.tobytes() == x.tobytes()
    parts2 = split_channels(concat_channels(parts), [2, 2, 2])
    for p, q in zip(parts, parts2):
        assert p.data.tobytes() == q.data.tobytes()


def test_split_enumeration():
    a, bc = split_channels(T(np.array([1, 2, 3]).reshape(1, 3, 1, 1)), [1, 2])
    assert a.data.ravel().tolist() == [1]
    assert bc.data.ravel().tolist() == [2, 3]


def test_concat_rejects_spatial_mismatch():
    with pytest.raises(ValueError):
        concat_channels([T(np.zeros((1, 1, 2, 2))), T(np.zeros((1, 1, 2, 3)))])


@pytest.mark.parametrize("seed", SEEDS)
def test_split_concat_gradcheck(seed):
    x = np.random.default_rng(seed).standard_normal((1, 5, 3, 3))

    def fn(t):
        a, b, c = split_channels(t["x"], [1, 3, 1])
        return projected(concat_channels([c, a * 2.0, b]))

    assert check_fn(fn, {"x": x}, seed=seed) < 1e-4


def test_channel_pool_basics():
    x = T(np.random.default_rng(0).standard_normal((2, 1, 3, 3)))
    for kind in ("mean", "max"):
        np.testing.assert_array_equal(channel_pool(x, kind).data, x.data)
    pair = T(np.array([1.0, 3.0]).reshape(1, 2, 1, 1))
    assert channel_pool(pair, "mean").data.item() == 2
    assert channel_pool(pair, "max").data.item() == 3


@pytest.mark.parametrize("seed", SEEDS)
def test_channel_pool_gradcheck(seed):
    x = np.random.default_rng(seed).permutation(60).reshape(1, 4, 3, 5).astype(float)
    for kind in ("mean", "max"):
        assert check_fn(lambda t: projected(channel_pool(t["x"], kind)), {"x": x}, seed=seed) < 1e-4


# ---------------------------------------------------------------- backward

def test_sum_grad_is_ones_and_accumulates():
    x = T(np.random.default_rng(0).standard_normal((1, 2, 3, 3)), True)
    backward(reduce_sum(x))
    np.testing.assert_array_equal(x.grad, 1)
    backward(reduce_sum(x))
    np.testing.assert_array_equal(x.grad, 2)


def test_square_grad():
    x = T(np.random.default_rng(0).standard_normal((1, 2, 3, 3)), True)
    backward(reduce_sum(mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-6)


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError, match="scalar"):
        backward(T(np.zeros((1, 1, 2, 2)), True) * 2.0)


def test_reused_node_visited_once():
    x = T(np.full((1, 1, 1, 1), 3.0), True)
    y = x * x
    backward(reduce_sum(y + y * y))  # d/dx (x^2 + x^4) = 2x + 4x^3
    assert x.grad.item() == pytest.approx(6 + 108)


def test_mean_reduce():
    x = T(np.arange(8.0).reshape(1, 2, 2, 2), True)
    out = reduce_mean(x)
    assert out.data.item() == 3.5
    backward(out)
    np.testing.assert_array_equal(x.grad, 1 / 8)


def test_no_grad_builds_no_graph():
    x = T(np.ones((1, 1, 2, 2)), True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


@pytest.mark.parametrize("seed", SEEDS)
def test_composite_gradcheck(seed):
    rng = np.random.default_rng(seed)
    arrays_ = {"x": rng.standard_normal((2, 3, 6, 6)), "w": rng.standard_normal((8, 3, 3, 3)),
               "g": 1 + 0.1 * rng.standard_normal(8), "b": 0.1 * rng.standard_normal(8)}
    fn = lambda t: reduce_sum(activation(group_norm(conv2d(t["x"], t["w"], pad=1), 4, t["g"], t["b"]), "silu"))
    assert check_fn(fn, arrays_, seed=seed) < 2e-3


def test_forward_stays_finite_on_large_inputs():
    x = T(np.random.default_rng(0).standard_normal((1, 4, 4, 4)) * 1e3)
    for kind in ("gelu", "silu", "sigmoid"):
        assert np.isfinite(activation(x, kind).data).all()


# ---------------------------------------------------------------- T32

def test_t32_round_trip(tmp_path):
    a = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(np.float32)
    t32.save(tmp_path / "a.t32", a)
    raw = (tmp_path / "a.t32").read_bytes()
    assert raw[:4] == b"T32\x00"
    assert int.from_bytes(raw[4:8], "little") == 3
    np.testing.assert_array_equal(t32.load(tmp_path / "a.t32"), a)


def test_t32_rejects_garbage(tmp_path):
    (tmp_path / "bad.t32").write_bytes(b"nope")
    with pytest.raises(t32.T32Error, match="bad.t32"):
        t32.load(tmp_path / "bad.t32")
    (tmp_path / "short.t32").write_bytes(t32.encode(np.zeros((4, 4)))[:-3])
    with pytest.raises(t32.T32Error, match="truncated"):
        t32.load(tmp_path / "short.t32")
