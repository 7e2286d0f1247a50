"""Tests for the reverse-mode tensor engine and its binary container."""

import numpy as np
import pytest

from gpat import tensor
from gpat.tensor import ParamSet, Tensor

from gradcheck_cases import run_sweep


# ---------------------------------------------------------------------------
# scalar chain rule and backward conventions
# ---------------------------------------------------------------------------

def test_quadratic_chain_gradient():
    # d/dx (3x^2 + 2x) at x = 2 is 14 [DERIVED: hand differentiation]
    x = Tensor(np.array(2.0), requires_grad=True)
    y = x * x * 3.0 + x * 2.0
    y.backward()
    assert y.item() == pytest.approx(16.0)
    assert x.grad == pytest.approx(14.0)


def test_backward_of_sum_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_of_constant_is_zeros():
    x = Tensor(np.ones(5), requires_grad=True)
    (x.sum() * 0.0).backward()
    np.testing.assert_array_equal(x.grad, np.zeros(5))


def test_backward_of_x_dot_x_is_2x():
    v = np.array([1.0, -2.0, 3.0])
    x = Tensor(v, requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2.0 * v, rtol=0, atol=1e-15)


def test_backward_requires_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_grad_accumulates_across_backward_calls():
    x = Tensor(np.array(1.5), requires_grad=True)
    (x * x).backward()
    first = float(x.grad)
    (x * x).backward()
    assert float(x.grad) == pytest.approx(2.0 * first)


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.array([0.0, -1.0, 2.0]), requires_grad=True)
    x.relu().sum().backward()
    np.testing.assert_array_equal(x.grad, np.array([0.0, 0.0, 1.0]))


def test_float64_everywhere():
    t = Tensor(np.float32(1.0))
    assert t.data.dtype == np.float64
    out = tensor.softmax(Tensor(np.array([1, 2, 3])))
    assert out.data.dtype == np.float64


# ---------------------------------------------------------------------------
# convolution forward contracts
# ---------------------------------------------------------------------------

def test_conv2d_hand_example():
    # 2x2 input [[1,2],[3,4]], kernel [[1,1],[1,1]], no padding -> [[10]]
    x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    k = Tensor(np.ones((1, 1, 2, 2)))
    b = Tensor(np.zeros(1))
    out = tensor.conv2d(x, k, b)
    np.testing.assert_array_equal(out.data, np.array([[[10.0]]]))


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 5, 5))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = tensor.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1)), padding=1)
    np.testing.assert_allclose(out.data, x, atol=1e-15)


def test_conv2d_output_shape_formula():
    rng = np.random.default_rng(1)
    for h, k, s, p in [(7, 3, 1, 0), (7, 3, 2, 1), (9, 5, 2, 2), (6, 4, 2, 1)]:
        x = Tensor(rng.standard_normal((2, 3, h, h)))
        ker = Tensor(rng.standard_normal((4, 3, k, k)))
        out = tensor.conv2d(x, ker, Tensor(np.zeros(4)), stride=s, padding=p)
        expect = (h + 2 * p - k) // s + 1
        assert out.shape == (2, 4, expect, expect)


def test_conv2d_channel_mismatch_rejected():
    x = Tensor(np.zeros((2, 4, 4)))
    k = Tensor(np.zeros((1, 3, 3, 3)))
    with pytest.raises(ValueError):
        tensor.conv2d(x, k, Tensor(np.zeros(1)))


def test_conv_transpose2d_doubles_spatial_size():
    # kernel 4, stride 2, padding 1: 8 -> 16
    x = Tensor(np.random.default_rng(2).standard_normal((1, 3, 8, 8)))
    k = Tensor(np.random.default_rng(3).standard_normal((3, 2, 4, 4)))
    out = tensor.conv_transpose2d(x, k, Tensor(np.zeros(2)), stride=2, padding=1)
    assert out.shape == (1, 2, 16, 16)


def test_conv_transpose2d_output_padding_extends_shape():
    x = Tensor(np.zeros((1, 1, 4, 4)))
    k = Tensor(np.zeros((1, 1, 3, 3)))
    base = tensor.conv_transpose2d(x, k, Tensor(np.zeros(1)), stride=2, padding=1)
    padded = tensor.conv_transpose2d(
        x, k, Tensor(np.zeros(1)), stride=2, padding=1, output_padding=1)
    assert padded.shape[-1] == base.shape[-1] + 1
    with pytest.raises(ValueError):
        tensor.conv_transpose2d(x, k, Tensor(np.zeros(1)), stride=2,
                                padding=1, output_padding=2)


def test_conv_transpose_is_adjoint_of_conv():
    # <conv(x), y> == <x, convT(y)> with shared kernel and zero biases
    rng = np.random.default_rng(4)
    for trial in range(6):
        s = int(rng.integers(1, 3))
        p = int(rng.integers(0, 2))
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h = int(rng.integers(5, 9))
        k = 3
        x = rng.standard_normal((2, cin, h, h))
        ker = rng.standard_normal((cout, cin, k, k))
        fwd = tensor.conv2d(Tensor(x), Tensor(ker), Tensor(np.zeros(cout)),
                            stride=s, padding=p)
        y = rng.standard_normal(fwd.shape)
        # the conv kernel's (cout, cin) axes are exactly convT's (cin, cout)
        back = tensor.conv_transpose2d(
            Tensor(y), Tensor(ker), Tensor(np.zeros(cin)), stride=s, padding=p,
            output_padding=h - ((fwd.shape[-1] - 1) * s - 2 * p + k))
        lhs = float((fwd.data * y).sum())
        rhs = float((x * back.data).sum())
        assert abs(lhs - rhs) <= 1e-8 * max(1.0, abs(lhs))


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def test_maxpool_hand_example():
    x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    out = tensor.maxpool2d(x, 2)
    np.testing.assert_array_equal(out.data, np.array([[[4.0]]]))


def test_maxpool_backward_routes_to_argmax():
    x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]), requires_grad=True)
    tensor.maxpool2d(x, 2).sum().backward()
    np.testing.assert_array_equal(x.grad, np.array([[[0.0, 0.0], [0.0, 1.0]]]))


def test_maxpool_tie_routes_to_first_index():
    x = Tensor(np.full((1, 2, 2), 7.0), requires_grad=True)
    tensor.maxpool2d(x, 2).sum().backward()
    expect = np.zeros((1, 2, 2))
    expect[0, 0, 0] = 1.0
    np.testing.assert_array_equal(x.grad, expect)


def test_maxpool_rejects_non_divisible_size():
    with pytest.raises(ValueError):
        tensor.maxpool2d(Tensor(np.zeros((1, 5, 5))), 2)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def _bn_state(c, gamma=1.0, beta=0.0):
    return (Tensor(np.full(c, gamma)), Tensor(np.full(c, beta)),
            Tensor(np.zeros(c)), Tensor(np.ones(c)))


def test_batchnorm_eval_identity_with_frozen_unit_stats():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 4, 4))
    gamma, beta, rm, rv = _bn_state(3)
    out = tensor.batchnorm2d(Tensor(x), gamma, beta, rm, rv, train=False)
    np.testing.assert_allclose(out.data, x / np.sqrt(1.0 + 1e-5), atol=1e-12)


def test_batchnorm_train_constant_channel_maps_to_beta():
    x = np.full((4, 2, 3, 3), 5.0)
    gamma, beta, rm, rv = _bn_state(2, beta=-1.25)
    out = tensor.batchnorm2d(Tensor(x), gamma, beta, rm, rv, train=True)
    np.testing.assert_allclose(out.data, np.full_like(x, -1.25), atol=1e-9)


def test_batchnorm_affine_parameters_applied():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 1, 4, 4))
    g1, b1, rm1, rv1 = _bn_state(1)
    base = tensor.batchnorm2d(Tensor(x), g1, b1, rm1, rv1, train=True)
    g2, b2, rm2, rv2 = _bn_state(1, gamma=2.0, beta=1.0)
    out = tensor.batchnorm2d(Tensor(x), g2, b2, rm2, rv2, train=True)
    np.testing.assert_allclose(out.data, 2.0 * base.data + 1.0, atol=1e-12)


def test_batchnorm_running_stats_ema_update():
    # one train step from (0, 1) with momentum 0.1 and unbiased variance
    rng = np.random.default_rng(7)
    x = rng.standard_normal((4, 2, 3, 3)) * 1.7 + 0.4
    gamma, beta, rm, rv = _bn_state(2)
    tensor.batchnorm2d(Tensor(x), gamma, beta, rm, rv, train=True)
    count = 4 * 3 * 3
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3)) * count / (count - 1)
    np.testing.assert_allclose(rm.data, 0.9 * 0.0 + 0.1 * mu, atol=1e-12)
    np.testing.assert_allclose(rv.data, 0.9 * 1.0 + 0.1 * var, atol=1e-12)


def test_batchnorm_eval_does_not_touch_running_stats():
    gamma, beta, rm, rv = _bn_state(2)
    before = (rm.data.copy(), rv.data.copy())
    x = np.random.default_rng(8).standard_normal((2, 2, 3, 3))
    tensor.batchnorm2d(Tensor(x), gamma, beta, rm, rv, train=False)
    np.testing.assert_array_equal(rm.data, before[0])
    np.testing.assert_array_equal(rv.data, before[1])


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def test_softmax_uniform_logits():
    out = tensor.softmax(Tensor(np.zeros(10)))
    np.testing.assert_allclose(out.data, np.full(10, 0.1), atol=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((5, 7)) * 30.0
    out = tensor.softmax(Tensor(x), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(5), atol=1e-9)
    assert (out.data >= 0).all()


def test_log_softmax_extreme_logits_stay_finite():
    out = tensor.log_softmax(Tensor(np.array([1000.0, 0.0])))
    assert np.isfinite(out.data).all()
    assert out.data[0] == pytest.approx(0.0, abs=1e-12)


def test_log_softmax_matches_log_of_softmax():
    x = np.random.default_rng(10).standard_normal(6)
    a = tensor.log_softmax(Tensor(x)).data
    b = np.log(tensor.softmax(Tensor(x)).data)
    np.testing.assert_allclose(a, b, atol=1e-12)


# ---------------------------------------------------------------------------
# the numeric gradient oracle and the per-layer sweep
# ---------------------------------------------------------------------------

def test_numeric_grad_check_agrees_on_smooth_function():
    err = tensor.numeric_grad_check(
        lambda t: (t * t).sum(), np.array([0.3, -0.7, 1.1]))
    assert err < 1e-9


def test_numeric_grad_check_composite_network():
    rng = np.random.default_rng(11)
    k = Tensor(rng.standard_normal((2, 1, 3, 3)) * 0.5)
    b = Tensor(rng.standard_normal(2))
    w = Tensor(rng.standard_normal((8, 3)) * 0.5)
    fb = Tensor(rng.standard_normal(3))

    def net(t):
        h = tensor.conv2d(t, k, b, stride=2, padding=1).relu()
        h = h.reshape(1, 8)
        return tensor.log_softmax(tensor.fully_connected(h, w, fb)).gather([1]).sum()

    assert tensor.numeric_grad_check(net, rng.standard_normal((1, 4, 4))) < 1e-4


def test_numeric_grad_check_rejects_vector_output():
    with pytest.raises(ValueError):
        tensor.numeric_grad_check(lambda t: t * 2.0, np.ones(3))


def test_gradient_sweep_small():
    worst = run_sweep(instances=3, seed=100)
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    assert not bad, f"gradient mismatches: {bad}"


def test_forward_backward_stay_finite():
    rng = np.random.default_rng(12)
    x = Tensor(rng.standard_normal((2, 2, 4, 4)) * 3.0, requires_grad=True)
    k = Tensor(rng.standard_normal((2, 2, 3, 3)))
    out = tensor.conv2d(x, k, Tensor(np.zeros(2)), padding=1).tanh()
    s = tensor.log_softmax(out.reshape(2, 32)).sum()
    s.backward()
    assert np.isfinite(s.data).all()
    assert np.isfinite(x.grad).all()


def test_deterministic_forward_backward():
    def run():
        rng = np.random.default_rng(13)
        x = Tensor(rng.standard_normal((1, 3, 5, 5)), requires_grad=True)
        k = Tensor(rng.standard_normal((2, 3, 3, 3)))
        out = tensor.conv2d(x, k, Tensor(np.zeros(2)), padding=1)
        tensor.softmax(out.reshape(2 * 25)).max().backward()
        return out.data.copy(), x.grad.copy()

    a_out, a_grad = run()
    b_out, b_grad = run()
    assert a_out.tobytes() == b_out.tobytes()
    assert a_grad.tobytes() == b_grad.tobytes()


# ---------------------------------------------------------------------------
# no_grad
# ---------------------------------------------------------------------------

def test_no_grad_suppresses_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with tensor.no_grad():
        y = (x * 2.0).sum()
    assert y._backward_fn is None or not y.requires_grad


# ---------------------------------------------------------------------------
# ParamSet container
# ---------------------------------------------------------------------------

def test_paramset_insertion_order_and_unique_names():
    ps = ParamSet()
    ps.add("b", Tensor(np.zeros(2)))
    ps.add("a", Tensor(np.ones(3)))
    assert [n for n, _ in ps.items()] == ["b", "a"]
    with pytest.raises(ValueError):
        ps.add("a", Tensor(np.zeros(1)))


def test_paramset_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(14)
    ps = ParamSet()
    ps.add("conv.w", Tensor(rng.standard_normal((2, 1, 3, 3))))
    ps.add("conv.b", Tensor(rng.standard_normal(2)))
    ps.add("scalar", Tensor(np.array(3.14159)))
    path = tmp_path / "params.gpat"
    ps.save(path)
    loaded = ParamSet.load(path)
    assert [n for n, _ in loaded.items()] == [n for n, _ in ps.items()]
    for (_, a), (_, b) in zip(ps.items(), loaded.items()):
        assert a.data.tobytes() == b.data.tobytes()
        assert a.shape == b.shape


def test_paramset_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad.gpat"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        ParamSet.load(path)


def test_paramset_rejects_truncated_file(tmp_path):
    ps = ParamSet()
    ps.add("w", Tensor(np.arange(12.0).reshape(3, 4)))
    path = tmp_path / "t.gpat"
    ps.save(path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 5])
    with pytest.raises(ValueError, match="offset"):
        ParamSet.load(path)


def test_paramset_copy_is_independent():
    ps = ParamSet()
    ps.add("w", Tensor(np.ones(3)))
    cp = ps.copy()
    cp["w"].data[:] = 9.0
    np.testing.assert_array_equal(ps["w"].data, np.ones(3))
