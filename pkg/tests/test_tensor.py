"""Tensor op tests against independently coded oracles and finite differences."""

import numpy as np
import pytest

from advpose.tensor import (
    ContractViolation,
    RngStream,
    Tensor,
    add,
    backward,
    batchnorm2d,
    concat_channels,
    conv2d,
    grad_check,
    maxpool2d,
    mse_sum,
    no_grad,
    relu,
    reset_tape,
    scale,
    tensor_sum,
    upsample_nearest2x,
)


# ---------------------------------------------------------------------------
# oracles: straight nested loops, no vectorization, written without looking at
# the production kernels


def conv_oracle(x, w, b, stride, padding):
    bs, cin, h, ww = x.shape
    cout, _, kh, kw = w.shape
    hp, wp = h + 2 * padding, ww + 2 * padding
    xp = np.zeros((bs, cin, hp, wp))
    xp[:, :, padding : padding + h, padding : padding + ww] = x
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((bs, cout, ho, wo))
    for n in range(bs):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, ci, i * stride + u, j * stride + v] * w[co, ci, u, v]
                    out[n, co, i, j] = acc + b[co]
    return out


def pool_oracle(x, k, stride):
    bs, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    out = np.zeros((bs, c, ho, wo))
    for n in range(bs):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = -np.inf
                    for u in range(k):
                        for v in range(k):
                            val = x[n, ci, i * stride + u, j * stride + v]
                            if val > best:
                                best = val
                    out[n, ci, i, j] = best
    return out


def upsample_oracle(x):
    bs, c, h, w = x.shape
    out = np.zeros((bs, c, 2 * h, 2 * w))
    for i in range(2 * h):
        for j in range(2 * w):
            out[:, :, i, j] = x[:, :, i // 2, j // 2]
    return out


@pytest.fixture(autouse=True)
def clean_tape():
    reset_tape()
    yield
    reset_tape()


class TestForwardOracles:
    def test_conv_identity_kernel(self):
        x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
        w = np.ones((1, 1, 1, 1))
        out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
        assert np.array_equal(out.data, x)

    def test_conv_ones_kernel_sums_window(self):
        x = np.ones((1, 1, 5, 5))
        w = np.ones((1, 1, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 3, 3)
        assert np.all(out.data == 9.0)

    def test_conv_random_shapes_match_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            bs = int(rng.integers(1, 3))
            cin = int(rng.integers(1, 4))
            cout = int(rng.integers(1, 4))
            k = int(rng.choice([1, 3, 5]))
            stride = int(rng.integers(1, 3))
            padding = int(rng.integers(0, 3))
            h = int(rng.integers(k, k + 6))
            w = int(rng.integers(k, k + 6))
            x = rng.normal(size=(bs, cin, h, w))
            wt = rng.normal(size=(cout, cin, k, k))
            b = rng.normal(size=cout)
            got = conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, padding).data
            want = conv_oracle(x, wt, b, stride, padding)
            assert got.shape == want.shape
            assert np.max(np.abs(got - want)) <= 1e-9

    def test_pool_random_shapes_match_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            bs = int(rng.integers(1, 3))
            c = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 4))
            k = int(rng.integers(1, stride + 1))
            h = stride * int(rng.integers(max(k, 1), 6))
            w = stride * int(rng.integers(max(k, 1), 6))
            x = rng.normal(size=(bs, c, h, w))
            got = maxpool2d(Tensor(x), k, stride).data
            want = pool_oracle(x, k, stride)
            assert np.max(np.abs(got - want)) <= 1e-9

    def test_pool_2x2_example(self):
        x = np.array([[1, 2], [3, 4]], dtype=np.float64).reshape(1, 1, 2, 2)
        out = maxpool2d(Tensor(x))
        assert out.data.reshape(()) == 4.0

    def test_upsample_random_shapes_match_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            shape = (
                int(rng.integers(1, 3)),
                int(rng.integers(1, 4)),
                int(rng.integers(1, 6)),
                int(rng.integers(1, 6)),
            )
            x = rng.normal(size=shape)
            got = upsample_nearest2x(Tensor(x)).data
            assert np.max(np.abs(got - upsample_oracle(x))) <= 1e-9

    def test_elementwise_ops(self):
        rng = np.random.default_rng(10)
        a = rng.normal(size=(2, 3, 4, 4))
        b = rng.normal(size=(2, 3, 4, 4))
        assert np.array_equal(add(Tensor(a), Tensor(b)).data, a + b)
        assert np.array_equal(relu(Tensor(a)).data, np.where(a > 0, a, 0.0))
        assert np.allclose(mse_sum(Tensor(a), Tensor(b)).item(), np.sum((a - b) ** 2), atol=1e-9)
        cat = concat_channels([Tensor(a), Tensor(b)])
        assert np.array_equal(cat.data, np.concatenate([a, b], axis=1))
        assert scale(Tensor(a), -2.5).data == pytest.approx(-2.5 * a)

    def test_batchnorm_constant_channel_maps_to_shift(self):
        x = np.full((2, 3, 4, 4), 7.0)
        gamma = Tensor(np.ones(3), requires_grad=True)
        beta = Tensor(np.full(3, 0.25), requires_grad=True)
        out, rm, rv = batchnorm2d(Tensor(x), gamma, beta, np.zeros(3), np.ones(3), True)
        assert np.allclose(out.data, 0.25, atol=1e-9)
        assert np.allclose(rm, 0.7, atol=1e-12)  # momentum 0.1 step toward mean 7
        assert np.allclose(rv, 0.9, atol=1e-12)

    def test_batchnorm_eval_uses_initial_moments(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 3, 4, 4))
        gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))
        out, _, _ = batchnorm2d(Tensor(x), gamma, beta, np.zeros(3), np.ones(3), False)
        assert np.allclose(out.data, x / np.sqrt(1 + 1e-5), atol=1e-12)


class TestContracts:
    def test_conv_rejects_even_kernel(self):
        with pytest.raises(ContractViolation):
            conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros(1)))

    def test_conv_rejects_channel_mismatch(self):
        with pytest.raises(ContractViolation):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))

    def test_pool_rejects_non_divisible(self):
        with pytest.raises(ContractViolation):
            maxpool2d(Tensor(np.zeros((1, 1, 5, 4))))

    def test_backward_rejects_non_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        y = add(x, x)
        with pytest.raises(ContractViolation):
            backward(y)

    def test_backward_rejects_off_tape_loss(self):
        with pytest.raises(ContractViolation):
            backward(Tensor(np.asarray(1.0)))

    def test_grad_check_rejects_bad_step(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractViolation):
            grad_check(tensor_sum, x, h=1e-2)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
        backward(tensor_sum(x))
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_mse_grad_is_two_diff(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        backward(mse_sum(x, Tensor(np.zeros(3))))
        assert np.allclose(x.grad, 2 * x.data, atol=1e-12)

    def test_two_backwards_accumulate(self):
        rng = np.random.default_rng(12)
        xv = rng.normal(size=(3, 3))
        x = Tensor(xv, requires_grad=True)
        backward(tensor_sum(x))
        backward(mse_sum(x, Tensor(np.zeros((3, 3)))))
        x2 = Tensor(xv, requires_grad=True)
        backward(add(tensor_sum(x2), mse_sum(x2, Tensor(np.zeros((3, 3))))))
        assert np.max(np.abs(x.grad - x2.grad)) <= 1e-12

    def test_leaf_filter_blocks_other_leaves(self):
        a = Tensor(np.ones(4), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        backward(tensor_sum(add(a, b)), leaves=[a])
        assert np.array_equal(a.grad, np.ones(4))
        assert b.grad is None

    def test_pool_tie_routes_to_first_window_element(self):
        x = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        backward(tensor_sum(maxpool2d(x)))
        assert np.array_equal(x.grad, np.array([[[[1.0, 0.0], [0.0, 0.0]]]]))

    def test_no_grad_suppresses_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = tensor_sum(x)
        assert not y.requires_grad
        with pytest.raises(ContractViolation):
            backward(y)


class TestGradCheck:
    def test_linear_function_is_exact(self):
        x = Tensor(np.linspace(-1, 1, 8), requires_grad=True)
        assert grad_check(tensor_sum, x) <= 1e-9

    def test_all_ops_under_tolerance(self):
        rng = np.random.default_rng(13)
        x4 = rng.normal(size=(2, 3, 4, 4))
        # keep relu inputs away from the kink so central differences are valid
        x4 = np.where(np.abs(x4) < 0.05, 0.2, x4)
        target = rng.normal(size=(2, 3, 4, 4))
        w = rng.normal(size=(4, 3, 3, 3)) * 0.5
        b = rng.normal(size=4)
        gamma = Tensor(rng.normal(size=3) + 1.5, requires_grad=True)
        beta = Tensor(rng.normal(size=3), requires_grad=True)
        rm, rv = np.zeros(3), np.ones(3)

        cases = {
            "conv_x": lambda t: tensor_sum(conv2d(t, Tensor(w), Tensor(b), 2, 1)),
            "relu": lambda t: mse_sum(relu(t), Tensor(target)),
            "pool": lambda t: mse_sum(maxpool2d(t), Tensor(target[:, :, ::2, ::2])),
            "upsample": lambda t: tensor_sum(upsample_nearest2x(t)),
            "add": lambda t: tensor_sum(add(t, t)),
            "scale": lambda t: tensor_sum(scale(t, -1.75)),
            "concat": lambda t: tensor_sum(concat_channels([t, Tensor(target)])),
            "mse": lambda t: mse_sum(t, Tensor(target)),
            "bn_train": lambda t: mse_sum(
                batchnorm2d(t, gamma, beta, rm, rv, True)[0], Tensor(target)
            ),
            "bn_eval": lambda t: mse_sum(
                batchnorm2d(t, gamma, beta, rm, rv, False)[0], Tensor(target)
            ),
        }
        for name, f in cases.items():
            err = grad_check(f, Tensor(x4, requires_grad=True))
            assert err < 1e-3, f"{name}: {err}"

    def test_conv_weight_and_bias_grads(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.normal(size=(2, 2, 5, 5)))
        wv = rng.normal(size=(3, 2, 3, 3))
        bv = rng.normal(size=3)

        def via_weight(wt):
            return tensor_sum(conv2d(x, wt, Tensor(bv), 1, 1))

        def via_bias(bt):
            return tensor_sum(conv2d(x, Tensor(wv), bt, 1, 1))

        assert grad_check(via_weight, Tensor(wv, requires_grad=True)) < 1e-3
        assert grad_check(via_bias, Tensor(bv, requires_grad=True)) < 1e-3

    def test_batchnorm_scale_shift_grads(self):
        rng = np.random.default_rng(15)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        target = Tensor(rng.normal(size=(2, 3, 4, 4)))
        rm, rv = np.zeros(3), np.ones(3)

        def via_gamma(gt):
            return mse_sum(batchnorm2d(x, gt, Tensor(np.zeros(3)), rm, rv, True)[0], target)

        def via_beta(bt):
            return mse_sum(batchnorm2d(x, Tensor(np.ones(3)), bt, rm, rv, True)[0], target)

        assert grad_check(via_gamma, Tensor(np.ones(3) * 1.3, requires_grad=True)) < 1e-3
        assert grad_check(via_beta, Tensor(np.zeros(3), requires_grad=True)) < 1e-3

    def test_sabotaged_backward_rule_is_caught(self):
        # negative control: a deliberately wrong derivative must be flagged
        def bad_square(t):
            out = Tensor(t.data * t.data)
            out.requires_grad = True
            from advpose import tensor as tc

            tc._tape.nodes.append(tc._Node((t,), out, lambda g: (3.0 * t.data * g,)))
            return tensor_sum(out)

        x = Tensor(np.array([1.0, 2.0, -1.5]), requires_grad=True)
        assert grad_check(bad_square, x) > 1e-3


class TestRngStream:
    def test_same_seed_counter_is_bitwise_identical(self):
        a = RngStream(1234, 5)
        b = RngStream(1234, 5)
        for _ in range(3):
            assert np.array_equal(a.normal((4, 4)), b.normal((4, 4)))
        assert a.uniform(0, 1) == b.uniform(0, 1)
        assert np.array_equal(a.permutation(17), b.permutation(17))

    def test_counter_state_restarts_the_stream(self):
        a = RngStream(99)
        first = a.normal((8,))
        again = RngStream(99, 0).normal((8,))
        assert np.array_equal(first, again)

    def test_children_are_decorrelated_and_stable(self):
        root = RngStream(5)
        c1 = root.child(1).normal((64,))
        c2 = root.child(2).normal((64,))
        assert not np.array_equal(c1, c2)
        assert np.array_equal(c1, RngStream(5).child(1).normal((64,)))
        assert not np.array_equal(
            RngStream(5).child(1, 2).normal((8,)), RngStream(5).child(2, 1).normal((8,))
        )
