import numpy as np
import pytest

from gainloco.nets import (AdamState, DiagonalGaussian, Mlp, adam_step, clamp_log_std, elu,
                           finite_difference_gradient, gaussian_entropy,
                           gaussian_kl_to_standard, gaussian_log_prob, orthogonal_init,
                           softmax, softmax_cross_entropy)

LOG_2PI = np.log(2 * np.pi)


def zeroed(net: Mlp) -> Mlp:
    for w in net.weights:
        w[:] = 0.0
    for b in net.biases:
        b[:] = 0.0
    return net


class TestMlpForward:
    def test_zero_weights_give_zero_output(self):
        net = zeroed(Mlp([3, 5, 2]))
        y, _ = net.forward(np.array([1.0, -2.0, 3.0]))
        assert np.all(y == 0.0)

    def test_single_linear_layer_matches_hand_matmul(self):
        net = Mlp([2, 2])
        net.weights[0][:] = [[1.0, 2.0], [3.0, 4.0]]
        net.biases[0][:] = [0.5, -0.5]
        y, _ = net.forward(np.array([1.0, 1.0]))
        assert np.allclose(y, [4.5, 5.5], atol=1e-12)

    def test_elu_hand_value(self):
        assert abs(elu(np.array([-1.0]))[0] - (np.exp(-1.0) - 1.0)) < 1e-12
        assert elu(np.array([2.5]))[0] == 2.5

    def test_hidden_elu_applied(self):
        net = Mlp([1, 1, 1])
        net.weights[0][:] = [[1.0]]
        net.weights[1][:] = [[1.0]]
        net.biases[0][:] = 0.0
        net.biases[1][:] = 0.0
        y, _ = net.forward(np.array([-1.0]))
        assert abs(y[0] - (np.exp(-1.0) - 1.0)) < 1e-12

    def test_batch_matches_single(self):
        rng = np.random.default_rng(0)
        net = Mlp([4, 6, 3], rng)
        xs = rng.normal(size=(5, 4))
        ys, _ = net.forward(xs)
        for i in range(5):
            yi, _ = net.forward(xs[i])
            assert np.allclose(ys[i], yi, atol=1e-14)

    def test_dimension_mismatch_raises(self):
        net = Mlp([4, 3])
        with pytest.raises(ValueError):
            net.forward(np.zeros(5))

    def test_parameter_count(self):
        net = Mlp([10, 7, 3])
        assert net.n_params() == (10 + 1) * 7 + (7 + 1) * 3


class TestMlpBackward:
    def test_zero_dy_gives_zero_grads(self):
        net = Mlp([3, 4, 2], np.random.default_rng(1))
        y, cache = net.forward(np.ones(3))
        grads, dx = net.backward(cache, np.zeros_like(y))
        assert all(np.all(g == 0.0) for g in grads)
        assert np.all(dx == 0.0)

    def test_scalar_quadratic_analytic(self):
        # loss = (w*x)^2 with linear 1-1 net: dL/dw = 2*w*x^2
        net = Mlp([1, 1])
        net.weights[0][:] = [[3.0]]
        net.biases[0][:] = 0.0
        x = np.array([2.0])
        y, cache = net.forward(x)
        grads, _ = net.backward(cache, 2.0 * y)
        assert abs(grads[0][0, 0] - 2.0 * 3.0 * 4.0) < 1e-12

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        net = Mlp([6, 8, 5, 3], rng)
        x = rng.normal(size=(7, 6))
        target = rng.normal(size=(7, 3))

        def loss():
            out, _ = net.forward(x)
            return float(np.sum((out - target) ** 2))

        y, cache = net.forward(x)
        grads, _ = net.backward(cache, 2.0 * (y - target))
        params = net.params()
        probes = []
        prng = np.random.default_rng(3)
        for _ in range(120):
            pi = int(prng.integers(len(params)))
            probes.append((pi, tuple(int(prng.integers(s)) for s in params[pi].shape)))
        fd = finite_difference_gradient(loss, params, probes)
        for (pi, idx), g in zip(probes, fd):
            a = grads[pi][idx]
            assert abs(a - g) / max(abs(a), abs(g), 1e-4) < 1e-4

    def test_stale_cache_rejected(self):
        net = Mlp([3, 2])
        with pytest.raises(ValueError):
            net.backward({"bogus": 1}, np.zeros(2))

    def test_dx_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        net = Mlp([4, 5, 2], rng)
        x = rng.normal(size=4)
        y, cache = net.forward(x)
        _, dx = net.backward(cache, 2.0 * y)
        h = 1e-6
        for i in range(4):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            up = float(np.sum(net.forward(xp)[0] ** 2))
            dn = float(np.sum(net.forward(xm)[0] ** 2))
            fd = (up - dn) / (2 * h)
            assert abs(fd - dx[i]) < 1e-5


class TestAdam:
    def test_zero_grads_leave_params(self):
        p = [np.array([1.0, 2.0])]
        state = AdamState.for_params(p)
        adam_step(p, [np.zeros(2)], state)
        assert np.allclose(p[0], [1.0, 2.0], atol=1e-15)

    def test_first_step_is_signed_lr(self):
        p = [np.array([0.0])]
        state = AdamState.for_params(p, lr=1e-3)
        adam_step(p, [np.array([7.0])], state)
        # bias-corrected first step reduces to -lr * g/(|g| + ~0)
        assert abs(p[0][0] + 1e-3) < 1e-6

    def test_zero_lr_freezes(self):
        p = [np.array([5.0])]
        state = AdamState.for_params(p, lr=0.0)
        adam_step(p, [np.array([3.0])], state)
        assert p[0][0] == 5.0

    def test_deterministic_across_runs(self):
        def run():
            rng = np.random.default_rng(9)
            p = [rng.normal(size=(3, 2)), rng.normal(size=2)]
            state = AdamState.for_params(p, lr=1e-2)
            for _ in range(25):
                adam_step(p, [rng.normal(size=(3, 2)), rng.normal(size=2)], state)
            return p

        a, b = run(), run()
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_shape_mismatch_raises(self):
        p = [np.zeros(3)]
        state = AdamState.for_params(p)
        with pytest.raises(ValueError):
            adam_step(p, [np.zeros(4)], state)


class TestGaussian:
    def test_standard_normal_at_zero(self):
        lp = gaussian_log_prob(np.zeros(1), np.zeros(1), np.zeros(1))
        assert abs(lp + 0.5 * LOG_2PI) < 1e-12

    def test_hand_case(self):
        # mu=1, sigma=2, x=3: -0.5*((3-1)/2)^2 - ln 2 - 0.5 ln 2pi
        lp = gaussian_log_prob(np.array([1.0]), np.array([np.log(2.0)]), np.array([3.0]))
        assert abs(lp - (-0.5 - np.log(2.0) - 0.5 * LOG_2PI)) < 1e-12

    def test_factorization_over_dims(self):
        rng = np.random.default_rng(5)
        mu, ls, x = rng.normal(size=12), rng.normal(size=12) * 0.5, rng.normal(size=12)
        total = gaussian_log_prob(mu, ls, x)
        parts = sum(gaussian_log_prob(mu[i:i + 1], ls[i:i + 1], x[i:i + 1]) for i in range(12))
        assert abs(total - parts) < 1e-9

    def test_additivity_over_random_splits(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            n = int(rng.integers(2, 40))
            k = int(rng.integers(1, n))
            mu, ls, x = rng.normal(size=n), rng.normal(size=n) * 0.3, rng.normal(size=n)
            lp = gaussian_log_prob(mu, ls, x)
            split = gaussian_log_prob(mu[:k], ls[:k], x[:k]) + gaussian_log_prob(mu[k:], ls[k:], x[k:])
            assert abs(lp - split) < 1e-9
            h = gaussian_entropy(ls)
            hs = gaussian_entropy(ls[:k]) + gaussian_entropy(ls[k:])
            assert abs(h - hs) < 1e-9

    def test_entropy_closed_form(self):
        assert abs(gaussian_entropy(np.zeros(1)) - (0.5 + 0.5 * LOG_2PI)) < 1e-12
        assert abs(gaussian_entropy(np.zeros(9)) - 9 * (0.5 + 0.5 * LOG_2PI)) < 1e-12

    def test_entropy_doubling_sigma_adds_ln2(self):
        ls = np.array([0.3, -0.2])
        ls2 = ls.copy()
        ls2[0] += np.log(2.0)
        assert abs(gaussian_entropy(ls2) - gaussian_entropy(ls) - np.log(2.0)) < 1e-12

    def test_sampling_reproducible(self):
        d = DiagonalGaussian(np.zeros(4), np.zeros(4))
        a = d.sample(np.random.default_rng(3))
        b = d.sample(np.random.default_rng(3))
        assert np.array_equal(a, b)

    def test_clamp_log_std(self):
        ls = np.array([-10.0, 0.0, 10.0])
        clamp_log_std(ls)
        assert np.allclose(ls, [-5.0, 0.0, 2.0])


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_give_ln4(self):
        loss, _ = softmax_cross_entropy(np.zeros(4), 1)
        assert abs(loss - np.log(4.0)) < 1e-12

    def test_dominant_logit_drives_loss_to_zero(self):
        loss, _ = softmax_cross_entropy(np.array([200.0, 0.0, 0.0, 0.0]), 0)
        assert loss < 1e-12

    def test_hand_case(self):
        loss, _ = softmax_cross_entropy(np.array([1.0, 0.0, 0.0, 0.0]), 0)
        assert abs(loss - (-np.log(np.e / (np.e + 3.0)))) < 1e-12

    def test_gradient_sums_to_zero(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            _, grad = softmax_cross_entropy(rng.normal(size=4), int(rng.integers(4)))
            assert abs(grad.sum()) < 1e-12

    def test_bad_target_rejected(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(np.zeros(4), 7)

    def test_batched_mean(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(6, 4))
        targets = rng.integers(0, 4, size=6)
        loss, grad = softmax_cross_entropy(logits, targets)
        singles = [softmax_cross_entropy(logits[i], int(targets[i]))[0] for i in range(6)]
        assert abs(loss - np.mean(singles)) < 1e-12
        assert grad.shape == logits.shape

    def test_softmax_normalizes(self):
        p = softmax(np.array([3.0, -1.0, 0.5, 2.0]))
        assert abs(p.sum() - 1.0) < 1e-12


class TestKl:
    def test_standard_is_zero(self):
        assert abs(gaussian_kl_to_standard(np.zeros(16), np.zeros(16))) < 1e-12

    def test_unit_mean_shift(self):
        assert abs(gaussian_kl_to_standard(np.ones(1), np.zeros(1)) - 0.5) < 1e-12

    def test_nonnegative(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            kl = gaussian_kl_to_standard(rng.normal(size=8), rng.normal(size=8))
            assert kl >= 0.0

    def test_zero_only_at_standard(self):
        assert gaussian_kl_to_standard(np.array([1e-3]), np.array([0.0])) > 0.0
        assert gaussian_kl_to_standard(np.array([0.0]), np.array([1e-3])) > 0.0


class TestOrthogonalInit:
    def test_orthogonal_columns(self):
        rng = np.random.default_rng(10)
        w = orthogonal_init(rng, 8, 4, gain=1.0)
        assert np.allclose(w.T @ w, np.eye(4), atol=1e-10)

    def test_gain_scaling(self):
        rng = np.random.default_rng(11)
        w = orthogonal_init(rng, 6, 6, gain=0.01)
        s = np.linalg.svd(w, compute_uv=False)
        assert np.allclose(s, 0.01, atol=1e-12)
