"""Tests for the manual-gradient network stack.

Every backward pass is compared against central finite differences; optimizer
and averaging updates are checked against hand-computed constants.
"""

import numpy as np
import pytest

from dgs.nets import (
    CHECKPOINT_VERSION,
    LOGIT_CLAMP,
    AdamState,
    DenoiserNet,
    DiscriminatorNet,
    ScalarNet,
    adam_init,
    adam_step,
    ema_init,
    ema_update,
    generator_backward,
    generator_forward,
    load_checkpoint,
    mp_sum,
    noise_features,
    precondition,
    save_checkpoint,
)
from dgs.streams import rng_stream

from _gradcheck import assert_grads_close, fd_input_grad, fd_param_grads

# Hand-computed: p=1, g=0.5, lr=0.01, beta1=0.9, beta2=0.99, eps=1e-8.
# m=0.05, v=0.0025, mhat=0.5, vhat=0.25, step=0.01*0.5/(0.5+1e-8).
ADAM_FIRST_STEP_RESULT = 0.99000000020000001
# beta1=beta2=0 collapses to a sign step of size lr*|g|/(|g|+eps).
ADAM_SIGN_STEP = 0.0099999998000000027
# Shadow starting at 0 chasing a constant 1.0 for 1000 updates at beta=0.999.
EMA_GEOMETRIC_1000 = 0.63230457522903627


def _jitter(params, rng, scale=0.2):
    """Randomize parameters (incl. zero-initialized heads) for gradient checks."""
    return {k: np.asarray(v, dtype=float) + scale * rng.standard_normal(np.shape(v)) for k, v in params.items()}


class TestMpSum:
    def test_w_zero_returns_first(self):
        a, b = np.arange(4.0), np.ones(4)
        np.testing.assert_array_equal(mp_sum(a, b, 0.0), a)

    def test_w_one_returns_second(self):
        a, b = np.arange(4.0), np.full(4, 2.0)
        np.testing.assert_array_equal(mp_sum(a, b, 1.0), b)

    def test_w_half_is_scaled_average(self):
        a, b = np.array([1.0, -2.0]), np.array([0.5, 4.0])
        np.testing.assert_allclose(mp_sum(a, b, 0.5), (a + b) / np.sqrt(2.0), rtol=1e-15)

    @pytest.mark.parametrize("w", [0.1, 0.3, 0.5, 0.8])
    def test_preserves_unit_variance(self, w):
        """Independent unit-variance inputs stay unit variance for any w."""
        rng = rng_stream(31, "mpsum", int(w * 10))
        a = rng.standard_normal(100_000)
        b = rng.standard_normal(100_000)
        var = mp_sum(a, b, w).var()
        assert abs(var - 1.0) < 0.02


class TestPrecondition:
    def test_at_data_scale(self):
        c_skip, c_out, c_in, c_noise = precondition(0.5, sigma_data=0.5)
        assert c_skip == 0.5
        np.testing.assert_allclose(c_out, 0.5 / np.sqrt(2.0), rtol=1e-15)
        np.testing.assert_allclose(c_in, 1.0 / (0.5 * np.sqrt(2.0)), rtol=1e-15)
        np.testing.assert_allclose(c_noise, 0.25 * np.log(0.5), rtol=1e-15)

    def test_low_noise_limits(self):
        c_skip, c_out, _, _ = precondition(1e-8)
        np.testing.assert_allclose(c_skip, 1.0, atol=1e-14)
        np.testing.assert_allclose(c_out, 1e-8, rtol=1e-6)

    def test_input_scaling_normalizes_variance(self):
        for sigma in (0.01, 0.5, 7.0, 80.0):
            _, _, c_in, _ = precondition(sigma, sigma_data=0.5)
            np.testing.assert_allclose(c_in**2 * (sigma**2 + 0.25), 1.0, rtol=1e-12)

    def test_noise_features_shape_and_first_column(self):
        u = np.array([-1.0, 0.3])
        feats = noise_features(u, n_freq=4)
        assert feats.shape == (2, 9)
        np.testing.assert_array_equal(feats[:, 0], u)


class TestDenoiserNet:
    def test_zero_initialized_output_is_skip_path(self):
        net = DenoiserNet(dim=3, hidden=(16, 16))
        params = net.init(rng_stream(0, "init"))
        x = rng_stream(1, "x").standard_normal((5, 3))
        out = net.forward(params, x, 0.7)
        c_skip, _, _, _ = precondition(0.7)
        np.testing.assert_allclose(out, c_skip * x, atol=1e-15)

    def test_scalar_sigma_broadcasts_like_vector(self):
        net = DenoiserNet(dim=2, hidden=(8,))
        params = _jitter(net.init(rng_stream(2, "bc")), rng_stream(3, "bc"))
        x = rng_stream(4, "bc").standard_normal((6, 2))
        a = net.forward(params, x, 0.9)
        b = net.forward(params, x, np.full(6, 0.9))
        np.testing.assert_array_equal(a, b)

    def test_single_point_squeezes(self):
        net = DenoiserNet(dim=2, hidden=(8,))
        params = net.init(rng_stream(5, "sq"))
        out = net.forward(params, np.array([0.1, -0.2]), 1.1)
        assert out.shape == (2,)

    def test_conditional_requires_cond(self):
        net = DenoiserNet(dim=1, hidden=(4,), conditional=True)
        params = net.init(rng_stream(6, "cc"))
        with pytest.raises(ValueError, match="cond"):
            net.forward(params, np.zeros((2, 1)), 0.5)
        plain = DenoiserNet(dim=1, hidden=(4,))
        with pytest.raises(ValueError, match="unconditional"):
            plain.forward(plain.init(rng_stream(7, "cc")), np.zeros((2, 1)), 0.5, cond=(np.zeros((2, 1)), 0.5))

    def test_merge_weights_start_almost_silent(self):
        net = DenoiserNet(dim=2, hidden=(8, 8), conditional=True)
        w = net.merge_weights(net.init(rng_stream(8, "mw")))
        assert w.shape == (2,)
        assert np.all(w > 0.0) and np.all(w < 0.02)

    @pytest.mark.parametrize("conditional", [False, True])
    @pytest.mark.parametrize("case", range(3))
    def test_backward_matches_finite_differences(self, conditional, case):
        rng = rng_stream(40, "fd", int(conditional), case)
        dim = int(rng.integers(1, 4))
        net = DenoiserNet(dim=dim, hidden=(7, 5), n_freq=2, conditional=conditional)
        params = _jitter(net.init(rng), rng)
        n = 4
        x = rng.standard_normal((n, dim))
        sigma = rng.uniform(0.1, 3.0, size=n)
        cond = (rng.standard_normal((n, dim)), rng.uniform(0.1, 3.0, size=n)) if conditional else None
        r = rng.standard_normal((n, dim))

        def loss(p):
            return float(np.sum(net.forward(p, x, sigma, cond=cond) * r))

        out, cache = net.forward(params, x, sigma, cond=cond, want_cache=True)
        grads, dx = net.backward(params, cache, r)
        assert_grads_close(grads, fd_param_grads(loss, params), "denoiser")
        assert_grads_close(dx, fd_input_grad(lambda q: float(np.sum(net.forward(params, q, sigma, cond=cond) * r)), x), "denoiser/dx")

    def test_init_is_deterministic(self):
        net = DenoiserNet(dim=2, hidden=(8, 8), conditional=True)
        a = net.init(rng_stream(9, "det"))
        b = net.init(rng_stream(9, "det"))
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])


class TestGeneratorForward:
    def _net_and_params(self, dim=2):
        net = DenoiserNet(dim=dim, hidden=(7, 6), n_freq=2, conditional=True)
        rng = rng_stream(50, "gen", dim)
        return net, _jitter(net.init(rng), rng)

    def test_gamma_zero_consumes_no_noise(self):
        net, params = self._net_and_params()
        y = rng_stream(51, "y").standard_normal((4, 2))
        z = rng_stream(52, "z").standard_normal((4, 2))
        out = generator_forward(net, params, y, 0.8, z, gamma=0.0)
        direct = net.forward(params, y, 0.8, cond=(y, 0.8))
        np.testing.assert_array_equal(out, direct)

    def test_root_two_gamma_widens_by_sigma(self):
        """gamma = sqrt(2)-1 makes the added noise scale exactly sigma."""
        net, params = self._net_and_params()
        y = rng_stream(53, "y").standard_normal((4, 2))
        z = rng_stream(54, "z").standard_normal((4, 2))
        sigma = 0.6
        gamma = np.sqrt(2.0) - 1.0
        out = generator_forward(net, params, y, sigma, z, gamma=gamma)
        manual = net.forward(params, y + sigma * z, (1.0 + gamma) * sigma, cond=(y, sigma))
        np.testing.assert_allclose(out, manual, atol=1e-12)

    def test_distinct_latents_move_output(self):
        net, params = self._net_and_params()
        y = np.zeros((1, 2))
        out1 = generator_forward(net, params, y, 0.5, np.array([[1.0, 0.0]]), gamma=0.414)
        out2 = generator_forward(net, params, y, 0.5, np.array([[-1.0, 0.5]]), gamma=0.414)
        assert not np.allclose(out1, out2)

    def test_backward_matches_finite_differences(self):
        net, params = self._net_and_params(dim=1)
        rng = rng_stream(55, "fd")
        y = rng.standard_normal((3, 1))
        z = rng.standard_normal((3, 1))
        sigma = rng.uniform(0.2, 2.0, size=3)
        r = rng.standard_normal((3, 1))

        def loss(p):
            return float(np.sum(generator_forward(net, p, y, sigma, z, gamma=0.414) * r))

        _, cache = generator_forward(net, params, y, sigma, z, gamma=0.414, want_cache=True)
        grads = generator_backward(net, params, cache, r)
        assert_grads_close(grads, fd_param_grads(loss, params), "generator")

    def test_negative_gamma_rejected(self):
        net, params = self._net_and_params()
        with pytest.raises(ValueError):
            generator_forward(net, params, np.zeros((1, 2)), 0.5, np.zeros((1, 2)), gamma=-0.1)


class TestDiscriminator:
    def test_fresh_net_is_undecided(self):
        net = DiscriminatorNet(dim=2, hidden=(8, 8))
        params = net.init(rng_stream(60, "disc"))
        p = net.forward(params, np.ones((3, 2)), 0.5, np.zeros((3, 2)), 1.0)
        np.testing.assert_array_equal(p, np.full(3, 0.5))

    def test_probability_strictly_inside_unit_interval(self):
        net = DiscriminatorNet(dim=1, hidden=(4,))
        params = net.init(rng_stream(61, "clamp"))
        params["head.W"] = np.full_like(params["head.W"], 100.0)
        params["head.b"] = np.array([500.0])
        p = net.forward(params, np.ones((8, 1)), 0.3, np.ones((8, 1)), 0.3)
        assert np.all(p > 0.0) and np.all(p < 1.0)
        # Bounded loss even for a maximally confident mistake, both terms.
        worst = -np.log(1.0 - np.max(p)) - np.log(np.min(p) + (1 - 1))
        assert worst <= 2 * (LOGIT_CLAMP + 1e-6)

    def test_clamped_region_has_zero_gradient(self):
        net = DiscriminatorNet(dim=1, hidden=(4,))
        params = net.init(rng_stream(62, "clampg"))
        params["head.W"] = np.full_like(params["head.W"], 100.0)
        params["head.b"] = np.array([500.0])
        _, cache = net.forward(params, np.ones((2, 1)), 0.3, np.ones((2, 1)), 0.3, want_cache=True)
        grads, dx = net.backward(params, cache, np.ones(2))
        assert all(np.all(g == 0.0) for g in grads.values())
        assert np.all(dx == 0.0)

    @pytest.mark.parametrize("case", range(3))
    def test_backward_matches_finite_differences(self, case):
        rng = rng_stream(63, "fd", case)
        dim = int(rng.integers(1, 4))
        net = DiscriminatorNet(dim=dim, hidden=(6, 5), n_freq=2)
        params = _jitter(net.init(rng), rng)
        n = 4
        x = rng.standard_normal((n, dim))
        t = rng.uniform(0.1, 3.0, size=n)
        y = rng.standard_normal((n, dim))
        sigma = rng.uniform(0.1, 3.0, size=n)
        r = rng.standard_normal(n)

        def loss(p):
            return float(np.sum(net.logits(p, x, t, y, sigma) * r))

        _, cache = net.forward(params, x, t, y, sigma, want_cache=True)
        grads, dx = net.backward(params, cache, r)
        assert_grads_close(grads, fd_param_grads(loss, params), "discriminator")
        assert_grads_close(
            dx,
            fd_input_grad(lambda q: float(np.sum(net.logits(params, q, t, y, sigma) * r)), x),
            "discriminator/dx",
        )


class TestScalarNet:
    def test_starts_at_zero(self):
        net = ScalarNet(hidden=16)
        params = net.init(rng_stream(70, "sc"))
        np.testing.assert_array_equal(net.forward(params, np.array([0.1, 1.0, 10.0])), np.zeros(3))

    def test_backward_matches_finite_differences(self):
        net = ScalarNet(hidden=5)
        rng = rng_stream(71, "scfd")
        params = _jitter(net.init(rng), rng)
        t = rng.uniform(0.05, 5.0, size=6)
        r = rng.standard_normal(6)

        def loss(p):
            return float(np.sum(net.forward(p, t) * r))

        _, cache = net.forward(params, t, want_cache=True)
        grads = net.backward(params, cache, r)
        assert_grads_close(grads, fd_param_grads(loss, params), "scalar")

    def test_rejects_nonpositive_t(self):
        net = ScalarNet(hidden=4)
        with pytest.raises(ValueError):
            net.forward(net.init(rng_stream(72, "bad")), np.array([0.0]))


class TestAdam:
    def test_zero_gradient_is_identity(self):
        params = {"w": np.array([1.0, -2.0])}
        state = adam_init(params)
        out = adam_step(params, {"w": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_array_equal(out["w"], params["w"])

    def test_first_step_matches_hand_computation(self):
        params = {"w": np.array([1.0])}
        state = adam_init(params)
        out = adam_step(params, {"w": np.array([0.5])}, state, lr=0.01, beta1=0.9, beta2=0.99)
        np.testing.assert_allclose(out["w"][0], ADAM_FIRST_STEP_RESULT, rtol=1e-15)
        assert state.step == 1

    def test_zero_betas_give_sign_step(self):
        params = {"w": np.array([0.0])}
        state = adam_init(params)
        out = adam_step(params, {"w": np.array([0.5])}, state, lr=0.01, beta1=0.0, beta2=0.0)
        np.testing.assert_allclose(-out["w"][0], ADAM_SIGN_STEP, rtol=1e-15)

    def test_key_mismatch_raises(self):
        params = {"w": np.zeros(1)}
        with pytest.raises(KeyError):
            adam_step(params, {"q": np.zeros(1)}, adam_init(params), lr=0.1)

    def test_moments_accumulate_across_steps(self):
        params = {"w": np.array([0.0])}
        state = adam_init(params)
        g = {"w": np.array([1.0])}
        p1 = adam_step(params, g, state, lr=0.001)
        p2 = adam_step(p1, g, state, lr=0.001)
        assert state.step == 2
        assert p2["w"][0] < p1["w"][0] < 0.0


class TestEma:
    def test_beta_one_freezes(self):
        shadow = {"w": np.array([3.0])}
        out = ema_update(shadow, {"w": np.array([99.0])}, beta=1.0)
        np.testing.assert_array_equal(out["w"], shadow["w"])

    def test_beta_zero_copies(self):
        shadow = {"w": np.array([3.0])}
        out = ema_update(shadow, {"w": np.array([99.0])}, beta=0.0)
        np.testing.assert_array_equal(out["w"], [99.0])

    def test_geometric_series_after_thousand_updates(self):
        shadow = {"w": np.array([0.0])}
        target = {"w": np.array([1.0])}
        for _ in range(1000):
            shadow = ema_update(shadow, target, beta=0.999)
        np.testing.assert_allclose(shadow["w"][0], EMA_GEOMETRIC_1000, rtol=1e-12)

    def test_rejects_bad_beta(self):
        with pytest.raises(ValueError):
            ema_update({"w": np.zeros(1)}, {"w": np.zeros(1)}, beta=1.5)

    def test_init_copies(self):
        params = {"w": np.array([1.0])}
        shadow = ema_init(params)
        params["w"][0] = 5.0
        assert shadow["w"][0] == 1.0


class TestCheckpoint:
    def test_round_trip_is_exact(self, tmp_path):
        net = DenoiserNet(dim=2, hidden=(8, 8), conditional=True)
        params = _jitter(net.init(rng_stream(80, "ckpt")), rng_stream(81, "ckpt"))
        state = adam_init(params)
        adam_step(params, {k: np.ones_like(v) for k, v in params.items()}, state, lr=0.01)
        meta = {"images_seen": 1234, "seed": 7, "net": net.describe()}
        path = tmp_path / "model.npz"
        save_checkpoint(path, {"gen": params, "gen_ema": params}, meta, adam={"gen": state})
        nets, got_meta, got_adam = load_checkpoint(path)
        assert got_meta == meta
        assert set(nets) == {"gen", "gen_ema"}
        for k in params:
            np.testing.assert_array_equal(nets["gen"][k], params[k])
            np.testing.assert_array_equal(got_adam["gen"].m[k], state.m[k])
        assert got_adam["gen"].step == 1

    def test_rejects_unknown_version(self, tmp_path):
        import json

        path = tmp_path / "bad.npz"
        np.savez(path, __meta__=np.array(json.dumps({"version": 999, "meta": {}})))
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "foreign.npz"
        np.savez(path, stuff=np.zeros(3))
        with pytest.raises(ValueError, match="checkpoint"):
            load_checkpoint(path)
