"""Tests for the three-sub-step distillation loop.

Exact identities (zero-init discriminator loss, warmup invariance, zero
learning rate) are asserted tightly; training-dynamics checks (losses
decreasing, teacher pretraining accuracy) run small nets for a bounded number
of steps with fixed seeds.
"""

import copy
import math

import numpy as np
import pytest

from dgs.distill import (
    AnalyticTeacher,
    LearnedTeacher,
    TrainConfig,
    _draw_batch,
    discriminator_step,
    generator_step,
    init_state,
    learning_rate,
    load_train_checkpoint,
    pretrain_teacher,
    sample_sigma,
    sample_t,
    save_train_checkpoint,
    score_model_step,
    train,
)
from dgs.mixtures import effective_observation, ring_2d, single_gaussian, two_mode_1d
from dgs.nets import generator_backward, generator_forward
from dgs.streams import rng_stream

TWO_LN_TWO = 1.3862943611198906
MEDIAN_T = 0.4493289641172216  # exp(-0.8)
GRID_1000_MID = 2.503974358655558  # level 500 of the 1000-level default grid


def tiny_config(**overrides):
    """A configuration small enough for per-test training."""
    base = dict(
        dim=2,
        seed=11,
        batch=32,
        total_images=0,
        hidden_gen=(16, 16),
        hidden_score=(16, 16),
        hidden_disc=(16, 16),
        hidden_unc=16,
        warmup_images=64,
        adv_warmup_images=0,
        teacher_steps=50,
        metric_every=2,
        metric_samples=256,
        metric_projections=16,
    )
    base.update(overrides)
    return TrainConfig(**base)


def params_equal(a, b):
    return set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)


class TestTrainConfig:
    def test_round_trip_through_dict(self):
        config = tiny_config(lr_ref=3e-3, gamma=0.5)
        clone = TrainConfig.from_dict(config.to_dict())
        assert clone == config

    def test_unknown_key_rejected(self):
        data = tiny_config().to_dict()
        data["momentum"] = 0.9
        with pytest.raises(ValueError, match="momentum"):
            TrainConfig.from_dict(data)

    @pytest.mark.parametrize(
        "field, value",
        [
            ("teacher", "tabular"),
            ("batch", 0),
            ("lr_ref", 0.0),
            ("ema_rate", 1.5),
            ("sigma_min", -1.0),
            ("total_images", -1),
        ],
    )
    def test_validation(self, field, value):
        with pytest.raises(ValueError):
            tiny_config(**{field: value})

    def test_sigma_grid_matches_schedule(self):
        config = tiny_config()
        grid = config.sigma_grid()
        assert grid.shape == (1000,)
        assert grid[0] == 80.0
        assert grid[-1] == 0.002
        assert grid[500] == pytest.approx(GRID_1000_MID, abs=1e-12)


class TestSampleT:
    def test_degenerate_spread_collapses_to_median(self):
        config = tiny_config(p_std=1e-12)
        t = sample_t(config, 500, rng_stream(0, "t"))
        assert np.allclose(t, math.exp(config.p_mean), rtol=1e-9)

    def test_median_and_log_mean(self):
        config = tiny_config()
        n = 40_000
        t = sample_t(config, n, rng_stream(1, "t"))
        assert np.all(t > 0)
        se_mean = config.p_std / math.sqrt(n)
        assert abs(np.mean(np.log(t)) - config.p_mean) < 3 * se_mean
        se_median = 1.2533 * config.p_std / math.sqrt(n)
        assert abs(np.median(np.log(t)) - math.log(MEDIAN_T)) < 3 * se_median


class TestSampleSigma:
    def test_values_come_from_the_grid(self):
        config = tiny_config()
        sigma = sample_sigma(config, 5_000, rng_stream(2, "s"))
        assert np.all(np.isin(sigma, config.sigma_grid()))
        assert sigma.max() <= 80.0
        assert sigma.min() >= 0.002

    def test_levels_roughly_uniform(self):
        config = tiny_config()
        sigma = sample_sigma(config, 50_000, rng_stream(3, "s"))
        _, counts = np.unique(sigma, return_counts=True)
        assert counts.size > 990  # nearly every level hit at 50x coverage
        assert counts.max() < 110


class TestLearningRate:
    def test_zero_images_zero_rate(self):
        assert learning_rate(tiny_config(), 0) == 0.0

    def test_end_of_warmup_hits_reference(self):
        config = tiny_config(lr_ref=0.02, warmup_images=1_000, batch=100, t_ref=50)
        assert learning_rate(config, 1_000) == pytest.approx(0.02, abs=0.0)

    def test_inverse_sqrt_decay(self):
        config = tiny_config(lr_ref=0.02, warmup_images=1_000, batch=100, t_ref=50)
        images = 4 * config.t_ref * config.batch
        assert learning_rate(config, images) == pytest.approx(0.01, abs=1e-15)

    def test_nonincreasing_after_warmup(self):
        config = tiny_config(lr_ref=0.02, warmup_images=1_000, batch=100, t_ref=50)
        grid = np.arange(1_000, 60_000, 500)
        rates = [learning_rate(config, int(i)) for i in grid]
        assert all(b <= a + 1e-15 for a, b in zip(rates, rates[1:]))

    def test_negative_images_rejected(self):
        with pytest.raises(ValueError):
            learning_rate(tiny_config(), -1)


class TestBatchDraw:
    def test_deterministic_and_consistent(self):
        config = tiny_config()
        gmm = ring_2d()
        a = _draw_batch(config, gmm, step=7)
        b = _draw_batch(config, gmm, step=7)
        assert np.array_equal(a.x0, b.x0)
        assert np.array_equal(a.sigma, b.sigma)
        assert np.array_equal(a.y, b.y)
        assert not np.array_equal(a.x0, _draw_batch(config, gmm, step=8).x0)

    def test_observation_consistent_with_level(self):
        config = tiny_config(batch=4_000)
        gmm = single_gaussian([0.0, 0.0], np.eye(2))
        batch = _draw_batch(config, gmm, step=0)
        resid = (batch.y - batch.x0) / batch.sigma[:, None]
        assert abs(np.mean(resid)) < 3 / math.sqrt(batch.y.size)
        assert np.std(resid) == pytest.approx(1.0, abs=0.05)


class TestPretrainTeacher:
    def test_single_gaussian_report_passes(self):
        gmm = single_gaussian([0.3, -0.2], 0.25 * np.eye(2))
        config = tiny_config(teacher_steps=2_000, batch=128, hidden_score=(64, 64), teacher_lr=5e-3)
        net, params, report = pretrain_teacher(config, gmm)
        assert report["holdout_rmse"] < config.teacher_threshold
        assert report["passed"] is True
        assert report["steps"] == 2_000

    def test_large_sigma_returns_prior_mean(self):
        gmm = single_gaussian([0.3, -0.2], 0.25 * np.eye(2))
        config = tiny_config(teacher_steps=2_000, batch=128, hidden_score=(64, 64), teacher_lr=5e-3)
        net, params, _ = pretrain_teacher(config, gmm)
        y = 80.0 * rng_stream(4, "far").standard_normal((64, 2))
        pred = net.forward(params, y, 80.0)
        scale = math.sqrt(np.trace(gmm.covariance()) / 2)
        assert np.max(np.abs(pred - gmm.mean())) < 0.3 * scale

    def test_failure_is_reported_not_raised(self):
        gmm = ring_2d()
        config = tiny_config(teacher_steps=5)
        _, _, report = pretrain_teacher(config, gmm)
        assert report["passed"] is False
        assert report["holdout_rmse"] > config.teacher_threshold


class TestInitState:
    def test_analytic_teacher_by_default(self):
        config = tiny_config()
        state = init_state(config, ring_2d())
        assert isinstance(state.teacher, AnalyticTeacher)
        assert state.step == 0
        assert state.images_seen == 0
        assert params_equal(state.theta, state.theta_ema)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError, match="dimension"):
            init_state(tiny_config(dim=2), two_mode_1d())

    def test_learned_teacher_seeds_score_trunk(self):
        config = tiny_config(teacher="learned", teacher_steps=40)
        state = init_state(config, ring_2d())
        assert isinstance(state.teacher, LearnedTeacher)
        for key, value in state.teacher.params.items():
            assert np.array_equal(state.phi[key], value)
        # conditioning branch exists on top of the copied trunk
        assert any(key.startswith("c0.") for key in state.phi)


class TestScoreModelStep:
    def test_zero_learning_rate_is_a_no_op(self):
        config = tiny_config()
        state = init_state(config, ring_2d())
        before = copy.deepcopy(state.phi)
        batch = _draw_batch(config, ring_2d(), 0)
        loss = score_model_step(state, config, batch, rng_stream(0, "s"), lr=0.0)
        assert np.isfinite(loss)
        assert params_equal(state.phi, before)

    def test_overfits_a_frozen_regression_problem(self):
        # replaying the same stream turns the step into deterministic
        # regression on 32 fixed points, which a correct gradient must crush
        config = tiny_config()
        gmm = ring_2d()
        state = init_state(config, gmm)
        batch = _draw_batch(config, gmm, 0)
        losses = [
            score_model_step(state, config, batch, rng_stream(0, "fit"), lr=1e-2)
            for _ in range(150)
        ]
        assert np.mean(losses[-10:]) < 0.01 * np.mean(losses[:10])

    def test_only_phi_changes(self):
        config = tiny_config()
        state = init_state(config, ring_2d())
        theta, psi, lam = (copy.deepcopy(p) for p in (state.theta, state.psi, state.lam))
        score_model_step(state, config, _draw_batch(config, ring_2d(), 0), rng_stream(0, "s"), lr=1e-3)
        assert params_equal(state.theta, theta)
        assert params_equal(state.psi, psi)
        assert params_equal(state.lam, lam)


class TestDiscriminatorStep:
    def test_zero_init_loss_is_two_log_two(self):
        config = tiny_config()
        state = init_state(config, ring_2d())
        batch = _draw_batch(config, ring_2d(), 0)
        loss = discriminator_step(state, config, batch, rng_stream(0, "d"), lr=0.0)
        assert loss == pytest.approx(TWO_LN_TWO, abs=1e-12)

    def test_training_beats_coin_flipping(self):
        config = tiny_config()
        gmm = ring_2d()
        state = init_state(config, gmm)
        losses = [
            discriminator_step(state, config, _draw_batch(config, gmm, k), rng_stream(0, "dfit", k), lr=1.0)
            for k in range(80)
        ]
        assert np.mean(losses[-10:]) < TWO_LN_TWO - 0.05

    def test_saturated_logits_stay_bounded(self):
        config = tiny_config()
        state = init_state(config, ring_2d())
        state.psi["head.W"] = 1e4 * np.ones_like(state.psi["head.W"])
        state.psi["head.b"] = 1e4 * np.ones_like(state.psi["head.b"])
        batch = _draw_batch(config, ring_2d(), 0)
        loss = discriminator_step(state, config, batch, rng_stream(0, "d"), lr=1e-3)
        assert np.isfinite(loss)
        assert loss <= 30.001  # clamped logits cap the per-sample loss near 30


class TestGeneratorStep:
    def test_single_sample_loss_assembled_by_hand(self):
        config = tiny_config(batch=1)
        gmm = ring_2d()
        state = init_state(config, gmm)
        batch = _draw_batch(config, gmm, 0)
        loss, w_mean = generator_step(state, config, batch, rng_stream(0, "g"), lr=0.0, adversarial=False)

        rng = rng_stream(0, "g")
        t = sample_t(config, 1, rng)
        z = rng.standard_normal((1, 2))
        eps = rng.standard_normal((1, 2))
        x_theta = generator_forward(state.gen_net, state.theta, batch.y, batch.sigma, z, config.gamma)
        x_tilde = x_theta + t[:, None] * eps
        y_eff, sigma_eff = effective_observation(batch.y, batch.sigma, x_tilde, t)
        resid = state.score_net.forward(state.phi, x_tilde, t, cond=(batch.y, batch.sigma))
        resid = resid - gmm.posterior_mean(y_eff, sigma_eff)
        w = state.unc_net.forward(state.lam, t)
        expected = float(np.exp(-w[0]) * np.sum(resid**2) + 2 * w[0])
        assert loss == pytest.approx(expected, rel=1e-12)
        assert w_mean == pytest.approx(float(np.mean(w)), abs=1e-15)

    def test_uncertainty_starts_at_zero(self):
        config = tiny_config()
        state = init_state(config, ring_2d())
        w = state.unc_net.forward(state.lam, np.array([0.1, 1.0, 10.0]))
        assert np.array_equal(w, np.zeros(3))

    def test_warmup_ignores_discriminator_entirely(self):
        config = tiny_config()
        gmm = ring_2d()
        state_a = init_state(config, gmm)
        state_b = copy.deepcopy(state_a)
        for key in state_b.psi:
            state_b.psi[key] = state_b.psi[key] + rng_stream(5, key).standard_normal(state_b.psi[key].shape)
        batch = _draw_batch(config, gmm, 0)
        generator_step(state_a, config, batch, rng_stream(0, "g"), lr=1e-2, adversarial=False)
        generator_step(state_b, config, batch, rng_stream(0, "g"), lr=1e-2, adversarial=False)
        assert params_equal(state_a.theta, state_b.theta)
        assert params_equal(state_a.lam, state_b.lam)

    def test_undecided_discriminator_adds_exactly_dim_log_two(self):
        # the zero-initialized head makes C = 1/2 with zero input gradient, so
        # switching the adversarial term on changes the loss by dim*log 2 and
        # the parameter update not at all
        config = tiny_config()
        gmm = ring_2d()
        state_a = init_state(config, gmm)
        state_b = copy.deepcopy(state_a)
        batch = _draw_batch(config, gmm, 0)
        loss_off, _ = generator_step(state_a, config, batch, rng_stream(0, "g"), lr=1e-2, adversarial=False)
        loss_on, _ = generator_step(state_b, config, batch, rng_stream(0, "g"), lr=1e-2, adversarial=True)
        assert loss_on - loss_off == pytest.approx(2 * math.log(2), rel=1e-12)
        assert params_equal(state_a.theta, state_b.theta)

    def test_gradient_matches_finite_differences_with_frozen_target(self):
        config = tiny_config(batch=4, hidden_gen=(8, 8))
        gmm = ring_2d()
        state = init_state(config, gmm)
        for key in state.theta:  # move off the zero init so gradients are generic
            state.theta[key] = state.theta[key] + 0.05 * rng_stream(6, key).standard_normal(state.theta[key].shape)
        batch = _draw_batch(config, gmm, 0)
        rng = rng_stream(0, "g")
        sample_t(config, 4, rng)
        z = rng.standard_normal((4, 2))
        target = gmm.sample(4, rng_stream(1, "target"))

        def loss_of(params):
            x = generator_forward(state.gen_net, params, batch.y, batch.sigma, z, config.gamma)
            return float(np.sum((x - target) ** 2))

        x_theta, cache = generator_forward(
            state.gen_net, state.theta, batch.y, batch.sigma, z, config.gamma, want_cache=True
        )
        grads = generator_backward(state.gen_net, state.theta, cache, 2.0 * (x_theta - target))
        h = 1e-6
        for key in grads:
            flat_grad = np.atleast_1d(np.asarray(grads[key], dtype=float)).ravel()
            for idx in range(flat_grad.size):
                bumped = {k: np.array(v, dtype=float, copy=True) for k, v in state.theta.items()}
                flat = np.atleast_1d(bumped[key]).reshape(-1)
                flat[idx] += h
                up = loss_of(bumped)
                flat[idx] -= 2 * h
                down = loss_of(bumped)
                fd = (up - down) / (2 * h)
                assert fd == pytest.approx(flat_grad[idx], rel=5e-4, abs=5e-6), f"{key}[{idx}]"

    def test_ema_tracks_generator(self):
        config = tiny_config(ema_rate=0.5)
        gmm = ring_2d()
        state = init_state(config, gmm)
        before = copy.deepcopy(state.theta_ema)
        generator_step(state, config, _draw_batch(config, gmm, 0), rng_stream(0, "g"), lr=1e-2, adversarial=False)
        for key in before:
            expected = 0.5 * before[key] + 0.5 * state.theta[key]
            assert np.allclose(state.theta_ema[key], expected, atol=1e-15)


class TestTrainLoop:
    def test_zero_budget_returns_untrained_state(self):
        config = tiny_config(total_images=0)
        state, metrics = train(config, ring_2d())
        assert metrics == []
        assert state.step == 0
        assert state.images_seen == 0

    def test_deterministic_reruns(self):
        config = tiny_config(total_images=32 * 6)
        state_a, metrics_a = train(config, ring_2d())
        state_b, metrics_b = train(config, ring_2d())
        assert params_equal(state_a.theta, state_b.theta)
        assert params_equal(state_a.phi, state_b.phi)
        assert params_equal(state_a.psi, state_b.psi)
        assert metrics_a == metrics_b

    def test_metric_cadence_and_finiteness(self):
        config = tiny_config(total_images=32 * 6, metric_every=3)
        state, metrics = train(config, ring_2d())
        assert [row["step"] for row in metrics] == [3, 6]
        for row in metrics:
            assert set(row) == {
                "step", "images_seen", "loss_gen", "loss_score", "loss_disc", "w_lambda_mean", "swd_1step",
            }
            assert all(np.isfinite(v) for v in row.values())
        assert len(state.telemetry) == 6

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        gmm = ring_2d()
        full = tiny_config(total_images=32 * 8, metric_every=4)
        state_full, metrics_full = train(full, gmm)

        half = tiny_config(total_images=32 * 4, metric_every=4)
        state_half, metrics_half = train(half, gmm)
        path = tmp_path / "half.npz"
        save_train_checkpoint(path, state_half, half)
        resumed, config_loaded = load_train_checkpoint(path, gmm)
        assert resumed.step == 4
        state_res, metrics_res = train(full, gmm, state=resumed)

        assert params_equal(state_full.theta, state_res.theta)
        assert params_equal(state_full.theta_ema, state_res.theta_ema)
        assert params_equal(state_full.phi, state_res.phi)
        assert params_equal(state_full.psi, state_res.psi)
        assert metrics_half + metrics_res == metrics_full

    def test_crash_writes_checkpoint_and_reraises(self, tmp_path):
        gmm = ring_2d()
        config = tiny_config(total_images=32 * 10)

        class SabotagedTeacher(AnalyticTeacher):
            calls = 0

            def denoise(self, x, sigma):
                type(self).calls += 1
                if type(self).calls > 3:
                    return np.full_like(np.asarray(x, dtype=float), np.nan)
                return super().denoise(x, sigma)

        path = tmp_path / "crash.npz"
        with pytest.raises(FloatingPointError, match="crash checkpoint"):
            train(config, gmm, teacher=SabotagedTeacher(gmm), crash_path=path)
        assert path.exists()
        state, loaded = load_train_checkpoint(path, gmm)
        assert loaded == config
        assert state.step >= 2  # the first steps before sabotage completed
