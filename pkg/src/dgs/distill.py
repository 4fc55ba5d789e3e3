"""Distilling a denoising diffusion teacher into a one-step generative denoiser.

One outer iteration draws a shared batch of (x0, sigma, y_sigma) and applies
three sub-steps in order:

1. score-model step: regress the auxiliary denoiser D_phi onto fresh
   generator outputs diffused to a random level t, so D_phi tracks the score
   of the *current* generator's conditional output distribution;
2. discriminator step: push real pairs (x0 + t eps | y_sigma) up and fake
   pairs (x_theta + t eps | y_sigma) down;
3. generator step: move the generator along the reverse-KL direction
   (teacher score minus generator score, assembled in denoiser-output space
   as a stop-gradient L2 target), with a learned per-t uncertainty weight and
   an optional adversarial term that is excluded entirely during warmup,
   then refresh the EMA copy.

All randomness is drawn from counter-based streams keyed on
(seed, "train", step, substep), so runs are reproducible bit for bit and a
resumed run continues exactly where the interrupted one would have gone.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .metrics import sliced_wasserstein
from .mixtures import GaussianMixture, effective_observation
from .nets import (
    AdamState,
    DenoiserNet,
    DiscriminatorNet,
    Params,
    ScalarNet,
    adam_init,
    adam_step,
    ema_init,
    ema_update,
    generator_backward,
    generator_forward,
    precondition,
    save_checkpoint,
)
from .sampling import GeneratorDenoiser, SamplerConfig, edm_schedule, unconditional_sample
from .streams import rng_stream

__all__ = [
    "TrainConfig",
    "TrainState",
    "AnalyticTeacher",
    "LearnedTeacher",
    "sample_t",
    "sample_sigma",
    "learning_rate",
    "pretrain_teacher",
    "init_state",
    "score_model_step",
    "discriminator_step",
    "generator_step",
    "train",
    "save_train_checkpoint",
    "load_train_checkpoint",
]


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for the distillation run.

    The t distribution is LogNormal(p_mean, p_std^2); sigma is drawn
    uniformly from an (grid_n, sigma_min, sigma_max, rho) annealing grid.
    ``lr_ref`` is the peak learning rate reached after ``warmup_images`` and
    decayed as 1/sqrt(k/t_ref) in optimizer steps k past ``t_ref``;
    ``lr_scale_gen``/``lr_scale_disc`` multiply it for the generator (plus
    uncertainty head) and the discriminator. The adversarial term enters the
    generator loss only once ``adv_warmup_images`` samples have been seen.
    """

    dim: int = 2
    seed: int = 0
    batch: int = 256
    total_images: int = 1_536_000
    # t distribution
    p_mean: float = -0.8
    p_std: float = 1.6
    # sigma grid
    grid_n: int = 1000
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    # optimization
    lr_ref: float = 2e-2
    t_ref: int = 2_000
    warmup_images: int = 10_000
    adv_warmup_images: int = 200_000
    lr_scale_gen: float = 0.01
    lr_scale_disc: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    gamma: float = 0.414
    ema_rate: float = 0.999
    # architectures
    hidden_gen: tuple = (64, 64, 64)
    hidden_score: tuple = (64, 64, 64)
    hidden_disc: tuple = (64, 64)
    hidden_unc: int = 64
    sigma_data: float = 0.5
    # teacher
    teacher: str = "analytic"
    teacher_steps: int = 4_000
    teacher_lr: float = 2e-3
    teacher_threshold: float = 0.05
    # telemetry
    metric_every: int = 500
    metric_samples: int = 4_096
    metric_projections: int = 128

    def __post_init__(self):
        if self.teacher not in ("analytic", "learned"):
            raise ValueError("teacher must be 'analytic' or 'learned'")
        if not (0.0 < self.sigma_min < self.sigma_max):
            raise ValueError("need 0 < sigma_min < sigma_max")
        for name in ("dim", "batch", "grid_n", "t_ref", "teacher_steps", "metric_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("p_std", "lr_ref", "gamma", "rho", "lr_scale_gen", "lr_scale_disc", "teacher_lr"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        for name in ("total_images", "warmup_images", "adv_warmup_images"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not (0.0 <= self.ema_rate <= 1.0):
            raise ValueError("ema_rate must lie in [0, 1]")

    def sigma_grid(self) -> np.ndarray:
        return edm_schedule(self.grid_n, self.sigma_min, self.sigma_max, self.rho).levels

    def to_dict(self) -> dict:
        out = {}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            out[name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        fixed = {k: tuple(v) if isinstance(cls.__dataclass_fields__[k].default, tuple) else v for k, v in data.items()}
        return cls(**fixed)


class AnalyticTeacher:
    """Exact posterior-mean denoiser over a known Gaussian mixture."""

    kind = "analytic"

    def __init__(self, gmm: GaussianMixture):
        self.gmm = gmm

    def denoise(self, x, sigma):
        return self.gmm.posterior_mean(x, sigma)


class LearnedTeacher:
    """A pretrained unconditional denoiser network standing in for the oracle."""

    kind = "learned"

    def __init__(self, net: DenoiserNet, params: Params):
        if net.conditional:
            raise ValueError("the teacher denoiser is unconditional")
        self.net = net
        self.params = params

    def denoise(self, x, sigma):
        return self.net.forward(self.params, x, sigma)


@dataclass
class TrainState:
    """Everything the loop mutates: nets, optimizers, counters, telemetry."""

    gen_net: DenoiserNet
    score_net: DenoiserNet
    disc_net: DiscriminatorNet
    unc_net: ScalarNet
    theta: Params
    theta_ema: Params
    phi: Params
    psi: Params
    lam: Params
    adam_theta: AdamState
    adam_phi: AdamState
    adam_psi: AdamState
    adam_lam: AdamState
    teacher: object
    gmm: GaussianMixture
    images_seen: int = 0
    step: int = 0
    telemetry: deque = field(default_factory=lambda: deque(maxlen=512))

    def assert_finite(self) -> None:
        for name, params in (("gen", self.theta), ("ema", self.theta_ema), ("score", self.phi),
                             ("disc", self.psi), ("unc", self.lam)):
            for key, value in params.items():
                if not np.all(np.isfinite(value)):
                    raise FloatingPointError(f"non-finite parameter {key!r} in {name} net after step {self.step}")


# ----------------------------------------------------------------------
# noise draws and schedules


def sample_t(config: TrainConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """Diffusion times with log t ~ N(p_mean, p_std^2)."""
    return np.exp(config.p_mean + config.p_std * rng.standard_normal(n))


def sample_sigma(config: TrainConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """Observation levels drawn uniformly over the annealing grid."""
    grid = config.sigma_grid()
    return grid[rng.integers(0, grid.size, size=n)]


def learning_rate(config: TrainConfig, images_seen: int) -> float:
    """Linear warmup in images, then inverse-sqrt decay in optimizer steps."""
    if images_seen < 0:
        raise ValueError("images_seen must be nonnegative")
    warm = 1.0 if config.warmup_images == 0 else min(images_seen / config.warmup_images, 1.0)
    k = images_seen / config.batch
    return config.lr_ref * warm / math.sqrt(max(k / config.t_ref, 1.0))


# ----------------------------------------------------------------------
# teacher pretraining


def pretrain_teacher(config: TrainConfig, gmm: GaussianMixture, seed: Optional[int] = None):
    """Fit an unconditional denoiser by noise-level-weighted regression.

    Returns (net, params, report). The report records the held-out RMS error
    against the exact posterior mean, averaged over the sigma grid and
    expressed in units of the data's per-coordinate standard deviation; a
    value above the configured threshold marks the report as failed but does
    not raise, so callers can decide whether a sloppy teacher is acceptable.
    """
    seed = config.seed if seed is None else seed
    net = DenoiserNet(dim=config.dim, hidden=config.hidden_score, sigma_data=config.sigma_data, conditional=False)
    params = net.init(rng_stream(seed, "teacher", "init"))
    adam = adam_init(params)
    n = config.batch
    for k in range(config.teacher_steps):
        rng = rng_stream(seed, "teacher", k)
        x0 = gmm.sample(n, rng)
        sigma = sample_sigma(config, n, rng)
        y = x0 + sigma[:, None] * rng.standard_normal((n, config.dim))
        pred, cache = net.forward(params, y, sigma, want_cache=True)
        resid = pred - x0
        _, c_out, _, _ = precondition(sigma, config.sigma_data)
        weight = 1.0 / c_out**2
        dout = (2.0 / n) * weight[:, None] * resid
        grads, _ = net.backward(params, cache, dout)
        lr = config.teacher_lr * min((k + 1) / 100.0, 1.0)
        params = adam_step(params, grads, adam, lr, config.adam_beta1, config.adam_beta2)

    # held-out error across the grid, standardized by the prior scale
    rng = rng_stream(seed, "teacher", "holdout")
    levels = config.sigma_grid()[:: max(1, config.grid_n // 64)]
    data_scale = math.sqrt(np.trace(gmm.covariance()) / config.dim)
    total, count = 0.0, 0
    for sigma in levels:
        x0 = gmm.sample(128, rng)
        y = x0 + float(sigma) * rng.standard_normal((128, config.dim))
        err = net.forward(params, y, float(sigma)) - gmm.posterior_mean(y, float(sigma))
        total += np.sum(err**2)
        count += err.size
    rmse = math.sqrt(total / count) / data_scale
    report = {
        "holdout_rmse": rmse,
        "threshold": config.teacher_threshold,
        "passed": bool(rmse < config.teacher_threshold),
        "steps": config.teacher_steps,
    }
    return net, params, report


# ----------------------------------------------------------------------
# state construction


def init_state(config: TrainConfig, gmm: GaussianMixture, teacher=None) -> TrainState:
    """Build nets, optimizers, and the teacher for a fresh run.

    With teacher mode "learned" and no teacher supplied, one is pretrained
    here; its trunk also initializes the score model, the conditioning branch
    starting at merge weight ~0 so the copied behavior is preserved.
    """
    if gmm.dim != config.dim:
        raise ValueError("mixture dimension must match config.dim")
    gen_net = DenoiserNet(dim=config.dim, hidden=config.hidden_gen, sigma_data=config.sigma_data, conditional=True)
    score_net = DenoiserNet(dim=config.dim, hidden=config.hidden_score, sigma_data=config.sigma_data, conditional=True)
    disc_net = DiscriminatorNet(dim=config.dim, hidden=config.hidden_disc, sigma_data=config.sigma_data)
    unc_net = ScalarNet(hidden=config.hidden_unc)

    theta = gen_net.init(rng_stream(config.seed, "init", "gen"))
    phi = score_net.init(rng_stream(config.seed, "init", "score"))
    psi = disc_net.init(rng_stream(config.seed, "init", "disc"))
    lam = unc_net.init(rng_stream(config.seed, "init", "unc"))

    if teacher is None:
        if config.teacher == "analytic":
            teacher = AnalyticTeacher(gmm)
        else:
            t_net, t_params, _ = pretrain_teacher(config, gmm)
            teacher = LearnedTeacher(t_net, t_params)
    if isinstance(teacher, LearnedTeacher) and teacher.net.hidden == score_net.hidden:
        for key in teacher.params:
            phi[key] = teacher.params[key].copy()

    return TrainState(
        gen_net=gen_net,
        score_net=score_net,
        disc_net=disc_net,
        unc_net=unc_net,
        theta=theta,
        theta_ema=ema_init(theta),
        phi=phi,
        psi=psi,
        lam=lam,
        adam_theta=adam_init(theta),
        adam_phi=adam_init(phi),
        adam_psi=adam_init(psi),
        adam_lam=adam_init(lam),
        teacher=teacher,
        gmm=gmm,
    )


@dataclass(frozen=True)
class _Batch:
    """The shared per-iteration draw: clean data, levels, observations."""

    x0: np.ndarray
    sigma: np.ndarray
    y: np.ndarray


def _draw_batch(config: TrainConfig, gmm: GaussianMixture, step: int) -> _Batch:
    rng = rng_stream(config.seed, "train", step, "batch")
    x0 = gmm.sample(config.batch, rng)
    sigma = sample_sigma(config, config.batch, rng)
    y = x0 + sigma[:, None] * rng.standard_normal(x0.shape)
    return _Batch(x0=x0, sigma=sigma, y=y)


# ----------------------------------------------------------------------
# the three sub-steps


def score_model_step(state: TrainState, config: TrainConfig, batch: _Batch, rng, lr: float) -> float:
    """Regress D_phi onto fresh generator outputs diffused to level t."""
    n = batch.x0.shape[0]
    t = sample_t(config, n, rng)
    z = rng.standard_normal(batch.y.shape)
    eps = rng.standard_normal(batch.y.shape)
    x_theta = generator_forward(state.gen_net, state.theta, batch.y, batch.sigma, z, config.gamma)
    x_tilde = x_theta + t[:, None] * eps
    pred, cache = state.score_net.forward(state.phi, x_tilde, t, cond=(batch.y, batch.sigma), want_cache=True)
    resid = pred - x_theta
    _, c_out, _, _ = precondition(t, config.sigma_data)
    weight = 1.0 / c_out**2
    loss = float(np.mean(weight * np.sum(resid**2, axis=1)))
    if not np.isfinite(loss):
        raise FloatingPointError(f"score-model loss became non-finite at step {state.step}")
    dout = (2.0 / n) * weight[:, None] * resid
    grads, _ = state.score_net.backward(state.phi, cache, dout)
    state.phi = adam_step(state.phi, grads, state.adam_phi, lr, config.adam_beta1, config.adam_beta2)
    return loss


def discriminator_step(state: TrainState, config: TrainConfig, batch: _Batch, rng, lr: float) -> float:
    """One update pushing real pairs up and generated pairs down."""
    n = batch.x0.shape[0]
    t = sample_t(config, n, rng)
    z = rng.standard_normal(batch.y.shape)
    eps_real = rng.standard_normal(batch.y.shape)
    eps_fake = rng.standard_normal(batch.y.shape)
    x_theta = generator_forward(state.gen_net, state.theta, batch.y, batch.sigma, z, config.gamma)
    x_real = batch.x0 + t[:, None] * eps_real
    x_fake = x_theta + t[:, None] * eps_fake
    prob_real, cache_real = state.disc_net.forward(state.psi, x_real, t, batch.y, batch.sigma, want_cache=True)
    prob_fake, cache_fake = state.disc_net.forward(state.psi, x_fake, t, batch.y, batch.sigma, want_cache=True)
    loss = float(-np.mean(np.log(prob_real)) - np.mean(np.log1p(-prob_fake)))
    if not np.isfinite(loss):
        raise FloatingPointError(f"discriminator loss became non-finite at step {state.step}")
    grads_real, _ = state.disc_net.backward(state.psi, cache_real, -(1.0 - prob_real) / n)
    grads_fake, _ = state.disc_net.backward(state.psi, cache_fake, prob_fake / n)
    grads = {key: grads_real[key] + grads_fake[key] for key in grads_real}
    state.psi = adam_step(state.psi, grads, state.adam_psi, lr * config.lr_scale_disc,
                          config.adam_beta1, config.adam_beta2)
    return loss


def generator_step(state: TrainState, config: TrainConfig, batch: _Batch, rng, lr: float,
                   adversarial: bool) -> tuple:
    """Reverse-KL move with learned uncertainty weighting and adversarial term.

    The target x_theta + (D_teacher - D_phi)(x_tilde) is a stop-gradient
    constant: gradients reach theta only through x_theta itself and, when the
    adversarial term is active, through x_tilde inside the discriminator.
    Returns (loss, mean uncertainty) and refreshes the EMA parameters.
    """
    n = batch.x0.shape[0]
    dim = config.dim
    t = sample_t(config, n, rng)
    z = rng.standard_normal(batch.y.shape)
    eps = rng.standard_normal(batch.y.shape)
    x_theta, gen_cache = generator_forward(
        state.gen_net, state.theta, batch.y, batch.sigma, z, config.gamma, want_cache=True
    )
    x_tilde = x_theta + t[:, None] * eps

    y_eff, sigma_eff = effective_observation(batch.y, batch.sigma, x_tilde, t)
    d_teacher = state.teacher.denoise(y_eff, sigma_eff)
    d_phi = state.score_net.forward(state.phi, x_tilde, t, cond=(batch.y, batch.sigma))
    resid = d_phi - d_teacher  # = x_theta - stopgrad(x_theta + d_teacher - d_phi)
    r2 = np.sum(resid**2, axis=1)

    w, unc_cache = state.unc_net.forward(state.lam, t, want_cache=True)
    loss = float(np.mean(np.exp(-w) * r2 + dim * w))
    dx_theta = (2.0 / n) * np.exp(-w)[:, None] * resid
    dw = (-np.exp(-w) * r2 + dim) / n

    if adversarial:
        prob, disc_cache = state.disc_net.forward(state.psi, x_tilde, t, batch.y, batch.sigma, want_cache=True)
        loss += float(dim * -np.mean(np.log(prob)))
        _, dx_tilde = state.disc_net.backward(state.psi, disc_cache, dim * -(1.0 - prob) / n)
        dx_theta = dx_theta + dx_tilde
    if not np.isfinite(loss):
        raise FloatingPointError(f"generator loss became non-finite at step {state.step}")

    theta_grads = generator_backward(state.gen_net, state.theta, gen_cache, dx_theta)
    lam_grads = state.unc_net.backward(state.lam, unc_cache, dw)
    lr_gen = lr * config.lr_scale_gen
    state.theta = adam_step(state.theta, theta_grads, state.adam_theta, lr_gen,
                            config.adam_beta1, config.adam_beta2)
    state.lam = adam_step(state.lam, lam_grads, state.adam_lam, lr_gen,
                          config.adam_beta1, config.adam_beta2)
    state.theta_ema = ema_update(state.theta_ema, state.theta, config.ema_rate)
    return loss, float(np.mean(w))


# ----------------------------------------------------------------------
# the outer loop


def _one_step_swd(state: TrainState, config: TrainConfig, step: int) -> float:
    """Sliced Wasserstein of 1-step unconditional EMA samples vs exact draws."""
    denoiser = GeneratorDenoiser(state.gen_net, state.theta_ema, config.gamma)
    schedule = edm_schedule(1, config.sigma_min, config.sigma_max, config.rho)
    rng = rng_stream(config.seed, "metrics", step)
    batch = unconditional_sample(denoiser, schedule, SamplerConfig(), config.metric_samples, rng, seed=config.seed)
    reference = state.gmm.sample(config.metric_samples, rng)
    report = sliced_wasserstein(batch, reference, projections=config.metric_projections, rng=rng)
    return report.value


def train(config: TrainConfig, gmm: GaussianMixture, teacher=None, state: Optional[TrainState] = None,
          crash_path=None):
    """Run the three-sub-step loop until the image budget is exhausted.

    Returns (state, metrics) where metrics is a list of dicts emitted every
    ``metric_every`` optimizer steps and at the final step. Passing a state
    resumes mid-run and reproduces the uninterrupted run exactly. On an
    error, a crash checkpoint is written to ``crash_path`` when given, and
    the error is re-raised with the checkpoint location attached.
    """
    if state is None:
        state = init_state(config, gmm, teacher)
    metrics = []
    total_steps = config.total_images // config.batch
    for step in range(state.step, total_steps):
        batch = _draw_batch(config, gmm, step)
        lr = learning_rate(config, state.images_seen + config.batch)
        adversarial = state.images_seen >= config.adv_warmup_images
        try:
            loss_score = score_model_step(state, config, batch, rng_stream(config.seed, "train", step, "score"), lr)
            loss_disc = discriminator_step(state, config, batch, rng_stream(config.seed, "train", step, "disc"), lr)
            loss_gen, w_mean = generator_step(
                state, config, batch, rng_stream(config.seed, "train", step, "gen"), lr, adversarial
            )
            state.assert_finite()
        except Exception as err:
            if crash_path is not None:
                save_train_checkpoint(crash_path, state, config)
                raise type(err)(f"{err} (crash checkpoint written to {crash_path})") from err
            raise
        state.step = step + 1
        state.images_seen += config.batch
        row = {
            "step": state.step,
            "images_seen": state.images_seen,
            "loss_gen": loss_gen,
            "loss_score": loss_score,
            "loss_disc": loss_disc,
            "w_lambda_mean": w_mean,
        }
        state.telemetry.append(row)
        if state.step % config.metric_every == 0 or state.step == total_steps:
            row = dict(row)
            row["swd_1step"] = _one_step_swd(state, config, step)
            metrics.append(row)
    return state, metrics


# ----------------------------------------------------------------------
# checkpoints


def save_train_checkpoint(path, state: TrainState, config: TrainConfig, extra: Optional[dict] = None) -> None:
    nets = {"gen": state.theta, "ema": state.theta_ema, "score": state.phi, "disc": state.psi, "unc": state.lam}
    adam = {"gen": state.adam_theta, "score": state.adam_phi, "disc": state.adam_psi, "unc": state.adam_lam}
    meta = {
        "config": config.to_dict(),
        "step": state.step,
        "images_seen": state.images_seen,
        "teacher_kind": state.teacher.kind,
        **(extra or {}),
    }
    if isinstance(state.teacher, LearnedTeacher):
        nets["teacher"] = state.teacher.params
    save_checkpoint(path, nets, meta, adam)


def load_train_checkpoint(path, gmm: GaussianMixture):
    """Rebuild (state, config) from a checkpoint; teacher nets are restored too."""
    from .nets import load_checkpoint

    nets, meta, adam = load_checkpoint(path)
    config = TrainConfig.from_dict(meta["config"])
    teacher = None
    if meta["teacher_kind"] == "learned":
        t_net = DenoiserNet(dim=config.dim, hidden=config.hidden_score, sigma_data=config.sigma_data,
                            conditional=False)
        teacher = LearnedTeacher(t_net, nets["teacher"])
    state = init_state(config, gmm, teacher)
    state.theta, state.theta_ema = nets["gen"], nets["ema"]
    state.phi, state.psi, state.lam = nets["score"], nets["disc"], nets["unc"]
    state.adam_theta, state.adam_phi = adam["gen"], adam["score"]
    state.adam_psi, state.adam_lam = adam["disc"], adam["unc"]
    state.step = int(meta["step"])
    state.images_seen = int(meta["images_seen"])
    return state, config
