"""Split Gibbs posterior sampling with a denoiser prior and an energy likelihood.

The chain alternates two conditional moves under an annealed coupling noise
sigma: a prior step that asks a denoiser for a clean draw given the current
auxiliary state, and a likelihood step that re-draws the auxiliary state from
the energy-tilted Gaussian around that clean draw. As sigma shrinks the two
variables coalesce and the clean draws approach the target
pi(x) proportional to p_data(x) exp(-E(x)/beta).

Likelihood steps dispatch on the energy: linear-Gaussian and quadratic
energies admit exact Gaussian conditionals; anything else runs a short
unadjusted Langevin chain with a step size that adapts to both the energy
strength and the current coupling noise. Clean draws from the late, small
sigma part of the schedule are optionally blended by an exponential moving
average before being returned.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np
from scipy import linalg

from .mixtures import MAX_CONDITION, IllConditionedError
from .sampling import AnnealingSchedule, SamplerConfig, edm_schedule, multistep_denoise

__all__ = [
    "EnergyFunction",
    "ZeroEnergy",
    "LinearGaussianEnergy",
    "QuadraticEnergy",
    "CubicOperatorEnergy",
    "register_energy",
    "build_energy",
    "ula_step_size",
    "ula_likelihood_step",
    "gaussian_likelihood_step",
    "ema_merge",
    "PnPGDConfig",
    "PnPTrajectory",
    "run_pnp_gd",
]


# ----------------------------------------------------------------------
# energies


class EnergyFunction:
    """Interface for likelihood energies E(x).

    Subclasses implement ``value`` and ``grad`` over (n, D) rows. Those with
    a tractable tilted conditional additionally implement
    ``sample_tilted(x0, sigma, beta, rng)``, drawing exactly from the density
    proportional to exp(-E(u)/beta) N(u; x0, sigma^2 I) row by row; the chain
    uses it whenever available. ``c2_hint`` optionally advertises a gradient
    Lipschitz constant for the Langevin step size.
    """

    c2_hint: Optional[float] = None

    def value(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def has_exact_step(self) -> bool:
        return hasattr(self, "sample_tilted")


class ZeroEnergy(EnergyFunction):
    """No observation: the tilted conditional is the coupling Gaussian itself."""

    c2_hint = 0.0

    def value(self, x):
        return np.zeros(np.asarray(x).shape[0])

    def grad(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def sample_tilted(self, x0, sigma, beta, rng):
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        return x0 + float(sigma) * rng.standard_normal(x0.shape)


class LinearGaussianEnergy(EnergyFunction):
    """E(x) = ||y - A x||^2 for a dense operator A and observation y.

    With beta = 2 sigma_y^2 the tilt exp(-E/beta) is exactly the Gaussian
    likelihood N(y; Ax, sigma_y^2 I); other beta rescale the effective
    observation noise to sqrt(beta/2).
    """

    def __init__(self, A, y):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.y = np.asarray(y, dtype=float).reshape(-1)
        if self.A.shape[0] != self.y.size:
            raise ValueError("operator rows must match observation length")
        self._AtA = self.A.T @ self.A
        self.c2_hint = 2.0 * float(np.linalg.eigvalsh(self._AtA)[-1])

    def value(self, x):
        resid = np.atleast_2d(x) @ self.A.T - self.y
        return np.einsum("ij,ij->i", resid, resid)

    def grad(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return 2.0 * (x @ self._AtA - self.y @ self.A)

    def sample_tilted(self, x0, sigma, beta, rng):
        return gaussian_likelihood_step(self.A, self.y, math.sqrt(beta / 2.0), x0, sigma, rng)


class QuadraticEnergy(EnergyFunction):
    """E(x) = 0.5 x^T H x + b^T x with H symmetric positive semidefinite."""

    def __init__(self, H, b=None):
        self.H = np.atleast_2d(np.asarray(H, dtype=float))
        if self.H.shape[0] != self.H.shape[1] or not np.allclose(self.H, self.H.T, atol=1e-12):
            raise ValueError("H must be square and symmetric")
        eigs = np.linalg.eigvalsh(self.H)
        if eigs[0] < -1e-12 * max(1.0, eigs[-1]):
            raise ValueError("H must be positive semidefinite")
        self.b = np.zeros(self.H.shape[0]) if b is None else np.asarray(b, dtype=float).reshape(-1)
        if self.b.size != self.H.shape[0]:
            raise ValueError("b must match the dimension of H")
        self.c2_hint = float(eigs[-1])

    def value(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return 0.5 * np.einsum("ij,jk,ik->i", x, self.H, x) + x @ self.b

    def grad(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return x @ self.H + self.b

    def sample_tilted(self, x0, sigma, beta, rng):
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        sigma = float(sigma)
        precision = self.H / beta + np.eye(self.H.shape[0]) / sigma**2
        return _draw_gaussian_rows(precision, x0 / sigma**2 - self.b / beta, rng)


class CubicOperatorEnergy(EnergyFunction):
    """E(x) = ||y - x^3||^2 with a coordinate-wise cube: smooth and nonlinear.

    No exact conditional exists, so this energy always exercises the Langevin
    path. The gradient grows like x^5, making it a good stress case for the
    non-finite-iterate guards as well.
    """

    def __init__(self, y):
        self.y = np.asarray(y, dtype=float).reshape(-1)

    def value(self, x):
        resid = np.atleast_2d(x) ** 3 - self.y
        return np.einsum("ij,ij->i", resid, resid)

    def grad(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return 6.0 * x**2 * (x**3 - self.y)


_ENERGY_FACTORIES: Dict[str, Callable[[dict], EnergyFunction]] = {}


def register_energy(kind: str, factory: Callable[[dict], EnergyFunction]) -> None:
    """Make an energy constructible from problem-spec dictionaries."""
    if kind in _ENERGY_FACTORIES:
        raise ValueError(f"energy type {kind!r} is already registered")
    _ENERGY_FACTORIES[kind] = factory


def build_energy(kind: str, spec: Optional[dict] = None) -> EnergyFunction:
    """Instantiate an energy by registry name from a flat spec dictionary."""
    if kind not in _ENERGY_FACTORIES:
        known = ", ".join(sorted(_ENERGY_FACTORIES))
        raise ValueError(f"unknown energy type {kind!r}; known: {known}")
    return _ENERGY_FACTORIES[kind](spec or {})


register_energy("none", lambda spec: ZeroEnergy())
register_energy("linear-gaussian", lambda spec: LinearGaussianEnergy(spec["A"], spec["y"]))
register_energy("custom-quadratic", lambda spec: QuadraticEnergy(spec["H"], spec.get("b")))
register_energy("cubic", lambda spec: CubicOperatorEnergy(spec["y"]))


# ----------------------------------------------------------------------
# likelihood steps


def ula_step_size(beta: float, c1: float, c2: float, sigma: float) -> float:
    """Adaptive Langevin step: c1 / (c2/beta + 1/sigma^2).

    Grows with both the coupling noise and the energy strength, saturating at
    c1 beta / c2 for large sigma and vanishing as sigma -> 0 so late steps
    stay stable on the stiffening quadratic coupling term.
    """
    if beta <= 0.0 or c1 <= 0.0 or c2 < 0.0 or sigma <= 0.0:
        raise ValueError("beta, c1, sigma must be positive and c2 nonnegative")
    return c1 / (c2 / beta + 1.0 / sigma**2)


def ula_likelihood_step(energy: EnergyFunction, x0_anchor, sigma: float, config, u_init, rng) -> np.ndarray:
    """K unadjusted Langevin iterations on the energy-tilted coupling potential.

    The potential is V(u) = E(u)/beta + ||u - x0||^2 / (2 sigma^2); each
    iteration moves u <- u - gamma grad V + sqrt(2 gamma) eps with the
    adaptive gamma above. Raises when an iterate goes non-finite, naming the
    iteration that produced it.
    """
    x0 = np.atleast_2d(np.asarray(x0_anchor, dtype=float))
    u = np.atleast_2d(np.asarray(u_init, dtype=float)).copy()
    sigma = float(sigma)
    c2 = energy.c2_hint if energy.c2_hint is not None else config.c2
    gamma = ula_step_size(config.beta, config.c1, c2, sigma)
    noise_scale = math.sqrt(2.0 * gamma)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(config.ula_steps):
            drift = energy.grad(u) / config.beta + (u - x0) / sigma**2
            u = u - gamma * drift + noise_scale * rng.standard_normal(u.shape)
            if not np.all(np.isfinite(u)):
                raise FloatingPointError(f"Langevin iterate became non-finite at inner step {k}")
    return u


def _draw_gaussian_rows(precision: np.ndarray, rhs_rows: np.ndarray, rng) -> np.ndarray:
    """Exact rows from N(P^-1 rhs, P^-1) sharing one precision matrix P."""
    eigs = np.linalg.eigvalsh(precision)
    if eigs[0] <= 0.0 or eigs[-1] / eigs[0] > MAX_CONDITION:
        raise IllConditionedError("likelihood-step precision matrix is ill-conditioned")
    chol_lower = linalg.cholesky(precision, lower=True)
    mean = linalg.cho_solve((chol_lower, True), rhs_rows.T).T
    eps = rng.standard_normal(rhs_rows.shape)
    return mean + linalg.solve_triangular(chol_lower, eps.T, lower=True, trans="T").T


def gaussian_likelihood_step(A, y, sigma_y: float, x0_anchor, sigma: float, rng) -> np.ndarray:
    """Exact draw from the Gaussian conditional of u given anchor and data.

    Prior N(x0, sigma^2 I) times likelihood N(y; Au, sigma_y^2 I) gives a
    Gaussian with precision sigma^-2 I + sigma_y^-2 A^T A; one draw is
    returned per anchor row.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    x0 = np.atleast_2d(np.asarray(x0_anchor, dtype=float))
    sigma, sigma_y = float(sigma), float(sigma_y)
    if sigma <= 0.0 or sigma_y <= 0.0:
        raise ValueError("noise levels must be positive")
    dim = x0.shape[1]
    precision = np.eye(dim) / sigma**2 + (A.T @ A) / sigma_y**2
    rhs = x0 / sigma**2 + (y @ A) / sigma_y**2
    return _draw_gaussian_rows(precision, rhs, rng)


def ema_merge(accumulated: Optional[np.ndarray], new_sample, mu: float) -> np.ndarray:
    """Blend a fresh draw into the running average: mu old + (1-mu) new."""
    if not (0.0 <= mu <= 1.0):
        raise ValueError("mu must lie in [0, 1]")
    new_sample = np.asarray(new_sample, dtype=float)
    if accumulated is None:
        return new_sample.copy()
    return mu * np.asarray(accumulated, dtype=float) + (1.0 - mu) * new_sample


# ----------------------------------------------------------------------
# the annealed chain


@dataclass(frozen=True)
class PnPGDConfig:
    """Knobs for the annealed split Gibbs chain.

    ``beta`` scales the energy (2 sigma_y^2 recovers a standard Gaussian
    likelihood for LinearGaussianEnergy). ``sigma_ema``/``mu`` gate and decay
    the output average: clean draws taken at levels below sigma_ema are
    blended, the first one initializing the accumulator. ``prior_steps`` > 1
    replaces the single prior draw with that many denoising levels.
    ``likelihood`` picks the step implementation: exact conditionals when the
    energy has them, Langevin otherwise ("auto" prefers exact).
    """

    beta: float
    schedule: AnnealingSchedule
    ula_steps: int = 100
    c1: float = 0.1
    c2: float = 0.1
    sigma_ema: float = math.inf
    mu: float = 0.5
    prior_steps: int = 1
    likelihood: str = "auto"

    def __post_init__(self):
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")
        if not (0.0 <= self.mu <= 1.0):
            raise ValueError("mu must lie in [0, 1]")
        if self.ula_steps < 1:
            raise ValueError("ula_steps must be >= 1")
        if self.prior_steps < 1:
            raise ValueError("prior_steps must be >= 1")
        if self.likelihood not in ("auto", "exact", "ula"):
            raise ValueError("likelihood must be auto, exact, or ula")


@dataclass(frozen=True)
class PnPTrajectory:
    """Per-level record of one batched chain: levels, clean draws, states."""

    sigmas: np.ndarray  # (steps,)
    x0: np.ndarray  # (steps, chains, D)
    u: np.ndarray  # (steps, chains, D)

    def save_csv(self, path) -> None:
        dim = self.x0.shape[2]
        header = ["step", "sigma", "chain"]
        header += [f"x0_{j}" for j in range(dim)] + [f"u_{j}" for j in range(dim)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for step, sigma in enumerate(self.sigmas):
                for chain in range(self.x0.shape[1]):
                    row = [step, repr(float(sigma)), chain]
                    row += [repr(float(v)) for v in self.x0[step, chain]]
                    row += [repr(float(v)) for v in self.u[step, chain]]
                    writer.writerow(row)


def _prior_draw(denoiser, u, sigma_i, config: PnPGDConfig, rng) -> np.ndarray:
    if config.prior_steps == 1:
        return denoiser.sample_x0(u, sigma_i, rng)
    # The sub-chain starts from a one-step draw renoised to sigma_i ("exact"
    # init): a plain N(0, sigma_i^2) start would need many levels to forget,
    # and the anneal here has only prior_steps of them.
    sub_min = min(config.schedule.sigma_min, sigma_i / 4.0)
    sub = edm_schedule(config.prior_steps, sub_min, sigma_i, config.schedule.rho)
    return multistep_denoise(denoiser, u, sigma_i, sub, SamplerConfig(init="exact"), rng)


def _likelihood_draw(energy, x0_i, sigma_next, config: PnPGDConfig, u, rng) -> np.ndarray:
    use_exact = config.likelihood == "exact" or (config.likelihood == "auto" and energy.has_exact_step)
    if use_exact:
        if not energy.has_exact_step:
            raise ValueError("exact likelihood steps requested but the energy has no tilted sampler")
        return energy.sample_tilted(x0_i, sigma_next, config.beta, rng)
    return ula_likelihood_step(energy, x0_i, sigma_next, config, u, rng)


def run_pnp_gd(
    denoiser,
    energy: EnergyFunction,
    config: PnPGDConfig,
    rng,
    chains: int = 1,
    record: bool = False,
):
    """Run the annealed prior/likelihood chain; returns clean draws.

    Starts from u ~ N(0, sigma_max^2 I) and walks the schedule's levels. At
    each level a clean draw is taken given u; if the level is below
    sigma_ema the draw enters the output average. Between levels u is
    re-drawn from the energy-tilted Gaussian anchored at the clean draw, at
    the NEXT level's noise, so the chain tightens as it anneals. Returns
    (samples, trajectory) when ``record`` else samples, shaped (chains, D).
    """
    if chains < 1:
        raise ValueError("chains must be >= 1")
    levels = config.schedule.levels
    dim = denoiser.dim
    u = float(levels[0]) * rng.standard_normal((chains, dim))
    accumulated = None
    x0_i = None
    sig_log, x0_log, u_log = [], [], []
    for k, sigma_i in enumerate(levels):
        sigma_i = float(sigma_i)
        try:
            x0_i = _prior_draw(denoiser, u, sigma_i, config, rng)
            if record:
                sig_log.append(sigma_i)
                x0_log.append(np.array(x0_i))
                u_log.append(np.array(u))
            if sigma_i < config.sigma_ema:
                accumulated = ema_merge(accumulated, x0_i, config.mu)
            if k + 1 < len(levels):
                u = _likelihood_draw(energy, x0_i, float(levels[k + 1]), config, u, rng)
        except (FloatingPointError, IllConditionedError) as err:
            raise type(err)(f"chain failed at annealing step {k} (sigma={sigma_i:g}): {err}") from err
    out = accumulated if accumulated is not None else x0_i
    if record:
        trajectory = PnPTrajectory(np.array(sig_log), np.stack(x0_log), np.stack(u_log))
        return out, trajectory
    return out
