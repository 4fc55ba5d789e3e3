"""Multi-step generative denoising over an annealed noise schedule.

A "denoiser" here is anything exposing ``sample_x0(y, sigma, rng)``: given a
batch of observations y at a shared noise level sigma, return one posterior
draw of the clean signal per row. Two adapters are provided, one wrapping a
Gaussian mixture (exact) and one wrapping trained generator parameters. The
multistep loop itself is denoiser-agnostic: it walks a decreasing sequence of
levels, merges the running state with the observation through the
effective-observation identity, asks the denoiser for a clean draw, and takes
a noise-matched transition to the next level. The per-level marginals of that
chain reproduce the closed-form denoising diffusion marginals for any mixing
factor zeta, which is what the statistical suites verify.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .batches import SampleBatch
from .mixtures import GaussianMixture, effective_observation
from .nets import DenoiserNet, Params, generator_forward
from .streams import child_seed

__all__ = [
    "AnnealingSchedule",
    "edm_schedule",
    "SamplerConfig",
    "ddim_transition",
    "multistep_denoise",
    "unconditional_sample",
    "OracleDenoiser",
    "GeneratorDenoiser",
]


@dataclass(frozen=True)
class AnnealingSchedule:
    """A strictly decreasing ladder of noise levels with pinned endpoints."""

    levels: np.ndarray
    sigma_min: float
    sigma_max: float
    rho: float

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=float)
        levels.setflags(write=False)
        object.__setattr__(self, "levels", levels)
        if levels.ndim != 1 or levels.size == 0:
            raise ValueError("levels must be a nonempty vector")
        if np.any(~np.isfinite(levels)) or np.any(levels <= 0.0):
            raise ValueError("levels must be positive and finite")
        if levels.size > 1 and np.any(np.diff(levels) >= 0.0):
            raise ValueError("levels must be strictly decreasing")
        if levels[0] != self.sigma_max or levels[-1] != (self.sigma_min if levels.size > 1 else levels[-1]):
            raise ValueError("endpoints must equal sigma_max and sigma_min")

    @property
    def n(self) -> int:
        return int(self.levels.size)

    def table(self) -> str:
        """Human-readable level table for logs."""
        rows = [f"{i:>4d}  {s:.6g}" for i, s in enumerate(self.levels)]
        return "\n".join(["index  sigma"] + rows)


def edm_schedule(n: int, sigma_min: float = 0.002, sigma_max: float = 80.0, rho: float = 7.0) -> AnnealingSchedule:
    """Power-interpolated noise ladder from sigma_max down to sigma_min.

    sigma_i = (sigma_max^(1/rho) + i/(n-1) (sigma_min^(1/rho) - sigma_max^(1/rho)))^rho
    for i = 0..n-1. The endpoints are pinned to sigma_max and sigma_min
    exactly rather than trusting (x^(1/rho))^rho to round-trip.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not (0.0 < sigma_min <= sigma_max) or rho <= 0.0:
        raise ValueError("need 0 < sigma_min <= sigma_max and rho > 0")
    if n == 1:
        levels = np.array([sigma_max])
    else:
        hi = sigma_max ** (1.0 / rho)
        lo = sigma_min ** (1.0 / rho)
        steps = np.arange(n) / (n - 1)
        levels = (hi + steps * (lo - hi)) ** rho
        levels[0] = sigma_max
        levels[-1] = sigma_min
    return AnnealingSchedule(levels=levels, sigma_min=float(sigma_min), sigma_max=float(sigma_max), rho=float(rho))


@dataclass(frozen=True)
class SamplerConfig:
    """How to walk a schedule: mixing factor, retained indices, and init.

    ``indices`` selects a strictly increasing subset of schedule positions
    (None keeps every level), so a 4-step sampler over a 40-level master grid
    is expressed as indices (0, 10, 20, 30). ``init`` chooses the starting
    state: "gaussian" draws x ~ N(0, sigma_init^2 I); "exact" asks the
    denoiser for a clean draw at the observation level and renoises it to the
    first retained level, which removes the top-of-schedule approximation and
    is what the marginal-exactness checks use. ``sigma_init`` defaults to the
    first retained level.
    """

    zeta: float = 1.0
    indices: Optional[Sequence[int]] = None
    init: str = "gaussian"
    sigma_init: Optional[float] = None

    def __post_init__(self):
        if not (0.0 <= self.zeta <= 1.0):
            raise ValueError("zeta must lie in [0, 1]")
        if self.init not in ("gaussian", "exact"):
            raise ValueError("init must be 'gaussian' or 'exact'")
        if self.indices is not None:
            idx = tuple(int(i) for i in self.indices)
            if len(idx) == 0 or any(b <= a for a, b in zip(idx, idx[1:])):
                raise ValueError("indices must be nonempty and strictly increasing")
            object.__setattr__(self, "indices", idx)

    def retained(self, schedule: AnnealingSchedule) -> np.ndarray:
        if self.indices is None:
            return schedule.levels
        idx = np.asarray(self.indices, dtype=int)
        if idx[-1] >= schedule.n:
            raise ValueError("index exceeds schedule length")
        return schedule.levels[idx]


def ddim_transition(x_i, x0, sigma_i: float, sigma_prev: float, zeta: float, rng: np.random.Generator):
    """One noise-decreasing transition keeping the chain's marginals intact.

    Draws from N(x0 + sigma_prev sqrt(1-zeta) (x_i - x0)/sigma_i,
    sigma_prev^2 zeta I). zeta=1 is ancestral (forgets x_i); zeta=0 is the
    deterministic ray through x_i; anything between trades the two while
    preserving the level-sigma_prev marginal.
    """
    x_i = np.asarray(x_i, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if not (0.0 < sigma_prev < sigma_i):
        raise ValueError("need 0 < sigma_prev < sigma_i")
    if not (0.0 <= zeta <= 1.0):
        raise ValueError("zeta must lie in [0, 1]")
    mean = x0 + (sigma_prev * np.sqrt(1.0 - zeta) / sigma_i) * (x_i - x0)
    if zeta == 0.0:
        return mean
    return mean + (sigma_prev * np.sqrt(zeta)) * rng.standard_normal(x_i.shape)


def multistep_denoise(
    denoiser,
    y,
    sigma: Optional[float],
    schedule: AnnealingSchedule,
    config: SamplerConfig,
    rng: np.random.Generator,
    n: Optional[int] = None,
    record: bool = False,
):
    """Walk the retained levels from coarse to fine, returning clean draws.

    Parameters
    ----------
    denoiser : object with sample_x0(y, sigma, rng)
    y : (n, D) or (D,) observation rows, or None for unconditional mode
    sigma : observation noise level; None for unconditional mode
    schedule, config : the level ladder and how to walk it
    rng : generator consumed sequentially; same seed, same output
    n : batch size when y is None (ignored otherwise)
    record : also return the list of per-level states x_i

    In unconditional mode the observation carries no information, so the
    effective level is the chain level itself; this is the analytic limit of
    sigma -> infinity rather than a large finite sigma.

    Returns (x0, states) when record else x0, with x0 shaped (n, D).
    """
    levels = config.retained(schedule)
    if (y is None) != (sigma is None):
        raise ValueError("y and sigma must be given together")
    if y is None and config.init == "exact":
        raise ValueError("exact init needs an observation to condition on")
    if y is not None:
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = y[None, :]
        n = y.shape[0]
    elif n is None:
        raise ValueError("n is required in unconditional mode")
    dim = y.shape[1] if y is not None else denoiser.dim

    sigma_top = float(levels[0]) if config.sigma_init is None else float(config.sigma_init)
    if config.init == "gaussian":
        x = sigma_top * rng.standard_normal((n, dim))
    else:
        x0_init = denoiser.sample_x0(y, sigma, rng)
        x = x0_init + float(levels[0]) * rng.standard_normal((n, dim))

    states = []
    x0 = None
    for k, level in enumerate(levels):
        level = float(level)
        if record:
            states.append(x.copy())
        y_eff, sigma_eff = effective_observation(y, sigma, x, level)
        x0 = denoiser.sample_x0(y_eff, sigma_eff, rng)
        if k + 1 < len(levels):
            x = ddim_transition(x, x0, level, float(levels[k + 1]), config.zeta, rng)
    if record:
        return x0, states
    return x0


def unconditional_sample(
    denoiser,
    schedule: AnnealingSchedule,
    config: SamplerConfig,
    n: int,
    rng: np.random.Generator,
    seed: int = 0,
) -> SampleBatch:
    """Generate n unconditional samples by denoising from pure noise."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    steps = len(config.retained(schedule))
    dim = denoiser.dim
    if n == 0:
        data = np.empty((0, dim))
    else:
        data = multistep_denoise(denoiser, None, None, schedule, config, rng, n=n)
    return SampleBatch(data=data, seed=seed, source=denoiser.label, sigma=None, steps=steps)


# ----------------------------------------------------------------------
# denoiser adapters


class OracleDenoiser:
    """Exact posterior sampler for a Gaussian-mixture data distribution."""

    label = "oracle"

    def __init__(self, gmm: GaussianMixture):
        self.gmm = gmm
        self.dim = gmm.dim

    def sample_x0(self, y, sigma, rng: np.random.Generator) -> np.ndarray:
        if y is None:
            raise ValueError("oracle denoiser needs an observation; draw from the mixture directly instead")
        return self.gmm.sample_posterior(y, sigma, rng)


class GeneratorDenoiser:
    """Trained one-step generative denoiser behind the sampling protocol.

    Wraps a parameter set (typically the EMA copy) of a conditional denoiser
    network; each sample_x0 call draws a fresh latent per row.
    """

    def __init__(self, net: DenoiserNet, params: Params, gamma: float, label: str = "learned-1step"):
        if not net.conditional:
            raise ValueError("generator networks must be conditional")
        self.net = net
        self.params = params
        self.gamma = float(gamma)
        self.dim = net.dim
        self.label = label

    def sample_x0(self, y, sigma, rng: np.random.Generator) -> np.ndarray:
        if y is None:
            raise ValueError("the generator is conditional; unconditional draws go through the multistep chain")
        y = np.asarray(y, dtype=float)
        z = rng.standard_normal(y.shape)
        return generator_forward(self.net, self.params, y, sigma, z, self.gamma)
