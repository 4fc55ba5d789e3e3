"""Exact Gaussian-mixture reference distributions.

Everything trainable in this package is measured against the closed-form
machinery here: mixture densities and scores, Gaussian-noise convolutions,
denoising posteriors obtained by per-component conjugacy, and posteriors for
linear-Gaussian measurements. All identities are exact; the only approximation
anywhere is floating point.

Conventions: a mixture over R^D has weights ``w`` (K,), means ``mu`` (K, D)
and covariances ``cov`` (K, D, D). A noisy observation of a clean point x0 at
noise level sigma is ``y = x0 + sigma * eps`` with eps ~ N(0, I). Weight
arithmetic is done in log space throughout.
"""

from __future__ import annotations

import json
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "IllConditionedError",
    "GaussianMixture",
    "effective_observation",
    "two_mode_1d",
    "ring_2d",
    "single_gaussian",
    "MAX_DIM",
    "MAX_CONDITION",
]

MAX_DIM = 16
MAX_CONDITION = 1e12
_WEIGHT_TOL = 1e-12
_LOG_2PI = float(np.log(2.0 * np.pi))


class IllConditionedError(RuntimeError):
    """A covariance or normal-equation matrix exceeded the condition bound."""


def _as_matrix(x, dim: int) -> np.ndarray:
    """Coerce points to (n, D), remembering nothing; callers handle squeeze."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got shape {np.shape(x)}")
    return arr


def _check_condition(eig_min: np.ndarray, eig_max: np.ndarray, what: str) -> None:
    eig_min = np.asarray(eig_min, dtype=float)
    eig_max = np.asarray(eig_max, dtype=float)
    if np.any(eig_min <= 0.0):
        raise IllConditionedError(f"{what} is not positive definite")
    cond = np.max(eig_max / eig_min)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise IllConditionedError(f"{what} condition number {cond:.3e} exceeds {MAX_CONDITION:.0e}")


def _validate_sigma(sigma: float) -> float:
    sigma = float(sigma)
    if not np.isfinite(sigma) or sigma <= 0.0:
        raise ValueError(f"noise level must be positive and finite, got {sigma}")
    return sigma


class GaussianMixture:
    """Finite Gaussian mixture with cached factorizations.

    Parameters
    ----------
    weights : array_like, shape (K,)
        Nonnegative, summing to 1 within 1e-12.
    means : array_like, shape (K, D)
    covariances : array_like, shape (K, D, D)
        Symmetric positive definite, condition number at most 1e12.

    Raises
    ------
    ValueError
        On inconsistent shapes, invalid weights, or D > 16.
    IllConditionedError
        If a component covariance is not SPD within the condition bound.
    """

    def __init__(self, weights, means, covariances):
        w = np.asarray(weights, dtype=float).copy()
        mu = np.asarray(means, dtype=float).copy()
        cov = np.asarray(covariances, dtype=float).copy()
        if mu.ndim == 1:
            mu = mu[:, None]
        if cov.ndim == 1:
            cov = cov[:, None, None]
        if w.ndim != 1 or mu.ndim != 2 or cov.ndim != 3:
            raise ValueError("weights must be (K,), means (K, D), covariances (K, D, D)")
        k, d = mu.shape
        if w.shape[0] != k or cov.shape != (k, d, d):
            raise ValueError(
                f"inconsistent shapes: weights {w.shape}, means {mu.shape}, covariances {cov.shape}"
            )
        if k < 1:
            raise ValueError("mixture needs at least one component")
        if d < 1 or d > MAX_DIM:
            raise ValueError(f"dimension must be in [1, {MAX_DIM}], got {d}")
        if np.any(w < 0.0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > _WEIGHT_TOL:
            raise ValueError(f"weights must sum to 1 within {_WEIGHT_TOL}, got {w.sum()!r}")
        if not np.allclose(cov, np.swapaxes(cov, -1, -2), rtol=0.0, atol=1e-12):
            raise ValueError("covariances must be symmetric")

        eigvals = np.linalg.eigvalsh(cov)
        _check_condition(eigvals[:, 0], eigvals[:, -1], "component covariance")

        self.weights = w
        self.means = mu
        self.covariances = cov
        self.k = k
        self.dim = d
        # Immutable caches shared by every operation below.
        self.log_weights = np.where(w > 0.0, np.log(np.maximum(w, 1e-300)), -np.inf)
        self.cov_eigvals = eigvals  # (K, D) ascending
        self.chol = np.linalg.cholesky(cov)  # (K, D, D)
        self.cov_inv = np.linalg.inv(cov)
        self.cov_inv = 0.5 * (self.cov_inv + np.swapaxes(self.cov_inv, -1, -2))
        self.log_det = 2.0 * np.log(np.diagonal(self.chol, axis1=-2, axis2=-1)).sum(axis=-1)
        self.cov_inv_mean = np.einsum("kij,kj->ki", self.cov_inv, mu)
        for arr in (self.weights, self.means, self.covariances):
            arr.setflags(write=False)

    # ------------------------------------------------------------------
    # densities and scores

    def _component_log_density(self, x: np.ndarray) -> np.ndarray:
        """log N(x_n; mu_k, cov_k) for all (n, k)."""
        diff = x[:, None, :] - self.means[None, :, :]  # (n, K, D)
        sol = np.einsum("kij,nkj->nki", self.cov_inv, diff)
        quad = np.einsum("nki,nki->nk", diff, sol)
        return -0.5 * (self.dim * _LOG_2PI + self.log_det[None, :] + quad)

    def log_density(self, x) -> np.ndarray:
        """Log density of the mixture at points x, shape (n,) (or scalar for a single point)."""
        pts = _as_matrix(x, self.dim)
        comp = self._component_log_density(pts) + self.log_weights[None, :]
        out = logsumexp(comp, axis=1)
        return out[0] if np.ndim(x) == 1 else out

    def responsibilities(self, x) -> np.ndarray:
        """Posterior component probabilities at points x, shape (n, K)."""
        pts = _as_matrix(x, self.dim)
        comp = self._component_log_density(pts) + self.log_weights[None, :]
        comp -= logsumexp(comp, axis=1, keepdims=True)
        return np.exp(comp)

    def score(self, x, t: float = 0.0) -> np.ndarray:
        """Gradient of the log density of the mixture convolved with N(0, t^2 I).

        With t = 0 this is the score of the mixture itself; t > 0 first widens
        every component covariance by t^2 I.
        """
        target = self if t == 0.0 else self.convolve(t)
        pts = _as_matrix(x, target.dim)
        resp = target.responsibilities(pts)  # (n, K)
        diff = pts[:, None, :] - target.means[None, :, :]
        comp_scores = -np.einsum("kij,nkj->nki", target.cov_inv, diff)
        out = np.einsum("nk,nki->ni", resp, comp_scores)
        return out[0] if np.ndim(x) == 1 else out

    # ------------------------------------------------------------------
    # noise convolution and denoising posteriors

    def convolve(self, t: float) -> "GaussianMixture":
        """Mixture of x0 + t*eps: same weights and means, covariances + t^2 I."""
        t = _validate_sigma(t)
        wide = self.covariances + (t * t) * np.eye(self.dim)[None, :, :]
        return GaussianMixture(self.weights, self.means, wide)

    def _posterior_pieces(self, sigma: float):
        """Shared conjugacy pieces for a scalar noise level.

        Returns (post_cov, post_chol, gain, marg_chol, marg_logdet) where the
        component posterior given y is N(gain_k @ y + shift_k, post_cov_k) and
        the marginal likelihood of y under component k is N(mu_k, cov_k +
        sigma^2 I) with Cholesky factor marg_chol_k.
        """
        sigma = _validate_sigma(sigma)
        inv_s2 = 1.0 / (sigma * sigma)
        eye = np.eye(self.dim)
        # Condition guards are exact and cheap: both matrices are spectral
        # shifts of the cached component eigenvalues.
        _check_condition(
            self.cov_eigvals[:, 0] + sigma * sigma,
            self.cov_eigvals[:, -1] + sigma * sigma,
            "noised covariance",
        )
        _check_condition(
            1.0 / self.cov_eigvals[:, -1] + inv_s2,
            1.0 / self.cov_eigvals[:, 0] + inv_s2,
            "posterior precision",
        )
        precision = self.cov_inv + inv_s2 * eye[None, :, :]
        post_cov = np.linalg.inv(precision)
        post_cov = 0.5 * (post_cov + np.swapaxes(post_cov, -1, -2))
        post_chol = np.linalg.cholesky(post_cov)
        gain = inv_s2 * post_cov  # maps y into the posterior mean
        marg = self.covariances + (sigma * sigma) * eye[None, :, :]
        marg_chol = np.linalg.cholesky(marg)
        marg_logdet = 2.0 * np.log(np.diagonal(marg_chol, axis1=-2, axis2=-1)).sum(axis=-1)
        return post_cov, post_chol, gain, marg_chol, marg_logdet

    def _posterior_log_weights(self, y: np.ndarray, sigma: float, marg_chol, marg_logdet):
        """log posterior component weights for rows of y at scalar sigma."""
        diff = y[:, None, :] - self.means[None, :, :]  # (n, K, D)
        sol = np.linalg.solve(marg_chol[None, :, :, :], diff[..., None])[..., 0]
        quad = np.einsum("nki,nki->nk", sol, sol)
        log_like = -0.5 * (self.dim * _LOG_2PI + marg_logdet[None, :] + quad)
        logits = log_like + self.log_weights[None, :]
        return logits - logsumexp(logits, axis=1, keepdims=True)

    def posterior(self, y, sigma: float) -> "GaussianMixture":
        """Exact denoising posterior q(x0 | y) for one observation y at level sigma.

        The posterior is again a Gaussian mixture: component k keeps covariance
        (cov_k^-1 + sigma^-2 I)^-1, gets mean cov_post (cov_k^-1 mu_k +
        sigma^-2 y), and is reweighted by the evidence N(y; mu_k, cov_k +
        sigma^2 I).
        """
        y = np.asarray(y, dtype=float)
        if y.shape != (self.dim,):
            raise ValueError(f"y must have shape ({self.dim},), got {y.shape}")
        sigma = _validate_sigma(sigma)
        post_cov, _, gain, marg_chol, marg_logdet = self._posterior_pieces(sigma)
        log_w = self._posterior_log_weights(y[None, :], sigma, marg_chol, marg_logdet)[0]
        shift = np.einsum("kij,kj->ki", post_cov, self.cov_inv_mean)
        means = shift + np.einsum("kij,j->ki", gain, y)
        return GaussianMixture(np.exp(log_w), means, post_cov)

    def posterior_mean(self, y, sigma) -> np.ndarray:
        """E[x0 | y] for a batch of observations.

        Parameters
        ----------
        y : array_like, shape (n, D) or (D,)
        sigma : float or array_like broadcastable to (n,)
            Per-row noise levels are allowed.

        Returns
        -------
        numpy.ndarray with the same shape as ``y``.
        """
        pts = _as_matrix(y, self.dim)
        n = pts.shape[0]
        sig = np.broadcast_to(np.asarray(sigma, dtype=float), (n,)).copy()
        if np.any(~np.isfinite(sig)) or np.any(sig <= 0.0):
            raise ValueError("noise levels must be positive and finite")
        inv_s2 = 1.0 / (sig * sig)  # (n,)
        _check_condition(
            self.cov_eigvals[None, :, 0] + (sig * sig)[:, None],
            self.cov_eigvals[None, :, -1] + (sig * sig)[:, None],
            "noised covariance",
        )

        eye = np.eye(self.dim)
        # Component posterior means, one linear solve per (n, k) pair.
        precision = self.cov_inv[None, :, :, :] + inv_s2[:, None, None, None] * eye
        rhs = self.cov_inv_mean[None, :, :] + inv_s2[:, None, None] * pts[:, None, :]
        comp_means = np.linalg.solve(precision, rhs[..., None])[..., 0]  # (n, K, D)

        # Component log evidences with per-row sigma.
        marg = self.covariances[None, :, :, :] + (sig * sig)[:, None, None, None] * eye
        chol = np.linalg.cholesky(marg)
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)  # (n, K)
        diff = pts[:, None, :] - self.means[None, :, :]
        sol = np.linalg.solve(chol, diff[..., None])[..., 0]
        quad = np.einsum("nki,nki->nk", sol, sol)
        logits = self.log_weights[None, :] - 0.5 * (self.dim * _LOG_2PI + logdet + quad)
        logits -= logsumexp(logits, axis=1, keepdims=True)
        out = np.einsum("nk,nki->ni", np.exp(logits), comp_means)
        return out[0] if np.ndim(y) == 1 else out

    def conditional_score(self, x_t, t, y, sigma=None) -> np.ndarray:
        """Score of q(x_t | y) at x_t, where x_t = x0 + t*eps and y = x0 + sigma*eps'.

        Computed through the effective-observation identity: conditioning on
        (y, sigma) and (x_t, t) jointly collapses to a single observation at
        level sigma_eff, and the score is t^-2 (E[x0 | y_eff] - x_t).
        ``sigma=None`` means no observation (score of the t-marginal). Both t
        and sigma may be scalars or per-row vectors.
        """
        pts = _as_matrix(x_t, self.dim)
        t_arr = np.asarray(t, dtype=float)
        y_eff, sigma_eff = effective_observation(y, sigma, pts, t_arr)
        t_sq = (t_arr * t_arr) if t_arr.ndim == 0 else (t_arr * t_arr)[:, None]
        out = (self.posterior_mean(y_eff, sigma_eff) - pts) / t_sq
        return out[0] if np.ndim(x_t) == 1 else out

    # ------------------------------------------------------------------
    # sampling

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n points, shape (n, D)."""
        if n < 0:
            raise ValueError("n must be nonnegative")
        idx = rng.choice(self.k, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[idx] + np.einsum("nij,nj->ni", self.chol[idx], eps)

    def sample_posterior(self, y, sigma: float, rng: np.random.Generator) -> np.ndarray:
        """One exact draw from q(x0 | y_row) for each row of y, at scalar sigma.

        This is the oracle counterpart of a trained generative denoiser and is
        vectorized across rows: component posterior covariances do not depend
        on y, so the per-row work is a categorical draw plus an affine map.
        """
        pts = _as_matrix(y, self.dim)
        n = pts.shape[0]
        sigma = _validate_sigma(sigma)
        post_cov, post_chol, gain, marg_chol, marg_logdet = self._posterior_pieces(sigma)
        log_w = self._posterior_log_weights(pts, sigma, marg_chol, marg_logdet)  # (n, K)
        gumbel = rng.gumbel(size=(n, self.k))
        idx = np.argmax(log_w + gumbel, axis=1)
        shift = np.einsum("kij,kj->ki", post_cov, self.cov_inv_mean)  # (K, D)
        mean = shift[idx] + np.einsum("nij,nj->ni", gain[idx], pts)
        eps = rng.standard_normal((n, self.dim))
        out = mean + np.einsum("nij,nj->ni", post_chol[idx], eps)
        return out[0] if np.ndim(y) == 1 else out

    # ------------------------------------------------------------------
    # linear-Gaussian measurements

    def linear_posterior(self, operator, y, sigma_y: float) -> "GaussianMixture":
        """Posterior q(x | y) for y = A x + sigma_y * eps with this mixture as prior.

        Parameters
        ----------
        operator : array_like, shape (M, D)
        y : array_like, shape (M,)
        sigma_y : float, positive measurement noise.

        Raises
        ------
        IllConditionedError
            If a per-component normal-equation matrix or evidence covariance
            exceeds the condition bound.
        """
        a = np.asarray(operator, dtype=float)
        if a.ndim != 2 or a.shape[1] != self.dim:
            raise ValueError(f"operator must be (M, {self.dim}), got {a.shape}")
        m = a.shape[0]
        y = np.asarray(y, dtype=float)
        if y.shape != (m,):
            raise ValueError(f"y must have shape ({m},), got {y.shape}")
        sigma_y = _validate_sigma(sigma_y)
        inv_s2 = 1.0 / (sigma_y * sigma_y)

        precision = self.cov_inv + inv_s2 * (a.T @ a)[None, :, :]
        eig_p = np.linalg.eigvalsh(precision)
        _check_condition(eig_p[:, 0], eig_p[:, -1], "measurement normal equations")
        post_cov = np.linalg.inv(precision)
        post_cov = 0.5 * (post_cov + np.swapaxes(post_cov, -1, -2))
        rhs = self.cov_inv_mean + inv_s2 * (a.T @ y)[None, :]
        means = np.einsum("kij,kj->ki", post_cov, rhs)

        evid_cov = np.einsum("ij,kjl,ml->kim", a, self.covariances, a) + (
            sigma_y * sigma_y
        ) * np.eye(m)[None, :, :]
        eig_e = np.linalg.eigvalsh(evid_cov)
        _check_condition(eig_e[:, 0], eig_e[:, -1], "evidence covariance")
        diff = y[None, :] - np.einsum("ij,kj->ki", a, self.means)
        sol = np.linalg.solve(evid_cov, diff[..., None])[..., 0]
        quad = np.einsum("ki,ki->k", diff, sol)
        logdet = np.log(eig_e).sum(axis=1)
        logits = self.log_weights - 0.5 * (m * _LOG_2PI + logdet + quad)
        logits -= logsumexp(logits)
        return GaussianMixture(np.exp(logits), means, post_cov)

    # ------------------------------------------------------------------
    # summaries and serialization

    def cdf_1d(self, x) -> np.ndarray:
        """Mixture CDF for 1-D mixtures; the exact reference for KS tests."""
        if self.dim != 1:
            raise ValueError("cdf_1d is defined for 1-D mixtures only")
        from scipy.stats import norm

        pts = np.atleast_1d(np.asarray(x, dtype=float))
        z = (pts[:, None] - self.means[None, :, 0]) / np.sqrt(self.covariances[None, :, 0, 0])
        out = norm.cdf(z) @ self.weights
        return float(out[0]) if np.ndim(x) == 0 else out

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        """Full covariance of the mixture (between + within components)."""
        mu = self.mean()
        centered = self.means - mu[None, :]
        between = np.einsum("k,ki,kj->ij", self.weights, centered, centered)
        within = np.einsum("k,kij->ij", self.weights, self.covariances)
        return between + within

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "GaussianMixture":
        missing = {"weights", "means", "covariances"} - set(payload)
        if missing:
            raise ValueError(f"mixture payload missing keys: {sorted(missing)}")
        return cls(payload["weights"], payload["means"], payload["covariances"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "GaussianMixture":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def __repr__(self) -> str:
        return f"GaussianMixture(k={self.k}, dim={self.dim})"


def effective_observation(
    y: Optional[Union[np.ndarray, Sequence[float]]],
    sigma: Optional[float],
    x_t,
    t,
):
    """Collapse an observation (y, sigma) and a noisy state (x_t, t) into one.

    Two independent Gaussian views of the same x0 are equivalent to a single
    view at a sharper level:

        sigma_eff = (sigma^-2 + t^-2)^(-1/2)
        y_eff     = sigma_eff^2 (sigma^-2 y + t^-2 x_t)

    ``sigma=None`` is the unconditional limit sigma -> inf, returning (x_t, t)
    unchanged. This function is the single source of truth for the identity;
    samplers and trainers call it rather than re-deriving it.

    Parameters
    ----------
    y : array_like or None, shape (D,) or (n, D)
    sigma : float, array_like broadcastable against rows of x_t, or None
    x_t : array_like, shape (n, D) or (D,)
    t : float or array_like broadcastable against rows of x_t

    Returns
    -------
    (y_eff, sigma_eff) with y_eff shaped like x_t; sigma_eff is a float when
    both sigma and t are scalar, else an array over rows.
    """
    x_arr = np.asarray(x_t, dtype=float)
    t_arr = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(t_arr)) or np.any(t_arr <= 0.0):
        raise ValueError("t must be positive and finite")
    if sigma is None:
        sigma_eff = float(t_arr) if t_arr.ndim == 0 else t_arr
        return x_arr.copy(), sigma_eff
    sig_arr = np.asarray(sigma, dtype=float)
    if np.any(~np.isfinite(sig_arr)) or np.any(sig_arr <= 0.0):
        raise ValueError("sigma must be positive and finite")
    y_arr = np.asarray(y, dtype=float)
    inv = 1.0 / (sig_arr * sig_arr) + 1.0 / (t_arr * t_arr)
    sigma_eff = inv**-0.5
    if x_arr.ndim == 2 and y_arr.ndim == 1:
        y_arr = y_arr[None, :]
    scale = (sigma_eff * sigma_eff) if np.ndim(sigma_eff) == 0 else (sigma_eff * sigma_eff)[..., None]
    t_sq = (t_arr * t_arr) if t_arr.ndim == 0 else (t_arr * t_arr)[..., None]
    sig_sq = (sig_arr * sig_arr) if sig_arr.ndim == 0 else (sig_arr * sig_arr)[..., None]
    y_eff = scale * (y_arr / sig_sq + x_arr / t_sq)
    sigma_eff = float(sigma_eff) if np.ndim(sigma_eff) == 0 else sigma_eff
    return y_eff, sigma_eff


# ----------------------------------------------------------------------
# preset mixtures used by tests, docs, and the CLI


def two_mode_1d(center: float = 2.0, component_var: float = 0.25, weight: float = 0.5) -> GaussianMixture:
    """Two symmetric modes at -center and +center in 1-D."""
    return GaussianMixture(
        [weight, 1.0 - weight],
        [[-center], [center]],
        [[[component_var]], [[component_var]]],
    )


def ring_2d(modes: int = 8, radius: float = 1.0, component_std: float = 0.1) -> GaussianMixture:
    """Equal-weight isotropic modes evenly spaced on a circle."""
    if modes < 1:
        raise ValueError("modes must be positive")
    angles = 2.0 * np.pi * np.arange(modes) / modes
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    covs = np.repeat((component_std**2 * np.eye(2))[None, :, :], modes, axis=0)
    return GaussianMixture(np.full(modes, 1.0 / modes), means, covs)


def single_gaussian(mean, cov) -> GaussianMixture:
    """One-component mixture; handy for conjugacy cross-checks."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 0:
        cov = cov[None, None]
    return GaussianMixture([1.0], mean[None, :], cov[None, :, :])
