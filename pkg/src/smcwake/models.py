"""Generative models p(z) p(x|z) with analytic posteriors where available.

Models are immutable after construction and evaluate priors / likelihoods on
batches of latent points: ``prior_logpdf`` and ``log_lik`` accept an
``(n, latent_dim)`` array (or a single ``(latent_dim,)`` point) and return
``(n,)`` (or a scalar). Log-densities are never NaN; out-of-support points
yield -inf.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np
from scipy.linalg import cho_solve, cholesky

from .numkit import GaussianDist, as_generator, mvn_logpdf, mvn_sample

__all__ = [
    "GenerativeModel",
    "NoAnalyticEvidenceError",
    "BoxUniform",
    "ConjugateGaussian1D",
    "GaussianLinearModel",
    "linear_posterior_params",
    "TwoMoonsModel",
    "two_moons_observation",
    "make_dataset",
]

TWO_MOONS_OFFSET = np.array([0.25, 0.0])
TWO_MOONS_R_MEAN = 0.1
TWO_MOONS_R_STD = 0.01


class NoAnalyticEvidenceError(ValueError):
    """The model does not expose a closed-form evidence."""


@runtime_checkable
class GenerativeModel(Protocol):
    latent_dim: int
    obs_dim: int

    def prior_sample(self, n: int, rng) -> np.ndarray: ...

    def prior_logpdf(self, z): ...

    def log_lik(self, x, z): ...

    def sample_joint(self, rng) -> tuple[np.ndarray, np.ndarray]: ...


def _as_batch(z, dim: int) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=float)
    if z.ndim == 0:
        z = z.reshape(1)
    single = z.ndim == 1
    pts = np.atleast_2d(z)
    if pts.shape[1] != dim:
        raise ValueError(f"latent dimension {pts.shape[1]} != {dim}")
    return pts, single


def _maybe_scalar(vals: np.ndarray, single: bool):
    return float(vals[0]) if single else vals


@dataclass(frozen=True)
class BoxUniform:
    """Uniform distribution on an axis-aligned box; doubles as a proposal."""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "low", np.atleast_1d(np.asarray(self.low, dtype=float)))
        object.__setattr__(self, "high", np.atleast_1d(np.asarray(self.high, dtype=float)))
        if np.any(self.high <= self.low):
            raise ValueError("box must have positive volume")

    @property
    def dim(self) -> int:
        return self.low.size

    @property
    def log_volume(self) -> float:
        return float(np.sum(np.log(self.high - self.low)))

    def logpdf(self, z):
        pts, single = _as_batch(z, self.dim)
        inside = np.all((pts >= self.low) & (pts <= self.high), axis=1)
        out = np.where(inside, -self.log_volume, -np.inf)
        return _maybe_scalar(out, single)

    def sample(self, n: int, rng) -> np.ndarray:
        gen = as_generator(rng)
        return self.low + (self.high - self.low) * gen.random((n, self.dim))


@dataclass(frozen=True)
class ConjugateGaussian1D:
    """z ~ N(0, prior_std^2), x | z ~ N(z, noise_std^2); fully conjugate.

    With the defaults the posterior is N(100/101 x, 100/101) and the evidence
    is N(x; 0, 101).
    """

    prior_std: float = 10.0
    noise_std: float = 1.0
    latent_dim: int = field(default=1, init=False)
    obs_dim: int = field(default=1, init=False)

    def prior_sample(self, n: int, rng) -> np.ndarray:
        gen = as_generator(rng)
        return gen.normal(0.0, self.prior_std, (n, 1))

    def prior_logpdf(self, z):
        pts, single = _as_batch(z, 1)
        v = self.prior_std**2
        out = -0.5 * (np.log(2 * np.pi * v) + pts[:, 0] ** 2 / v)
        return _maybe_scalar(out, single)

    def log_lik(self, x, z):
        pts, single = _as_batch(z, 1)
        x = float(np.asarray(x).reshape(()))
        v = self.noise_std**2
        out = -0.5 * (np.log(2 * np.pi * v) + (x - pts[:, 0]) ** 2 / v)
        return _maybe_scalar(out, single)

    def sample_joint(self, rng) -> tuple[np.ndarray, np.ndarray]:
        gen = as_generator(rng)
        z = self.prior_sample(1, gen)[0]
        x = gen.normal(z[0], self.noise_std, 1)
        return z, x

    def analytic_posterior(self, x) -> GaussianDist:
        x = float(np.asarray(x).reshape(()))
        prec = 1.0 / self.prior_std**2 + 1.0 / self.noise_std**2
        var = 1.0 / prec
        mean = var * x / self.noise_std**2
        return GaussianDist(np.array([mean]), np.array([[np.sqrt(var)]]))

    def analytic_log_evidence(self, x) -> float:
        x = float(np.asarray(x).reshape(()))
        v = self.prior_std**2 + self.noise_std**2
        return -0.5 * (np.log(2 * np.pi * v) + x**2 / v)


@dataclass(frozen=True)
class GaussianLinearModel:
    """z ~ N(0, sigma^2 I_p), x | z ~ N(A z, tau^2 I_d) with A of shape (d, p).

    The posterior is N(M^-1 b, M^-1) with M = I_p / sigma^2 + A^T A / tau^2 and
    b = A^T x / tau^2 (latent-dimension quantities), and the evidence is
    N(x; 0, sigma^2 A A^T + tau^2 I_d).
    """

    design: np.ndarray
    prior_std: float = 1.0
    noise_std: float = 1.0

    def __post_init__(self):
        design = np.atleast_2d(np.asarray(self.design, dtype=float))
        object.__setattr__(self, "design", design)

    @property
    def latent_dim(self) -> int:
        return self.design.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.design.shape[0]

    @classmethod
    def from_seed(cls, latent_dim: int, obs_dim: int, seed: int,
                  prior_std: float = 1.0, noise_std: float = 1.0,
                  singular_values=None) -> "GaussianLinearModel":
        """Standard-normal design from a seed; optional spectrum reshaping.

        ``singular_values`` replaces the design's singular values (useful for
        building ill-conditioned instances with a known condition number).
        """
        gen = as_generator(seed)
        a = gen.standard_normal((obs_dim, latent_dim))
        if singular_values is not None:
            u, _, vt = np.linalg.svd(a, full_matrices=False)
            a = u @ np.diag(np.asarray(singular_values, dtype=float)) @ vt
        return cls(a, prior_std, noise_std)

    @classmethod
    def from_csv(cls, path, prior_std: float = 1.0, noise_std: float = 1.0) -> "GaussianLinearModel":
        """Load the design matrix from CSV (rows = observation dimension)."""
        a = np.loadtxt(path, delimiter=",", ndmin=2)
        return cls(a, prior_std, noise_std)

    def prior_sample(self, n: int, rng) -> np.ndarray:
        gen = as_generator(rng)
        return gen.normal(0.0, self.prior_std, (n, self.latent_dim))

    def prior_logpdf(self, z):
        pts, single = _as_batch(z, self.latent_dim)
        v = self.prior_std**2
        out = -0.5 * (self.latent_dim * np.log(2 * np.pi * v) + np.sum(pts**2, axis=1) / v)
        return _maybe_scalar(out, single)

    def log_lik(self, x, z):
        pts, single = _as_batch(z, self.latent_dim)
        x = np.asarray(x, dtype=float).reshape(self.obs_dim)
        v = self.noise_std**2
        resid = x - pts @ self.design.T
        out = -0.5 * (self.obs_dim * np.log(2 * np.pi * v) + np.sum(resid**2, axis=1) / v)
        return _maybe_scalar(out, single)

    def sample_joint(self, rng) -> tuple[np.ndarray, np.ndarray]:
        gen = as_generator(rng)
        z = self.prior_sample(1, gen)[0]
        x = self.design @ z + gen.normal(0.0, self.noise_std, self.obs_dim)
        return z, x

    def analytic_posterior(self, x) -> GaussianDist:
        return linear_posterior_params(self, x)

    def analytic_log_evidence(self, x) -> float:
        x = np.asarray(x, dtype=float).reshape(self.obs_dim)
        cov = self.prior_std**2 * (self.design @ self.design.T) + self.noise_std**2 * np.eye(self.obs_dim)
        return float(mvn_logpdf(x, GaussianDist.from_cov(np.zeros(self.obs_dim), cov)))


def linear_posterior_params(model: GaussianLinearModel, x) -> GaussianDist:
    """Closed-form posterior N(M^-1 b, M^-1) of the Gaussian linear model."""
    x = np.asarray(x, dtype=float).reshape(model.obs_dim)
    a = model.design
    m = np.eye(model.latent_dim) / model.prior_std**2 + (a.T @ a) / model.noise_std**2
    b = a.T @ x / model.noise_std**2
    try:
        m_chol = cholesky(m, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError("posterior precision is ill-conditioned") from exc
    mean = cho_solve((m_chol, True), b)
    cov = cho_solve((m_chol, True), np.eye(model.latent_dim))
    cov = 0.5 * (cov + cov.T)  # symmetrize round-off before factoring
    return GaussianDist.from_cov(mean, cov)


def analytic_log_evidence(model, x) -> float:
    """Dispatch to the model's closed-form evidence; error when absent."""
    fn = getattr(model, "analytic_log_evidence", None)
    if fn is None:
        raise NoAnalyticEvidenceError(f"{type(model).__name__} has no analytic evidence")
    return fn(x)


def two_moons_g(z) -> np.ndarray:
    """Deterministic part of the two-moons forward map."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    g1 = -np.abs(z[:, 0] + z[:, 1]) / np.sqrt(2.0)
    g2 = (-z[:, 0] + z[:, 1]) / np.sqrt(2.0)
    return np.stack([g1, g2], axis=1)


def two_moons_observation(z, a: float, r: float) -> np.ndarray:
    """Forward map x = p + g(z) with fixed auxiliary draws a and r."""
    p = np.array([r * np.cos(a) + 0.25, r * np.sin(a)])
    return p + two_moons_g(z)[0]


@dataclass(frozen=True)
class TwoMoonsModel:
    """Crescent-shaped simulator benchmark on z in [-1, 1]^2.

    The likelihood has the closed polar form
    p(x|z) = N(rho; 0.1, 0.01^2) / (pi * rho) with rho = |x - g(z) - (0.25, 0)|,
    supported where the recovered angle lies in (-pi/2, pi/2); the negative-r
    branch carries mass < 1e-23 and is neglected.
    """

    latent_dim: int = field(default=2, init=False)
    obs_dim: int = field(default=2, init=False)

    @property
    def prior(self) -> BoxUniform:
        return BoxUniform(np.array([-1.0, -1.0]), np.array([1.0, 1.0]))

    def prior_sample(self, n: int, rng) -> np.ndarray:
        return self.prior.sample(n, rng)

    def prior_logpdf(self, z):
        return self.prior.logpdf(z)

    def log_lik(self, x, z):
        pts, single = _as_batch(z, 2)
        x = np.asarray(x, dtype=float).reshape(2)
        u = x - two_moons_g(pts) - TWO_MOONS_OFFSET
        rho = np.sqrt(np.sum(u**2, axis=1))
        with np.errstate(divide="ignore", invalid="ignore"):
            log_r = (
                -0.5 * np.log(2 * np.pi * TWO_MOONS_R_STD**2)
                - (rho - TWO_MOONS_R_MEAN) ** 2 / (2 * TWO_MOONS_R_STD**2)
            )
            out = log_r - np.log(np.pi) - np.log(rho)
        out = np.where(u[:, 0] > 0, out, -np.inf)
        return _maybe_scalar(out, single)

    def simulate(self, z, rng) -> np.ndarray:
        """Draw a ~ U(-pi/2, pi/2), r ~ N(0.1, 0.01^2) and apply the forward map."""
        gen = as_generator(rng)
        a = gen.uniform(-np.pi / 2, np.pi / 2)
        r = gen.normal(TWO_MOONS_R_MEAN, TWO_MOONS_R_STD)
        return two_moons_observation(np.asarray(z, dtype=float), a, r)

    def sample_joint(self, rng) -> tuple[np.ndarray, np.ndarray]:
        gen = as_generator(rng)
        z = self.prior_sample(1, gen)[0]
        return z, self.simulate(z, gen)


def two_moons_simulate(z, rng) -> np.ndarray:
    return TwoMoonsModel().simulate(z, rng)


def make_dataset(model, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw n (z, x) pairs from the model joint; returns (latents, observations)."""
    gen = as_generator(rng)
    zs, xs = [], []
    for _ in range(n):
        z, x = model.sample_joint(gen)
        zs.append(z)
        xs.append(x)
    return np.array(zs), np.array(xs)
