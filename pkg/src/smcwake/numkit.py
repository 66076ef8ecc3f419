"""Seedable numerical primitives: splittable RNG streams, log-domain weight
arithmetic, resampling, effective sample size, and Gaussian kernels.

Everything here is a pure function of its inputs plus an explicit RNG stream,
so concurrent use is safe.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, solve_triangular

__all__ = [
    "RngStream",
    "as_generator",
    "EmptyMassError",
    "log_sum_exp",
    "normalize",
    "ess",
    "resample",
    "GaussianDist",
    "mvn_logpdf",
    "mvn_sample",
]

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    # SplitMix64 finalizer; deterministic stream-id derivation.
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    if isinstance(tag, str):
        digest = hashlib.blake2b(tag.encode(), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"stream tag must be int or str, got {type(tag).__name__}")


@dataclass(frozen=True)
class RngStream:
    """Counter-based splittable random stream keyed by (seed, stream id).

    Identical (seed, stream) pairs replay bit-identical draw sequences;
    distinct stream ids index statistically independent Philox streams.
    Derive sub-streams with :meth:`child` so that e.g. every
    (datapoint, run, stage) triple owns its own deterministic stream.
    """

    seed: int
    stream: int = 0

    def child(self, *tags) -> "RngStream":
        s = self.stream
        for tag in tags:
            s = _splitmix64(s ^ _tag_to_int(tag))
        return RngStream(self.seed, s)

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def as_generator(rng) -> np.random.Generator:
    """Accept an RngStream, a numpy Generator, or an integer seed."""
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng)).generator()
    raise TypeError(f"cannot interpret {type(rng).__name__} as a random source")


class EmptyMassError(ValueError):
    """All log weights are -inf: no probability mass to normalize."""


def log_sum_exp(values) -> float:
    """log(sum(exp(values))) for log-domain inputs, shift-invariant.

    Raises EmptyMassError when every entry is -inf.
    """
    values = np.asarray(values, dtype=float)
    m = np.max(values) if values.size else -np.inf
    if not np.isfinite(m):
        if values.size and np.isnan(m):
            raise ValueError("log-domain weights must not contain NaN")
        raise EmptyMassError("all log-domain entries are -inf")
    return float(m + np.log(np.sum(np.exp(values - m))))


def normalize(log_weights) -> tuple[np.ndarray, float]:
    """Normalize log-domain weights.

    Returns (weights, log_norm) where weights sum to one and
    log_norm = log(mean(exp(log_weights))), the per-stage evidence factor.
    """
    lw = np.asarray(log_weights, dtype=float)
    total = log_sum_exp(lw)
    w = np.exp(lw - total)
    w /= w.sum()  # remove residual round-off so sum is exactly representable
    return w, total - np.log(lw.size)


def ess(weights) -> float:
    """Effective sample size 1 / sum(w_i^2) of normalized weights; in [1, K]."""
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def resample(weights, k_out: int, scheme: str = "systematic", rng=None) -> np.ndarray:
    """Draw k_out ancestor indices from normalized weights.

    Both schemes are unbiased (expected count of index i is k_out * w_i).
    Systematic uses a single uniform and stratifies; multinomial draws iid.
    """
    w = np.asarray(weights, dtype=float)
    if k_out < 1:
        raise ValueError("k_out must be >= 1")
    gen = as_generator(rng)
    cdf = np.cumsum(w)
    cdf[-1] = 1.0  # guard the final bin against round-off
    if scheme == "systematic":
        u = gen.random()
        positions = (np.arange(k_out) + u) / k_out
    elif scheme == "multinomial":
        positions = gen.random(k_out)
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    return np.searchsorted(cdf, positions, side="right").clip(0, w.size - 1)


@dataclass
class GaussianDist:
    """Multivariate normal given by mean and a lower-triangular factor.

    Covariance is factor @ factor.T; the factor diagonal must be strictly
    positive so the implied covariance is symmetric positive definite.
    """

    mean: np.ndarray
    factor: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.factor = np.atleast_2d(np.asarray(self.factor, dtype=float))
        if self.factor.shape != (self.dim, self.dim):
            raise ValueError("factor must be square and match the mean dimension")
        if np.any(np.diag(self.factor) <= 0):
            raise ValueError("factor diagonal must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def cov(self) -> np.ndarray:
        return self.factor @ self.factor.T

    @classmethod
    def from_cov(cls, mean, cov, jitter: float = 0.0) -> "GaussianDist":
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if jitter:
            cov = cov + jitter * np.eye(cov.shape[0])
        try:
            factor = cholesky(cov, lower=True)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - scipy raises its own
            raise ValueError("covariance is not positive definite") from exc
        return cls(mean, factor)

    def logpdf(self, z) -> np.ndarray | float:
        return mvn_logpdf(z, self)

    def sample(self, n: int, rng) -> np.ndarray:
        return mvn_sample(self, rng, n)


def mvn_logpdf(z, dist: GaussianDist):
    """Exact Gaussian log-density via triangular solves against the factor.

    Accepts a single point (dim,) or a batch (n, dim); returns a float or (n,).
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    pts = np.atleast_2d(z)
    if pts.shape[1] != dist.dim:
        raise ValueError(f"point dimension {pts.shape[1]} != distribution dimension {dist.dim}")
    resid = solve_triangular(dist.factor, (pts - dist.mean).T, lower=True)
    quad = np.sum(resid * resid, axis=0)
    log_det = 2.0 * np.sum(np.log(np.diag(dist.factor)))
    out = -0.5 * (dist.dim * np.log(2.0 * np.pi) + log_det + quad)
    return float(out[0]) if single else out


def mvn_sample(dist: GaussianDist, rng, n: int | None = None) -> np.ndarray:
    """Draw mean + factor @ eps with eps standard normal; (n, dim) or (dim,)."""
    gen = as_generator(rng)
    size = 1 if n is None else n
    eps = gen.standard_normal((size, dist.dim))
    out = dist.mean + eps @ dist.factor.T
    return out[0] if n is None else out
