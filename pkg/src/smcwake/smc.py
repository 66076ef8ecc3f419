"""Likelihood-tempered SMC: tempered targets, adaptive or fixed temperature
ladders, random-walk Metropolis-Hastings mutation, ESS-triggered resampling,
and the unbiased evidence estimate.

A single run owns its particle arrays; runs for different (datapoint, run)
pairs are independent given their RNG streams, so results depend only on
(seed, datapoint index, run index) and never on execution order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .numkit import RngStream, as_generator, ess, log_sum_exp, resample

__all__ = [
    "TemperSchedule",
    "MutationConfig",
    "MUTATION_PRESETS",
    "ParticleSystem",
    "SmcRunRecord",
    "ParticleCollapseError",
    "tempered_log_target",
    "mh_mutation_sweep",
    "solve_next_temperature",
    "lt_smc_run",
]

MIN_TEMPER_STEP = 1e-6
MAX_STAGES = 1000


class ParticleCollapseError(RuntimeError):
    """Every particle weight vanished at some tempering stage."""

    def __init__(self, stage: int, temperature: float):
        super().__init__(
            f"particle system collapsed at stage {stage} (temperature {temperature:.6g}): "
            "all weights are zero"
        )
        self.stage = stage
        self.temperature = temperature


@dataclass(frozen=True)
class TemperSchedule:
    """Temperature ladder: either a fixed strictly increasing list from 0 to 1
    or adaptive selection targeting a minimum effective sample size."""

    temperatures: tuple | None = None
    ess_min: float | None = None  # absolute target; None means K/2 at run time

    @classmethod
    def fixed(cls, temperatures) -> "TemperSchedule":
        temps = tuple(float(t) for t in temperatures)
        if len(temps) < 2 or temps[0] != 0.0 or temps[-1] != 1.0:
            raise ValueError("fixed schedule must run from 0 to 1")
        if any(b <= a for a, b in zip(temps, temps[1:])):
            raise ValueError("fixed schedule must be strictly increasing")
        return cls(temperatures=temps)

    @classmethod
    def linear(cls, n_stages: int) -> "TemperSchedule":
        return cls.fixed(np.linspace(0.0, 1.0, n_stages))

    @classmethod
    def adaptive(cls, ess_min: float | None = None) -> "TemperSchedule":
        return cls(ess_min=ess_min)

    @property
    def is_fixed(self) -> bool:
        return self.temperatures is not None

    def resolved_ess_min(self, k: int) -> float:
        target = k / 2.0 if self.ess_min is None else float(self.ess_min)
        if not (1.0 < target <= k):
            raise ValueError(f"adaptive ESS target must lie in (1, K]; got {target} for K={k}")
        return target


@dataclass(frozen=True)
class MutationConfig:
    """Random-walk MH sweep settings.

    ``target`` picks which tempered density the kernel leaves invariant:
    "current" (the temperature already reached; exact evidence unbiasedness)
    or "next" (the temperature being weighted).
    """

    steps: int = 5
    step_std: float = float(np.sqrt(0.1))
    target: str = "current"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("mutation needs at least one MH step")
        if self.step_std <= 0:
            raise ValueError("step-std must be positive")
        if self.target not in ("current", "next"):
            raise ValueError("mutation target must be 'current' or 'next'")


MUTATION_PRESETS = {
    "two-moons": MutationConfig(steps=5, step_std=0.1),
    "gaussian-fine": MutationConfig(steps=100, step_std=0.01),
    "gaussian-coarse": MutationConfig(steps=10, step_std=0.1),
}


@dataclass
class ParticleSystem:
    """K weighted atoms at one tempering stage.

    ``log_carry`` holds the post-resampling-decision weights: zeros right
    after a resample, log of the normalized weights otherwise.
    """

    atoms: np.ndarray
    log_weights: np.ndarray
    weights: np.ndarray
    temperature: float
    log_carry: np.ndarray

    @property
    def n_particles(self) -> int:
        return self.atoms.shape[0]


@dataclass
class SmcRunRecord:
    """Final-stage particle set plus the log evidence estimate of one run."""

    atoms: np.ndarray
    weights: np.ndarray
    log_evidence: float
    temperatures: np.ndarray
    ess_trace: np.ndarray
    accept_rates: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_particles(self) -> int:
        return self.atoms.shape[0]

    @property
    def final_ess(self) -> float:
        return float(self.ess_trace[-1])

    def posterior_mean(self) -> np.ndarray:
        return self.weights @ self.atoms

    def posterior_cov(self) -> np.ndarray:
        mean = self.posterior_mean()
        centered = self.atoms - mean
        return (self.weights[:, None] * centered).T @ centered

    def draw_atom(self, rng) -> np.ndarray:
        idx = resample(self.weights, 1, "multinomial", rng)[0]
        return self.atoms[idx].copy()


def _scaled_log_lik(tau: float, log_lik):
    """tau * log_lik with the convention 0 * (-inf) = 0 (likelihood^0 = 1)."""
    if tau == 0.0:
        return np.zeros_like(np.asarray(log_lik, dtype=float))
    return tau * np.asarray(log_lik, dtype=float)


def tempered_log_target(model, x, z, tau: float):
    """log p(z) + tau * log p(x|z); -inf propagates, never NaN."""
    return model.prior_logpdf(z) + _scaled_log_lik(tau, model.log_lik(x, z))


class MutationResult(NamedTuple):
    atoms: np.ndarray
    prior_logpdf: np.ndarray
    log_lik: np.ndarray
    accept_rate: float


def mh_mutation_sweep(atoms, model, x, tau: float, steps: int, step_std: float,
                      rng, prior_logpdf=None, log_lik=None) -> MutationResult:
    """Evolve each atom independently by ``steps`` random-walk MH proposals
    that leave the tempered target at temperature ``tau`` invariant.

    Cached prior/likelihood values may be passed in and are returned updated,
    so callers never re-evaluate the model on unchanged atoms.
    """
    gen = as_generator(rng)
    atoms = np.array(atoms, dtype=float, copy=True)
    k = atoms.shape[0]
    if prior_logpdf is None:
        prior_logpdf = np.asarray(model.prior_logpdf(atoms), dtype=float)
    else:
        prior_logpdf = np.array(prior_logpdf, dtype=float, copy=True)
    if log_lik is None:
        log_lik = np.asarray(model.log_lik(x, atoms), dtype=float)
    else:
        log_lik = np.array(log_lik, dtype=float, copy=True)
    accepted = 0
    current = prior_logpdf + _scaled_log_lik(tau, log_lik)
    for _ in range(steps):
        proposal = atoms + step_std * gen.standard_normal(atoms.shape)
        prop_prior = np.asarray(model.prior_logpdf(proposal), dtype=float)
        prop_lik = np.asarray(model.log_lik(x, proposal), dtype=float)
        prop_target = prop_prior + _scaled_log_lik(tau, prop_lik)
        with np.errstate(invalid="ignore"):
            log_alpha = prop_target - current
        # -inf minus -inf is NaN; the comparison below rejects those proposals.
        accept = np.log(gen.random(k)) < log_alpha
        atoms[accept] = proposal[accept]
        prior_logpdf[accept] = prop_prior[accept]
        log_lik[accept] = prop_lik[accept]
        current[accept] = prop_target[accept]
        accepted += int(np.count_nonzero(accept))
    return MutationResult(atoms, prior_logpdf, log_lik, accepted / (steps * k))


def solve_next_temperature(log_lik, current_tau: float, ess_min: float) -> float:
    """Temperature increment delta solving ESS(delta) = ess_min by bisection.

    ESS(delta) = {sum exp(-delta V)}^2 / sum exp(-2 delta V) with potentials
    V = -log p(x|z) of the current atoms. Returns 1 - current_tau when even
    the full jump keeps ESS above the target; the increment is clamped below
    at MIN_TEMPER_STEP.
    """
    log_lik = np.asarray(log_lik, dtype=float)
    k = log_lik.size
    remaining = 1.0 - current_tau
    if remaining <= 0:
        raise ValueError("temperature is already 1")

    def ess_at(delta: float) -> float:
        a = delta * log_lik
        m = np.max(a)
        if not np.isfinite(m):
            return 0.0
        e = np.exp(a - m)
        s1 = e.sum()
        return float(s1 * s1 / np.sum(e * e))

    if ess_at(remaining) >= ess_min:
        return remaining
    lo, hi = 0.0, remaining
    tol = 1e-6 * k
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        val = ess_at(mid)
        if abs(val - ess_min) < tol:
            lo = mid
            break
        if val > ess_min:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    return max(lo, MIN_TEMPER_STEP)


def lt_smc_run(model, x, k: int, schedule: TemperSchedule,
               mutation: MutationConfig = MutationConfig(),
               ess_resample_min: float | None = None,
               resample_scheme: str = "systematic",
               rng: RngStream | int = 0,
               max_stages: int = MAX_STAGES) -> SmcRunRecord:
    """One likelihood-tempered SMC run producing a weighted posterior
    approximation and the log evidence estimate.

    The log evidence accumulates per-stage factors
    logsumexp(log_carry + dtau * log_lik) - logsumexp(log_carry), the
    ESS-gated generalization of the product of mean unnormalized weights
    (they coincide when resampling happens every stage).
    """
    if k < 2:
        raise ValueError("need at least two particles")
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    if ess_resample_min is None:
        ess_resample_min = k / 2.0

    atoms = model.prior_sample(k, stream.child("init"))
    prior_lp = np.asarray(model.prior_logpdf(atoms), dtype=float)
    log_lik = np.asarray(model.log_lik(x, atoms), dtype=float)
    weights = np.full(k, 1.0 / k)
    tau = 0.0
    log_c = 0.0
    temperatures = [0.0]
    ess_trace = [float(k)]
    accept_rates = []
    fixed_idx = 1

    for stage in range(1, max_stages + 1):
        if schedule.is_fixed:
            next_tau = schedule.temperatures[fixed_idx]
            fixed_idx += 1
        else:
            delta = solve_next_temperature(log_lik, tau, schedule.resolved_ess_min(k))
            next_tau = min(1.0, tau + delta)
        if stage == max_stages and next_tau < 1.0:
            warnings.warn(
                f"adaptive tempering hit the {max_stages}-stage cap at "
                f"temperature {tau:.6g}; jumping straight to 1",
                RuntimeWarning,
                stacklevel=2,
            )
            next_tau = 1.0

        if ess(weights) < ess_resample_min:
            idx = resample(weights, k, resample_scheme, stream.child("resample", stage))
            atoms = atoms[idx]
            prior_lp = prior_lp[idx]
            log_lik = log_lik[idx]
            log_carry = np.zeros(k)
        else:
            with np.errstate(divide="ignore"):
                log_carry = np.log(weights)

        mut_tau = tau if mutation.target == "current" else next_tau
        result = mh_mutation_sweep(atoms, model, x, mut_tau, mutation.steps,
                                   mutation.step_std, stream.child("mutate", stage),
                                   prior_logpdf=prior_lp, log_lik=log_lik)
        atoms, prior_lp, log_lik = result.atoms, result.prior_logpdf, result.log_lik
        accept_rates.append(result.accept_rate)

        with np.errstate(invalid="ignore"):
            log_w = log_carry + (next_tau - tau) * log_lik
        log_w = np.where(np.isnan(log_w), -np.inf, log_w)  # 0 * -inf at dead atoms
        if not np.any(np.isfinite(log_w)):
            raise ParticleCollapseError(stage, next_tau)
        log_c += log_sum_exp(log_w) - log_sum_exp(log_carry)
        weights = np.exp(log_w - log_sum_exp(log_w))
        weights /= weights.sum()
        tau = next_tau
        temperatures.append(tau)
        ess_trace.append(ess(weights))
        if tau >= 1.0:
            break

    return SmcRunRecord(
        atoms=atoms,
        weights=weights,
        log_evidence=float(log_c),
        temperatures=np.asarray(temperatures),
        ess_trace=np.asarray(ess_trace),
        accept_rates=np.asarray(accept_rates),
    )
