"""Training loops and baselines: tempered-SMC wake training (with the three
store-backed estimators), its particle-MCMC variant, wake-phase and defensive
wake-phase SNIS training, Markovian score climbing, and the stop-gradient
surrogate objective used in the proposal-pathology study.

Gradient conventions: every estimator returns the descent direction for the
average inclusive KL, so loops step ``params <- params - lr * grad``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import AdamState, adam_step
from .estimators import (
    GradientEstimate,
    SamplerStore,
    grad_estimate_a,
    grad_estimate_b,
    grad_estimate_c,
    grad_estimate_naive,
    store_append,
)
from .numkit import RngStream, as_generator, log_sum_exp
from .smc import MutationConfig, SmcRunRecord, TemperSchedule, lt_smc_run

__all__ = [
    "TrainerConfig",
    "TrainResult",
    "PimhChainState",
    "UndefinedGradientError",
    "SurrogateResult",
    "smc_wake_train",
    "smc_pimh_wake_train",
    "wake_phase_train",
    "msc_train",
    "rws_wake_grad",
    "msc_step",
    "surrogate_objective",
]


class UndefinedGradientError(RuntimeError):
    """Every proposed particle had zero joint density; the SNIS gradient is
    undefined for this draw."""


@dataclass
class TrainerConfig:
    """Hyperparameters shared by the training loops.

    ``refresh_per_step`` datapoints get a fresh LT-SMC run each gradient step
    (round-robin with a random start); ``pre_runs`` runs per datapoint happen
    before the first step so no store is read empty. ``estimator`` picks the
    store regime: "a" (full records), "b" (single atom per run), "c" (latest
    window), or "naive" (uniform single record, evidence ignored).
    """

    method: str = "smc-wake-a"
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-3
    optimizer: str = "adam"
    particles: int = 100
    schedule: TemperSchedule = field(default_factory=TemperSchedule.adaptive)
    mutation: MutationConfig = field(default_factory=MutationConfig)
    ess_resample_frac: float = 0.5
    resample_scheme: str = "systematic"
    refresh_per_step: int = 1
    pre_runs: int = 1
    estimator: str = "a"
    m_star: int | None = 16
    window: int | None = None
    seed: int = 0
    metrics_interval: int = 100
    defensive: bool = False
    rws_retries: int = 10
    collapse_retries: int = 10
    msc_rao_blackwell: bool = False

    def store_mode(self) -> str:
        return {"a": "a", "b": "b", "c": "c", "naive": "a"}[self.estimator]

    def optimizer_state(self) -> AdamState:
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        return AdamState(lr=self.lr, sgd=self.optimizer == "sgd")


@dataclass
class TrainResult:
    encoder: object
    history: list
    stores: list | None = None
    chains: list | None = None
    skipped_updates: int = 0


@dataclass
class PimhChainState:
    """Current particle approximation and evidence estimate of one
    particle-independent MH chain."""

    record: SmcRunRecord
    proposals: int = 0
    accepts: int = 0

    @property
    def log_evidence(self) -> float:
        return self.record.log_evidence


def _run_smc(config: TrainerConfig, model, x, stream: RngStream) -> SmcRunRecord:
    """One sampler run; retries with a fresh sub-stream when every prior
    particle misses the likelihood support (possible for hard-support
    simulators), then re-raises with the datapoint still attached."""
    from .smc import ParticleCollapseError

    for attempt in range(max(1, config.collapse_retries)):
        try:
            return lt_smc_run(
                model, x, config.particles, config.schedule,
                mutation=config.mutation,
                ess_resample_min=config.ess_resample_frac * config.particles,
                resample_scheme=config.resample_scheme,
                rng=stream.child("attempt", attempt) if attempt else stream,
            )
        except ParticleCollapseError:
            if attempt == max(1, config.collapse_retries) - 1:
                raise
    raise AssertionError("unreachable")


def _estimate(config: TrainerConfig, store: SamplerStore, encoder, x,
              rng) -> GradientEstimate:
    if config.estimator == "a":
        return grad_estimate_a(store, encoder, x, m_star=config.m_star, rng=rng)
    if config.estimator == "b":
        return grad_estimate_b(store, encoder, x, rng=rng)
    if config.estimator == "c":
        return grad_estimate_c(store, encoder, x)
    if config.estimator == "naive":
        return grad_estimate_naive(store, encoder, x, rng=rng)
    raise ValueError(f"unknown estimator {config.estimator!r}")


def _emit(history, metrics_hook, step, encoder, extra):
    row = {"step": step, **extra}
    history.append(row)
    if metrics_hook is not None:
        metrics_hook(step, encoder, row)


def _minibatch(gen, n, batch_size):
    return gen.choice(n, size=min(batch_size, n), replace=False)


def smc_wake_train(config: TrainerConfig, model, dataset, encoder,
                   stores: list | None = None, metrics_hook=None,
                   run_log=None) -> TrainResult:
    """Fit the encoder by descending store-backed inclusive-KL gradients,
    interleaving LT-SMC refreshes with optimizer steps."""
    if config.pre_runs < 1:
        raise ValueError("every datapoint needs at least one sampler run before training")
    dataset = np.atleast_2d(np.asarray(dataset, dtype=float))
    n = dataset.shape[0]
    root = RngStream(config.seed)
    if stores is None:
        stores = [SamplerStore(j, mode=config.store_mode(), window=config.window)
                  for j in range(n)]
    last_ess = {}

    def refresh(j: int):
        m = stores[j].run_count
        record = _run_smc(config, model, dataset[j], root.child("smc", j, m))
        store_append(stores[j], record, rng=root.child("retain", j, m))
        last_ess[j] = record.final_ess
        if run_log is not None:
            run_log({"datapoint": j, "run": m,
                     "log_evidence": record.log_evidence,
                     "temperatures": record.temperatures.tolist(),
                     "ess_trace": record.ess_trace.tolist()})

    for j in range(n):
        for _ in range(config.pre_runs):
            refresh(j)

    order = root.child("order").generator().permutation(n)
    pointer = 0
    opt = config.optimizer_state()
    params = encoder.get_params()
    history: list = []

    def snapshot(step):
        mean_log_c = float(np.mean([s.log_evidence_mean for s in stores]))
        _emit(history, metrics_hook, step, encoder, {
            "mean_log_evidence": mean_log_c,
            "mean_final_ess": float(np.mean(list(last_ess.values()))),
        })

    snapshot(0)
    for step in range(1, config.steps + 1):
        for _ in range(config.refresh_per_step):
            refresh(int(order[pointer % n]))
            pointer += 1
        batch = _minibatch(root.child("batch", step).generator(), n, config.batch_size)
        grads = [
            _estimate(config, stores[j], encoder, dataset[j],
                      root.child("est", step, j)).vector
            for j in batch
        ]
        params, opt = adam_step(opt, params, np.mean(grads, axis=0))
        encoder.set_params(params)
        if step % config.metrics_interval == 0 or step == config.steps:
            snapshot(step)
    return TrainResult(encoder, history, stores=stores)


def smc_pimh_wake_train(config: TrainerConfig, model, dataset, encoder,
                        chains: list | None = None, metrics_hook=None,
                        run_log=None) -> TrainResult:
    """Particle-MCMC variant: each datapoint keeps one particle approximation,
    replaced by a fresh LT-SMC run with probability min(1, C_new / C_cur)."""
    dataset = np.atleast_2d(np.asarray(dataset, dtype=float))
    n = dataset.shape[0]
    root = RngStream(config.seed)
    counters = [0] * n

    def fresh(j: int) -> SmcRunRecord:
        record = _run_smc(config, model, dataset[j], root.child("smc", j, counters[j]))
        if run_log is not None:
            run_log({"datapoint": j, "run": counters[j],
                     "log_evidence": record.log_evidence,
                     "temperatures": record.temperatures.tolist(),
                     "ess_trace": record.ess_trace.tolist()})
        counters[j] += 1
        return record

    if chains is None:
        chains = [PimhChainState(fresh(j)) for j in range(n)]

    order = root.child("order").generator().permutation(n)
    pointer = 0
    opt = config.optimizer_state()
    params = encoder.get_params()
    history: list = []

    def snapshot(step):
        total_p = sum(c.proposals for c in chains)
        _emit(history, metrics_hook, step, encoder, {
            "mean_log_evidence": float(np.mean([c.log_evidence for c in chains])),
            "mean_final_ess": float(np.mean([c.record.final_ess for c in chains])),
            "acceptance_rate": (sum(c.accepts for c in chains) / total_p) if total_p else math.nan,
        })

    snapshot(0)
    for step in range(1, config.steps + 1):
        for _ in range(config.refresh_per_step):
            j = int(order[pointer % n])
            pointer += 1
            chain = chains[j]
            proposal = fresh(j)
            chain.proposals += 1
            log_alpha = min(0.0, proposal.log_evidence - chain.log_evidence)
            u = root.child("accept", j, chain.proposals).generator().random()
            if np.log(u) < log_alpha:
                chain.record = proposal
                chain.accepts += 1
        batch = _minibatch(root.child("batch", step).generator(), n, config.batch_size)
        grads = []
        for j in batch:
            rec = chains[j].record
            grads.append(encoder.score_grad(dataset[j], rec.atoms, -rec.weights))
        params, opt = adam_step(opt, params, np.mean(grads, axis=0))
        encoder.set_params(params)
        if step % config.metrics_interval == 0 or step == config.steps:
            snapshot(step)
    return TrainResult(encoder, history, chains=chains)


def rws_wake_grad(encoder, model, x, k: int, defensive: bool = False,
                  rng=0) -> GradientEstimate:
    """Self-normalized IS estimate of the inclusive-KL gradient with the
    encoder itself (or the half-prior defensive mixture) as proposal.

    Sampling and weights carry no gradients; raises UndefinedGradientError
    when every particle has zero joint density.
    """
    gen = as_generator(rng)
    x = np.asarray(x, dtype=float)
    if defensive:
        from_prior = gen.random(k) < 0.5
        z_prior = model.prior_sample(k, gen)
        z_enc = encoder.sample(x, k, gen)
        zs = np.where(from_prior[:, None], z_prior, z_enc)
        log_half = np.log(0.5)
        proposal_lp = np.logaddexp(
            log_half + np.asarray(model.prior_logpdf(zs)),
            log_half + np.asarray(encoder.log_prob(x, zs)),
        )
    else:
        zs = encoder.sample(x, k, gen)
        proposal_lp = np.asarray(encoder.log_prob(x, zs))
    log_joint = np.asarray(model.prior_logpdf(zs)) + np.asarray(model.log_lik(x, zs))
    log_w = log_joint - proposal_lp
    if not np.any(np.isfinite(log_w)):
        raise UndefinedGradientError("all particles have zero joint density")
    w = np.exp(log_w - log_sum_exp(log_w))
    w /= w.sum()
    vec = encoder.score_grad(x, zs, -w)
    label = "defensive-rws" if defensive else "rws"
    ent = float(-np.sum(w[w > 0] * np.log(w[w > 0])))
    return GradientEstimate(vec, label, 1, ent)


def wake_phase_train(config: TrainerConfig, model, dataset, encoder,
                     metrics_hook=None) -> TrainResult:
    """Wake-phase SNIS training (optionally defensive); undefined gradients
    are retried a bounded number of times, then that datapoint is skipped."""
    dataset = np.atleast_2d(np.asarray(dataset, dtype=float))
    n = dataset.shape[0]
    root = RngStream(config.seed)
    opt = config.optimizer_state()
    params = encoder.get_params()
    history: list = []
    skipped = 0

    _emit(history, metrics_hook, 0, encoder, {})
    for step in range(1, config.steps + 1):
        batch = _minibatch(root.child("batch", step).generator(), n, config.batch_size)
        grads = []
        for j in batch:
            for attempt in range(config.rws_retries):
                try:
                    grads.append(rws_wake_grad(
                        encoder, model, dataset[j], config.particles,
                        defensive=config.defensive,
                        rng=root.child("rws", step, j, attempt)).vector)
                    break
                except UndefinedGradientError:
                    continue
            else:
                skipped += 1
        if grads:
            params, opt = adam_step(opt, params, np.mean(grads, axis=0))
            encoder.set_params(params)
        if step % config.metrics_interval == 0 or step == config.steps:
            _emit(history, metrics_hook, step, encoder, {"skipped": skipped})
    return TrainResult(encoder, history, skipped_updates=skipped)


def msc_step(encoder, model, x, z_current, k: int, rng,
             rao_blackwell: bool = False):
    """One conditional-importance-sampling transition plus its score gradient.

    The current state is retained as particle one, k-1 particles come from
    the encoder, and the new state is drawn from the normalized weights.
    """
    gen = as_generator(rng)
    x = np.asarray(x, dtype=float)
    z_current = np.atleast_1d(np.asarray(z_current, dtype=float))
    if k < 1:
        raise ValueError("need at least one particle")
    if k > 1:
        zs = np.vstack([z_current[None, :], encoder.sample(x, k - 1, gen)])
    else:
        zs = z_current[None, :]
    log_joint = np.asarray(model.prior_logpdf(zs)) + np.asarray(model.log_lik(x, zs))
    log_q = np.asarray(encoder.log_prob(x, zs))
    log_w = log_joint - log_q
    if not np.any(np.isfinite(log_w)):
        raise UndefinedGradientError("all particles have zero joint density")
    w = np.exp(log_w - log_sum_exp(log_w))
    w /= w.sum()
    idx = int(gen.choice(k, p=w))
    z_new = zs[idx].copy()
    if rao_blackwell:
        vec = encoder.score_grad(x, zs, -w)
    else:
        vec = encoder.score_grad(x, z_new[None, :], np.array([-1.0]))
    ent = float(-np.sum(w[w > 0] * np.log(w[w > 0])))
    return z_new, GradientEstimate(vec, "msc", 1, ent)


def msc_train(config: TrainerConfig, model, dataset, encoder,
              chains: np.ndarray | None = None, metrics_hook=None) -> TrainResult:
    """Markovian score climbing: one CIS chain per datapoint, advanced exactly
    when its observation lands in a minibatch."""
    dataset = np.atleast_2d(np.asarray(dataset, dtype=float))
    n = dataset.shape[0]
    root = RngStream(config.seed)
    if chains is None:
        chains = np.vstack([model.prior_sample(1, root.child("chain-init", j))[0]
                            for j in range(n)])
    else:
        chains = np.array(chains, dtype=float, copy=True)
    opt = config.optimizer_state()
    params = encoder.get_params()
    history: list = []
    moves = 0
    steps_taken = 0

    _emit(history, metrics_hook, 0, encoder, {})
    for step in range(1, config.steps + 1):
        batch = _minibatch(root.child("batch", step).generator(), n, config.batch_size)
        grads = []
        for j in batch:
            z_new, est = msc_step(encoder, model, dataset[j], chains[j],
                                  config.particles, root.child("cis", step, j),
                                  rao_blackwell=config.msc_rao_blackwell)
            moves += int(not np.array_equal(z_new, chains[j]))
            steps_taken += 1
            chains[j] = z_new
            grads.append(est.vector)
        params, opt = adam_step(opt, params, np.mean(grads, axis=0))
        encoder.set_params(params)
        if step % config.metrics_interval == 0 or step == config.steps:
            _emit(history, metrics_hook, step, encoder,
                  {"move_rate": moves / max(steps_taken, 1)})
    return TrainResult(encoder, history, chains=chains)


@dataclass
class SurrogateResult:
    """Monte Carlo estimate of the stop-gradient SNIS surrogate objective."""

    mean: float
    standard_error: float
    dropped: int
    values: np.ndarray


def surrogate_objective(proposal, model, x, k: int, replicates: int,
                        rng=0) -> SurrogateResult:
    """Estimate E[-sum_i w_i log q(z_i|x)] with z drawn from the proposal and
    self-normalized weights against the model joint.

    Replicates whose particles all have zero joint density are dropped and
    redrawn; the dropped count is reported.
    """
    if replicates < 1:
        raise ValueError("need at least one replicate")
    gen = as_generator(rng)
    x = np.asarray(x, dtype=float)
    values = []
    dropped = 0
    attempts = 0
    while len(values) < replicates:
        attempts += 1
        if attempts > 50 * replicates:
            raise UndefinedGradientError(
                "proposal and model joint are disjoint: every replicate degenerate")
        zs = proposal.sample(k, gen)
        log_q = np.asarray(proposal.logpdf(zs))
        log_joint = np.asarray(model.prior_logpdf(zs)) + np.asarray(model.log_lik(x, zs))
        log_w = log_joint - log_q
        if not np.any(np.isfinite(log_w)):
            dropped += 1
            continue
        w = np.exp(log_w - log_sum_exp(log_w))
        w /= w.sum()
        values.append(float(-np.sum(w * log_q)))
    values = np.asarray(values)
    se = float(values.std(ddof=1) / np.sqrt(replicates)) if replicates > 1 else 0.0
    return SurrogateResult(float(values.mean()), se, dropped, values)
