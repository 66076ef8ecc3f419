"""Amortized inclusive-KL variational inference with likelihood-tempered
sequential Monte Carlo gradient estimators, plus the SNIS/MCMC baselines and
analytic-posterior benchmark models used to verify them."""

from .encoder import (
    AdamState,
    FullCovGaussianEncoder,
    MixtureDiagGaussianEncoder,
    MlpParams,
    NonFiniteGradientError,
    adam_step,
    load_encoder,
)
from .estimators import (
    EmptyStoreError,
    GradientEstimate,
    SamplerStore,
    grad_estimate_a,
    grad_estimate_b,
    grad_estimate_c,
    grad_estimate_naive,
    store_append,
    subsample_records,
)
from .metrics import (
    KlReport,
    UnsupportedAnalyticMetric,
    amortized_kl_report,
    forward_kl_grad_exact,
    gaussian_kl,
    mc_forward_kl_report,
)
from .models import (
    BoxUniform,
    ConjugateGaussian1D,
    GaussianLinearModel,
    NoAnalyticEvidenceError,
    TwoMoonsModel,
    linear_posterior_params,
    make_dataset,
    two_moons_observation,
)
from .numkit import (
    EmptyMassError,
    GaussianDist,
    RngStream,
    ess,
    log_sum_exp,
    mvn_logpdf,
    mvn_sample,
    normalize,
    resample,
)
from .smc import (
    MUTATION_PRESETS,
    MutationConfig,
    ParticleCollapseError,
    ParticleSystem,
    SmcRunRecord,
    TemperSchedule,
    lt_smc_run,
    mh_mutation_sweep,
    solve_next_temperature,
    tempered_log_target,
)
from .trainers import (
    PimhChainState,
    SurrogateResult,
    TrainerConfig,
    TrainResult,
    UndefinedGradientError,
    msc_step,
    msc_train,
    rws_wake_grad,
    smc_pimh_wake_train,
    smc_wake_train,
    surrogate_objective,
    wake_phase_train,
)

__version__ = "0.1.0"
