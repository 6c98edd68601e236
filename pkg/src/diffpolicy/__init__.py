"""Masked discrete-diffusion policies over fixed-length action sequences.

A policy is a denoising model sampled by ancestral reverse masking; training
matches it to a closed-form mirror-descent target built from learned action
values.  Includes exact brute-force oracles for every identity the training
losses rely on, desk-scale environments, and a single-process trainer.
"""

from .diffusion import (
    ReverseTrajectory,
    SamplerConfig,
    elbo,
    exact_log_likelihood,
    onpolicy_pairs,
    remask_step,
    reverse_step,
    sample_action,
    top_p_filter,
)
from .envs import EnvSpec, StepResult, optimal_value, reset, step
from .errors import (
    ConfigError,
    DiffPolicyError,
    EmptyBufferError,
    GradientError,
    RefusedScaleError,
    SupportError,
    TrainAbort,
)
from .models import (
    DenoiserConfig,
    DenoiserOutput,
    QNetConfig,
    denoiser_forward,
    init_denoiser,
    init_qnet,
    mu_theta,
    qnet_forward,
)
from .optim import AdamState, adam_step
from .oracle import (
    TabularMDP,
    kl_exact,
    policy_distribution,
    run_identity_suite,
    tabular_pmd_iterate,
    value_iteration,
)
from .params import ParamStore, init_params, read_arrays, write_arrays
from .pmd import (
    ClipConfig,
    PMDBatch,
    TemperatureState,
    elbo_ratio,
    fkl_loss,
    fkl_weights,
    pmd_exact,
    rkl_loss_single_step,
    tune_lambda,
)
from .schedule import NoiseSchedule, Vocab, abar, forward_mask, linear_schedule
from .value import ReplayBuffer, Transition, advantages_for, polyak_update

__version__ = "0.1.0"
