"""Mirror-descent policy targets and the losses that match them.

One improvement step solves, per state,

    maximize_p  E_p[advantage] - lam * KL(p || pi_old)

whose closed form reweights the old policy by exponentiated advantages
(:func:`pmd_exact`).  Two matching routes train the diffusion policy toward
that target: a cross-entropy route that weights evidence-bound terms by
softmax(advantage / lam) over a sampled action set (:func:`fkl_loss`), and
clipped importance-ratio routes on reverse transitions
(:func:`rkl_loss_single_step`) or on whole actions via the evidence-bound
ratio estimator (:func:`rkl_loss_elbo_ratio`).  ``tune_lambda`` adapts the
temperature by descending a convex dual of the trust-region problem.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import (
    BatchTrajectory,
    ReverseTrajectory,
    elbo_terms,
    step_kl_rows,
    transition_log_prob_rows,
)
from .models import DenoiserConfig
from .params import ParamStore
from .schedule import NoiseSchedule

__all__ = [
    "ClipConfig",
    "PMDBatch",
    "TemperatureState",
    "elbo_ratio",
    "fkl_loss",
    "fkl_weights",
    "pmd_exact",
    "rkl_loss_batch",
    "rkl_loss_elbo_ratio",
    "rkl_loss_single_step",
    "tune_lambda",
]

LAMBDA_MIN = 1e-4
LAMBDA_MAX = 1e4


def pmd_exact(pi_old: np.ndarray, advantages: np.ndarray, lam: float) -> np.ndarray:
    """Closed-form mirror-descent update over an explicit distribution.

    Returns the normalization of ``pi_old * exp(advantages / lam)``; zero
    entries of ``pi_old`` stay zero.  Invariant to adding a constant to all
    advantages.
    """
    pi_old = np.asarray(pi_old, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    if pi_old.shape != advantages.shape:
        raise ValueError("pi_old and advantages must have the same shape")
    if lam <= 0.0:
        raise ValueError(f"lam must be positive, got {lam}")
    with np.errstate(divide="ignore"):
        logits = np.where(pi_old > 0.0, np.log(pi_old), -np.inf) + advantages / lam
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def fkl_weights(q_values: np.ndarray, lam: float) -> np.ndarray:
    """softmax(q / lam) over a sampled action set (sums to one).

    Subset self-normalization: the weights play the role of the target
    density ratio with the partition estimated on the same M samples.
    """
    q_values = np.asarray(q_values, dtype=np.float64)
    if lam <= 0.0:
        raise ValueError(f"lam must be positive, got {lam}")
    z = q_values / lam
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass(frozen=True)
class PMDBatch:
    """Per-state improvement batch: M sampled actions with their scores.

    ``advantages`` are q-values minus their mean over the set (sum to zero);
    ``weights`` are :func:`fkl_weights` of the q-values (sum to one).
    """

    state: np.ndarray
    actions: np.ndarray
    q_values: np.ndarray
    advantages: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        m = self.actions.shape[0]
        if m < 2:
            raise ValueError(f"need at least 2 sampled actions, got {m}")
        if self.q_values.shape != (m,) or self.advantages.shape != (m,):
            raise ValueError("q_values/advantages must be (M,)")
        if self.weights.shape != (m,):
            raise ValueError("weights must be (M,)")
        if abs(float(self.advantages.sum())) > 1e-8 * max(
            1.0, float(np.abs(self.q_values).max())
        ):
            raise ValueError("advantages must sum to zero over the sampled set")
        if abs(float(self.weights.sum()) - 1.0) > 1e-10:
            raise ValueError("weights must sum to one")


@dataclass(frozen=True)
class ClipConfig:
    """PPO-style ratio clip and optional explicit KL penalty weight."""

    ratio_clip: float = 0.2
    kl_coeff: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 < self.ratio_clip < 1.0:
            raise ValueError(f"ratio_clip must be in (0, 1), got {self.ratio_clip}")
        if self.kl_coeff < 0.0:
            raise ValueError("kl_coeff must be nonnegative")


# -- cross-entropy (weighted evidence-bound) route ----------------------------


def fkl_loss(
    store: ParamStore,
    cfg: DenoiserConfig,
    batches: list[PMDBatch],
    schedule: NoiseSchedule,
    elbo_mode: str = "mc",
    rng: np.random.Generator | None = None,
    noisy_states: list[list[np.ndarray]] | None = None,
) -> tuple[float, int]:
    """Weighted negative evidence bound, averaged over states.

    Accumulates gradients into ``store`` and returns (loss value, number of
    evidence-bound evaluations).  ``noisy_states`` optionally supplies
    realized reverse-chain sequences per batch (on-policy pairs mode).
    """
    leaves = store.leaves()
    total: Tensor | None = None
    n_terms = 0
    for i, b in enumerate(batches):
        m = b.actions.shape[0]
        states = np.tile(np.asarray(b.state, dtype=np.float64), (m, 1))
        ns = noisy_states[i] if noisy_states is not None else None
        terms = elbo_terms(
            leaves,
            cfg,
            b.actions,
            states,
            schedule,
            mode="pairs" if ns is not None else elbo_mode,
            rng=rng,
            noisy_states=ns,
        )
        contrib = ad.tensor_sum(ad.mul(terms, -b.weights))
        total = contrib if total is None else ad.add(total, contrib)
        n_terms += m
    if total is None:
        raise ValueError("fkl_loss needs at least one batch")
    loss = ad.mul(total, 1.0 / len(batches))
    ad.backward(loss)
    store.accumulate(leaves)
    return float(loss.data), n_terms


# -- importance-ratio routes ---------------------------------------------------


def elbo_ratio(
    store: ParamStore,
    old_store: ParamStore,
    cfg: DenoiserConfig,
    action: np.ndarray,
    state: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator | None = None,
) -> float:
    """exp(elbo_new - elbo_old): a biased likelihood-ratio estimator.

    Equals the true ratio times exp(old gap - new gap) where each gap is the
    (nonnegative) difference between log-likelihood and evidence bound; the
    correction is exactly 1 when N = 1.
    """
    from .diffusion import elbo

    new = elbo(store, cfg, action, state, schedule, mode="exact_n", rng=rng)
    old = elbo(old_store, cfg, action, state, schedule, mode="exact_n", rng=rng)
    return float(np.exp(new - old))


def _clipped_objective(ratio: Tensor, adv, clip: ClipConfig) -> Tensor:
    clipped = ad.clip(ratio, 1.0 - clip.ratio_clip, 1.0 + clip.ratio_clip)
    return ad.minimum(ad.mul(ratio, adv), ad.mul(clipped, adv))


def rkl_loss_single_step(
    store: ParamStore,
    old_store: ParamStore,
    cfg: DenoiserConfig,
    traj: ReverseTrajectory,
    advantage: float,
    state: np.ndarray,
    schedule: NoiseSchedule,
    clip: ClipConfig,
) -> float:
    """Clipped surrogate on the reverse transitions of one trajectory.

    Every denoising step inherits the clean action's advantage; the ratio
    for step n compares the new and generating log-probabilities of the
    realized transition, and the optional penalty term is the exact
    per-step KL of the reverse kernels.  The loss is the mean over the N
    steps (scale independent of N).  Gradients accumulate into ``store``.
    """
    n_steps = traj.n_steps
    prev = np.stack([traj.states[n] for n in range(1, n_steps + 1)])
    nxt = np.stack([traj.states[n - 1] for n in range(1, n_steps + 1)])
    n_row = np.arange(1, n_steps + 1)
    state_rows = np.tile(np.asarray(state, dtype=np.float64), (n_steps, 1))
    leaves = store.leaves()
    logp_new = transition_log_prob_rows(leaves, cfg, prev, nxt, n_row, state_rows, schedule)
    ratio = ad.exp(ad.sub(logp_new, traj.log_probs))
    obj = _clipped_objective(ratio, float(advantage), clip)
    loss = ad.mul(ad.mean(obj), -1.0)
    if clip.kl_coeff > 0.0:
        kls = step_kl_rows(leaves, cfg, prev, n_row, state_rows, schedule, old_store)
        loss = ad.add(loss, ad.mul(ad.mean(kls), clip.kl_coeff))
    ad.backward(loss)
    store.accumulate(leaves)
    return float(loss.data)


def rkl_loss_batch(
    store: ParamStore,
    old_store: ParamStore,
    cfg: DenoiserConfig,
    trajs: BatchTrajectory,
    advantages: np.ndarray,
    state_feats: np.ndarray,
    schedule: NoiseSchedule,
    clip: ClipConfig,
) -> float:
    """Batched :func:`rkl_loss_single_step`, mean over trajectories and steps."""
    b = advantages.shape[0]
    n_steps = trajs.n_steps
    # rows sample-major: trajectory i contributes its N transitions
    prev = np.stack(trajs.states[1:], axis=1).reshape(b * n_steps, -1)
    nxt = np.stack(trajs.states[:-1], axis=1).reshape(b * n_steps, -1)
    n_row = np.tile(np.arange(1, n_steps + 1), b)
    state_rows = np.repeat(np.asarray(state_feats, dtype=np.float64), n_steps, axis=0)
    adv_rows = np.repeat(np.asarray(advantages, dtype=np.float64), n_steps)
    old_logp = trajs.log_probs.reshape(b * n_steps)
    leaves = store.leaves()
    logp_new = transition_log_prob_rows(leaves, cfg, prev, nxt, n_row, state_rows, schedule)
    ratio = ad.exp(ad.sub(logp_new, old_logp))
    obj = _clipped_objective(ratio, adv_rows, clip)
    loss = ad.mul(ad.mean(obj), -1.0)
    if clip.kl_coeff > 0.0:
        kls = step_kl_rows(leaves, cfg, prev, n_row, state_rows, schedule, old_store)
        loss = ad.add(loss, ad.mul(ad.mean(kls), clip.kl_coeff))
    ad.backward(loss)
    store.accumulate(leaves)
    return float(loss.data)


def rkl_loss_elbo_ratio(
    store: ParamStore,
    old_store: ParamStore,
    cfg: DenoiserConfig,
    batch: PMDBatch,
    schedule: NoiseSchedule,
    clip: ClipConfig,
    rng: np.random.Generator | None = None,
) -> float:
    """Clipped surrogate with whole-action evidence-bound ratios.

    The ratio for each sampled action is exp(elbo_new - elbo_old) (exact_n
    estimates).  With ``kl_coeff > 0`` the penalty is mean(elbo_old -
    elbo_new), a nonnegative-in-expectation divergence proxy under old-policy
    samples.  Gradients accumulate into ``store``.
    """
    m = batch.actions.shape[0]
    states = np.tile(np.asarray(batch.state, dtype=np.float64), (m, 1))
    leaves = store.leaves()
    new_terms = elbo_terms(leaves, cfg, batch.actions, states, schedule, "exact_n", rng)
    old_terms = elbo_terms(
        old_store.leaves(requires_grad=False),
        cfg,
        batch.actions,
        states,
        schedule,
        "exact_n",
        rng,
    ).data
    ratio = ad.exp(ad.sub(new_terms, old_terms))
    obj = _clipped_objective(ratio, batch.advantages, clip)
    loss = ad.mul(ad.mean(obj), -1.0)
    if clip.kl_coeff > 0.0:
        loss = ad.add(loss, ad.mul(ad.mean(ad.sub(old_terms, new_terms)), clip.kl_coeff))
    ad.backward(loss)
    store.accumulate(leaves)
    return float(loss.data)


# -- temperature ---------------------------------------------------------------


@dataclass(frozen=True)
class TemperatureState:
    """Current temperature, trust-region radius, and dual step size."""

    lam: float = 1.0
    epsilon: float = 1.0
    lr: float = 1e-2

    def __post_init__(self) -> None:
        if not LAMBDA_MIN <= self.lam <= LAMBDA_MAX:
            raise ValueError(f"lam outside [{LAMBDA_MIN}, {LAMBDA_MAX}]")
        if self.epsilon <= 0.0 or self.lr <= 0.0:
            raise ValueError("epsilon and lr must be positive")


def temperature_dual(advantages: np.ndarray, lam: float, epsilon: float) -> float:
    """Dual value g(lam) = lam*eps + lam*logsumexp(A/lam) - lam*log M."""
    a = np.asarray(advantages, dtype=np.float64)
    z = a / lam
    zmax = z.max()
    lse = zmax + np.log(np.exp(z - zmax).sum())
    return float(lam * epsilon + lam * lse - lam * np.log(a.size))


def tune_lambda(advantages: np.ndarray, ts: TemperatureState) -> TemperatureState:
    """One dual descent step on the temperature, in log space.

    dg/dlam = eps + logsumexp(A/lam) - log M - sum(softmax(A/lam) * A)/lam;
    the update is lam <- exp(log lam - lr * dg/dlam * lam) (chain rule for
    the log parameterization), clamped to [1e-4, 1e4].
    """
    a = np.asarray(advantages, dtype=np.float64)
    if a.size < 2:
        raise ValueError("need at least 2 advantages to tune the temperature")
    lam = ts.lam
    z = a / lam
    zmax = z.max()
    e = np.exp(z - zmax)
    lse = zmax + np.log(e.sum())
    w = e / e.sum()
    dg_dlam = ts.epsilon + lse - np.log(a.size) - float(np.dot(w, a)) / lam
    # d g / d log(lam) = lam * dg/dlam
    new_log = np.log(lam) - ts.lr * lam * dg_dlam
    new_lam = float(np.clip(np.exp(new_log), LAMBDA_MIN, LAMBDA_MAX))
    return replace(ts, lam=new_lam)
