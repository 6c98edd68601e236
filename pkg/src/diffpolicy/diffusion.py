"""Reverse-process sampling and likelihood machinery for masked diffusion.

The generative chain starts from an all-mask sequence at step N and applies
N reverse transitions.  On step n each masked position independently
unmasks with probability ``abar(n)`` and, if it does, draws a clean token
from the denoiser's predictive row; unmasked positions are frozen.  The
evidence bound ``elbo`` is a nonpositive lower bound on the exact
log-likelihood (computed here by dynamic programming over mask subsets),
tight when N = 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .errors import RefusedScaleError
from .models import DenoiserConfig, denoiser_logits
from .params import ParamStore
from .schedule import NoiseSchedule, Vocab, abar, forward_mask_batch

__all__ = [
    "BatchTrajectory",
    "ReverseTrajectory",
    "SamplerConfig",
    "elbo",
    "elbo_terms",
    "exact_log_likelihood",
    "onpolicy_pairs",
    "remask_step",
    "reverse_step",
    "sample_action",
    "sample_actions_batch",
    "step_kl_rows",
    "top_p_filter",
    "top_p_filter_rows",
    "transition_log_prob_rows",
]

# enumeration guards for the exact routines
MAX_EXACT_POSITIONS = 4
MAX_EXACT_STEPS = 4
MC_DRAWS_PER_STEP = 256
MAX_MC_POSITIONS = 12
MAX_ENUM_ROWS = 500_000


@dataclass(frozen=True)
class SamplerConfig:
    """How reverse transitions draw tokens at inference time.

    ``ancestral`` samples the model rows as-is; ``top_p`` restricts each row
    to the smallest probability-descending prefix with cumulative mass >= p
    (renormalized); ``remask`` follows an ancestral draw with a re-masking
    phase at steps n > 1.  Recorded log-probabilities always refer to the
    unfiltered model.
    """

    mode: str = "ancestral"
    top_p: float = 0.98
    remask_eta: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in ("ancestral", "top_p", "remask"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if not 0.0 <= self.remask_eta <= 1.0:
            raise ValueError(f"remask_eta must be in [0, 1], got {self.remask_eta}")


@dataclass
class ReverseTrajectory:
    """One realized reverse chain, indexed by diffusion step.

    ``states[n]`` is the sequence after reverse steps N..n+1 have run, so
    ``states[n_steps]`` is all-mask and ``states[0]`` is clean.
    ``log_probs[n-1]`` is the log-probability of the transition
    a^n -> a^{n-1} under the parameters that generated it.
    """

    states: list[np.ndarray]
    log_probs: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1


@dataclass
class BatchTrajectory:
    """Column-stacked reverse chains: ``states[n]`` is (B, K), log_probs (B, N)."""

    states: list[np.ndarray]
    log_probs: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1

    def single(self, i: int) -> ReverseTrajectory:
        return ReverseTrajectory(
            states=[s[i] for s in self.states], log_probs=self.log_probs[i].copy()
        )


# -- model rows -------------------------------------------------------------


def _prob_rows(
    store: ParamStore,
    cfg: DenoiserConfig,
    tokens: np.ndarray,
    n,
    states: np.ndarray,
) -> np.ndarray:
    """Softmax rows of the denoiser for a (R, K) batch; no gradients."""
    logits = denoiser_logits(store.leaves(requires_grad=False), cfg, tokens, n, states)
    r, k, a = logits.data.shape
    flat = kernels.softmax_rows(np.ascontiguousarray(logits.data.reshape(r * k, a)))
    return flat.reshape(r, k, a)


# -- nucleus filtering -------------------------------------------------------


def top_p_filter(row: np.ndarray, p: float) -> np.ndarray:
    """Keep the minimal descending-probability prefix with mass >= p.

    Ties break toward the lower token id.  Returns a renormalized copy.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    row = np.asarray(row, dtype=np.float64)
    order = np.argsort(-row, kind="stable")
    cs = np.cumsum(row[order])
    cut = int(np.searchsorted(cs, p, side="left")) + 1
    kept = order[:cut]
    out = np.zeros_like(row)
    out[kept] = row[kept]
    return out / out.sum()


def top_p_filter_rows(rows: np.ndarray, p: float) -> np.ndarray:
    """Vectorized :func:`top_p_filter` over the rows of a 2-d array."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    order = np.argsort(-rows, axis=1, kind="stable")
    sorted_rows = np.take_along_axis(rows, order, axis=1)
    cs = np.cumsum(sorted_rows, axis=1)
    cut = (cs < p).sum(axis=1) + 1
    keep_sorted = np.arange(rows.shape[1]) < cut[:, None]
    out_sorted = np.where(keep_sorted, sorted_rows, 0.0)
    out = np.zeros_like(rows)
    np.put_along_axis(out, order, out_sorted, axis=1)
    return out / out.sum(axis=1, keepdims=True)


# -- single-sequence reverse transitions -------------------------------------


def _check_step_args(tokens: np.ndarray, n: int, schedule: NoiseSchedule) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise ValueError(f"expected 1-d tokens, got shape {tokens.shape}")
    if not 1 <= n <= schedule.n_steps:
        raise ValueError(f"step n={n} outside [1, {schedule.n_steps}]")
    return tokens


def reverse_step(
    store: ParamStore,
    cfg: DenoiserConfig,
    tokens: np.ndarray,
    n: int,
    state: np.ndarray,
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Draw a^{n-1} given a^n; returns (tokens, log-probability of the draw).

    A fully unmasked input is returned unchanged with log-probability 0.
    """
    tokens = _check_step_args(tokens, n, schedule)
    vocab = cfg.vocab
    if np.all(tokens != vocab.mask_id):
        return tokens.copy(), 0.0
    probs = _prob_rows(store, cfg, tokens[None, :], n, np.asarray(state)[None, :])[0]
    probs = np.ascontiguousarray(probs)
    if sampler.mode == "top_p":
        sample_probs = np.ascontiguousarray(top_p_filter_rows(probs, sampler.top_p))
    else:
        sample_probs = probs
    k = tokens.shape[0]
    u_gate = rng.random(k)
    u_tok = rng.random(k)
    return kernels.unmask_step(
        tokens, sample_probs, probs, abar(schedule, n), vocab.mask_id, u_gate, u_tok
    )


def remask_step(
    store: ParamStore,
    cfg: DenoiserConfig,
    tokens: np.ndarray,
    n: int,
    state: np.ndarray,
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Two-phase transition: an ancestral reverse step, then re-masking.

    For n > 1 every currently-unmasked position is re-masked independently
    with probability ``remask_eta * (1 - alpha[n-1])``; at n = 1 the second
    phase is skipped so sampling always terminates.  The returned
    log-probability is of the *composed* kernel (the intermediate phase
    marginalizes per position in closed form).
    """
    tokens = _check_step_args(tokens, n, schedule)
    vocab = cfg.vocab
    mask_id = vocab.mask_id
    masked_before = tokens == mask_id
    if masked_before.any():
        probs = _prob_rows(store, cfg, tokens[None, :], n, np.asarray(state)[None, :])[
            0
        ]
        probs = np.ascontiguousarray(probs)
        ab = abar(schedule, n)
        k = tokens.shape[0]
        mid, _ = kernels.unmask_step(
            tokens, probs, probs, ab, mask_id, rng.random(k), rng.random(k)
        )
    else:
        probs = None
        ab = abar(schedule, n)
        mid = tokens.copy()
    r = sampler.remask_eta * (1.0 - schedule.alpha[n - 1]) if n > 1 else 0.0
    out = mid.copy()
    if r > 0.0:
        unmasked_mid = mid != mask_id
        hit = unmasked_mid & (rng.random(mid.shape[0]) < r)
        out[hit] = mask_id
    # closed-form log-probability of tokens -> out under the composed kernel
    logp = 0.0
    for k_i in range(tokens.shape[0]):
        before, after = tokens[k_i], out[k_i]
        if before != mask_id:
            logp += np.log(r) if after == mask_id else np.log1p(-r)
        elif after == mask_id:
            logp += np.log((1.0 - ab) + ab * r)
        else:
            logp += np.log(ab * probs[k_i, after] * (1.0 - r))
    return out, float(logp)


def sample_action(
    store: ParamStore,
    cfg: DenoiserConfig,
    state: np.ndarray,
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, ReverseTrajectory]:
    """Run the full reverse chain from all-mask; returns (clean action, trajectory)."""
    n_steps = schedule.n_steps
    vocab = cfg.vocab
    tokens = np.full(cfg.seq_len, vocab.mask_id, dtype=np.int64)
    states: list[np.ndarray | None] = [None] * (n_steps + 1)
    states[n_steps] = tokens
    log_probs = np.zeros(n_steps)
    step_fn = remask_step if sampler.mode == "remask" else reverse_step
    for n in range(n_steps, 0, -1):
        tokens, lp = step_fn(store, cfg, tokens, n, state, schedule, sampler, rng)
        states[n - 1] = tokens
        log_probs[n - 1] = lp
    assert np.all(tokens != vocab.mask_id), "reverse chain left masks behind"
    return tokens, ReverseTrajectory(states=states, log_probs=log_probs)


# -- batched sampling (learner side) ------------------------------------------


def sample_actions_batch(
    store: ParamStore,
    cfg: DenoiserConfig,
    state_feats: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    record: bool = False,
) -> tuple[np.ndarray, BatchTrajectory | None]:
    """Ancestral reverse chains for a (B, state_dim) batch of states.

    Training-side sampling is always ancestral (the exact model chain);
    inference-time filtering modes live in :func:`sample_action`.
    """
    state_feats = np.asarray(state_feats, dtype=np.float64)
    b = state_feats.shape[0]
    n_steps = schedule.n_steps
    vocab = cfg.vocab
    mask_id = vocab.mask_id
    tokens = np.full((b, cfg.seq_len), mask_id, dtype=np.int64)
    states = [tokens.copy()] if record else []
    log_probs = np.zeros((b, n_steps)) if record else None
    for n in range(n_steps, 0, -1):
        ab = abar(schedule, n)
        u_gate = rng.random(tokens.shape)
        u_tok = rng.random(tokens.shape)
        masked = tokens == mask_id
        if masked.any():
            probs = _prob_rows(store, cfg, tokens, n, state_feats)
            unmask = masked & (u_gate < ab)
            if unmask.any():
                rows = probs[unmask]
                cs = np.cumsum(rows, axis=1)
                v = np.minimum(
                    (cs <= u_tok[unmask, None]).sum(axis=1), cfg.n_actions - 1
                )
                tokens = tokens.copy()
                tokens[unmask] = v
                if record:
                    chosen = rows[np.arange(rows.shape[0]), v]
                    lp = np.zeros(tokens.shape)
                    lp[unmask] = np.log(ab * chosen)
                    stay = masked & ~unmask
                    if ab < 1.0:
                        lp[stay] = np.log1p(-ab)
                    log_probs[:, n - 1] = lp.sum(axis=1)
            elif record and ab < 1.0:
                log_probs[:, n - 1] = masked.sum(axis=1) * np.log1p(-ab)
        if record:
            states.append(tokens.copy())
    if record:
        states.reverse()  # index by diffusion step: states[0] clean
        return tokens, BatchTrajectory(states=states, log_probs=log_probs)
    return tokens, None


# -- evidence lower bound -----------------------------------------------------


def _mask_patterns(k: int) -> np.ndarray:
    """All 2^k boolean mask patterns except the empty one, shape (2^k - 1, k)."""
    idx = np.arange(1, 2**k)
    return (idx[:, None] >> np.arange(k)) & 1 > 0


def _elbo_score_rows(
    leaves: dict[str, Tensor],
    cfg: DenoiserConfig,
    noisy: np.ndarray,
    n_row: np.ndarray,
    state_rows: np.ndarray,
    target_rows: np.ndarray,
    vocab: Vocab,
) -> Tensor:
    """Per-row sum over masked positions of log mu(target token), shape (R,)."""
    logits = denoiser_logits(leaves, cfg, noisy, n_row, state_rows)
    logp = ad.take_along_last(ad.log_softmax(logits), target_rows)
    ind = (noisy == vocab.mask_id).astype(np.float64)
    return ad.tensor_sum(ad.mul(logp, ind), axis=-1)


def elbo_terms(
    leaves: dict[str, Tensor],
    cfg: DenoiserConfig,
    actions: np.ndarray,
    state_feats: np.ndarray,
    schedule: NoiseSchedule,
    mode: str = "exact_n",
    rng: np.random.Generator | None = None,
    noisy_states: list[np.ndarray] | None = None,
) -> Tensor:
    """Evidence-bound estimates for a batch of (action, state) pairs, shape (B,).

    Modes:
      * ``exact_n`` — sums all N steps; the inner expectation over mask
        patterns is enumerated for K <= 4 and Monte-Carlo averaged (256
        draws per step) for K <= 12.
      * ``mc`` — single uniformly drawn step and single mask draw per
        sample, scaled by N; unbiased for the full bound.
      * ``pairs`` — uses caller-provided realized noisy sequences (one per
        step, from an on-policy reverse trajectory) instead of fresh
        forward-process draws, keeping the per-step weights.
    """
    actions = np.asarray(actions, dtype=np.int64)
    state_feats = np.asarray(state_feats, dtype=np.float64)
    b, k = actions.shape
    n_steps = schedule.n_steps
    vocab = cfg.vocab
    if actions.min() < 0 or actions.max() >= vocab.n_actions:
        raise ValueError("actions must be clean sequences")
    ab = np.array([abar(schedule, n) for n in range(1, n_steps + 1)])

    if mode == "mc":
        if rng is None:
            raise ValueError("mc mode needs an rng")
        n_row = rng.integers(1, n_steps + 1, size=b)
        noisy = forward_mask_batch(actions, n_row, schedule, vocab, rng)
        score = _elbo_score_rows(leaves, cfg, noisy, n_row, state_feats, actions, vocab)
        weight = n_steps * ab[n_row - 1]
        return ad.mul(score, weight)

    if mode == "pairs":
        if noisy_states is None:
            raise ValueError("pairs mode needs noisy_states")
        if len(noisy_states) != n_steps:
            raise ValueError(f"expected {n_steps} noisy levels, got {len(noisy_states)}")
        # rows sample-major: for each sample, its N noisy levels
        noisy = np.stack(noisy_states, axis=1).reshape(b * n_steps, k)
        n_row = np.tile(np.arange(1, n_steps + 1), b)
        st = np.repeat(state_feats, n_steps, axis=0)
        tg = np.repeat(actions, n_steps, axis=0)
        score = _elbo_score_rows(leaves, cfg, noisy, n_row, st, tg, vocab)
        weighted = ad.mul(score, ab[n_row - 1])
        return ad.tensor_sum(ad.reshape(weighted, (b, n_steps)), axis=1)

    if mode != "exact_n":
        raise ValueError(f"unknown elbo mode {mode!r}")

    if k <= MAX_EXACT_POSITIONS:
        patterns = _mask_patterns(k)  # (P, k) — empty pattern contributes 0
        p_count = patterns.shape[0]
        rows = b * n_steps * p_count
        if rows > MAX_ENUM_ROWS:
            raise RefusedScaleError(f"exact_n enumeration needs {rows} rows")
        # sample-major, then step, then pattern
        noisy = np.where(
            patterns[None, None, :, :], vocab.mask_id, actions[:, None, None, :]
        )
        noisy = np.broadcast_to(noisy, (b, n_steps, p_count, k)).reshape(rows, k)
        n_row = np.tile(np.repeat(np.arange(1, n_steps + 1), p_count), b)
        st = np.repeat(state_feats, n_steps * p_count, axis=0)
        tg = np.repeat(actions, n_steps * p_count, axis=0)
        keep = schedule.alpha[n_row]  # (rows,)
        m_count = patterns.sum(axis=1)
        m_row = np.tile(np.tile(m_count, n_steps), b)
        pattern_prob = (1.0 - keep) ** m_row * keep ** (k - m_row)
        weight = ab[n_row - 1] * pattern_prob
        score = _elbo_score_rows(leaves, cfg, noisy, n_row, st, tg, vocab)
        weighted = ad.mul(score, weight)
        return ad.tensor_sum(ad.reshape(weighted, (b, n_steps * p_count)), axis=1)

    if k <= MAX_MC_POSITIONS:
        if rng is None:
            raise ValueError("exact_n with K > 4 needs an rng for inner draws")
        draws = MC_DRAWS_PER_STEP
        rows = b * n_steps * draws
        if rows > MAX_ENUM_ROWS:
            raise RefusedScaleError(f"exact_n sampling needs {rows} rows")
        reps = np.repeat(actions, n_steps * draws, axis=0)
        n_row = np.tile(np.repeat(np.arange(1, n_steps + 1), draws), b)
        noisy = forward_mask_batch(reps, n_row, schedule, vocab, rng)
        st = np.repeat(state_feats, n_steps * draws, axis=0)
        score = _elbo_score_rows(leaves, cfg, noisy, n_row, st, reps, vocab)
        weighted = ad.mul(score, ab[n_row - 1] / draws)
        return ad.tensor_sum(ad.reshape(weighted, (b, n_steps * draws)), axis=1)

    raise RefusedScaleError(f"elbo exact_n supports K <= {MAX_MC_POSITIONS}, got {k}")


def elbo(
    store: ParamStore,
    cfg: DenoiserConfig,
    action: np.ndarray,
    state: np.ndarray,
    schedule: NoiseSchedule,
    mode: str = "exact_n",
    rng: np.random.Generator | None = None,
) -> float:
    """Single-pair evidence bound (nonpositive); see :func:`elbo_terms`."""
    t = elbo_terms(
        store.leaves(requires_grad=False),
        cfg,
        np.asarray(action)[None, :],
        np.asarray(state, dtype=np.float64)[None, :],
        schedule,
        mode=mode,
        rng=rng,
    )
    return float(t.data[0])


def onpolicy_pairs(
    traj: ReverseTrajectory,
) -> list[tuple[np.ndarray, int, np.ndarray]]:
    """(noisy sequence, step, clean sequence) triples from a realized chain."""
    return [(traj.states[n], n, traj.states[0]) for n in range(1, traj.n_steps + 1)]


# -- exact likelihood ---------------------------------------------------------


def _subsets(positions: tuple[int, ...]):
    m = len(positions)
    for bits in range(2**m):
        yield tuple(positions[i] for i in range(m) if bits >> i & 1)


def exact_log_likelihood(
    store: ParamStore,
    cfg: DenoiserConfig,
    action: np.ndarray,
    state: np.ndarray,
    schedule: NoiseSchedule,
) -> float:
    """log pi(action | state) by dynamic programming over mask subsets.

    Every reverse path that can produce ``action`` is characterized at each
    step by which positions are still masked (unmasked positions must already
    hold the target tokens).  Refuses K > 4 or N > 4.
    """
    action = np.asarray(action, dtype=np.int64)
    k = action.shape[0]
    n_steps = schedule.n_steps
    if k > MAX_EXACT_POSITIONS or n_steps > MAX_EXACT_STEPS:
        raise RefusedScaleError(
            f"exact likelihood limited to K <= {MAX_EXACT_POSITIONS}, "
            f"N <= {MAX_EXACT_STEPS}; got K={k}, N={n_steps}"
        )
    vocab = cfg.vocab
    if action.min() < 0 or action.max() >= vocab.n_actions:
        raise ValueError("action must be a clean sequence")
    state = np.asarray(state, dtype=np.float64)
    mask_id = vocab.mask_id

    dp: dict[tuple[int, ...], float] = {tuple(range(k)): 1.0}
    for n in range(n_steps, 0, -1):
        ab = abar(schedule, n)
        live = [s for s, p in dp.items() if p > 0.0]
        if not live:
            break
        batch = np.tile(action, (len(live), 1))
        for i, s in enumerate(live):
            batch[i, list(s)] = mask_id
        probs = _prob_rows(store, cfg, batch, n, np.tile(state, (len(live), 1)))
        new_dp: dict[tuple[int, ...], float] = {}
        for i, s in enumerate(live):
            p_here = dp[s]
            mu_target = probs[i, :, :][np.arange(k), action]
            for unmask in _subsets(s):
                stay = [pos for pos in s if pos not in unmask]
                factor = 1.0
                for pos in unmask:
                    factor *= ab * mu_target[pos]
                factor *= (1.0 - ab) ** len(stay)
                if factor > 0.0:
                    key = tuple(stay)
                    new_dp[key] = new_dp.get(key, 0.0) + p_here * factor
        dp = new_dp
    likelihood = dp.get((), 0.0)
    if likelihood <= 0.0:
        return -np.inf
    return float(np.log(likelihood))


# -- differentiable transition quantities (shared by the matching losses) -----


def transition_log_prob_rows(
    leaves: dict[str, Tensor],
    cfg: DenoiserConfig,
    prev_tokens: np.ndarray,
    next_tokens: np.ndarray,
    n_row: np.ndarray,
    state_rows: np.ndarray,
    schedule: NoiseSchedule,
) -> Tensor:
    """log p(a^{n-1} | a^n, s) for R realized transitions, shape (R,).

    Schedule-determined contributions (stay-masked mass and the unmask gate)
    are parameter-free constants folded into the result.
    """
    prev_tokens = np.asarray(prev_tokens, dtype=np.int64)
    next_tokens = np.asarray(next_tokens, dtype=np.int64)
    n_row = np.asarray(n_row)
    vocab = cfg.vocab
    mask_id = vocab.mask_id
    masked = prev_tokens == mask_id
    frozen_changed = ~masked & (prev_tokens != next_tokens)
    if frozen_changed.any():
        raise ValueError("transition edits an unmasked position")
    unmask = masked & (next_tokens != mask_id)
    stay = masked & (next_tokens == mask_id)
    ab_row = np.array([abar(schedule, int(n)) for n in n_row])
    if np.any(stay.any(axis=1) & (ab_row >= 1.0)):
        raise ValueError("stay-masked transition at a step with unmask rate 1")
    log_stay = np.zeros_like(ab_row)
    partial = ab_row < 1.0
    log_stay[partial] = np.log1p(-ab_row[partial])
    const = unmask.sum(axis=1) * np.log(ab_row) + stay.sum(axis=1) * log_stay
    logits = denoiser_logits(leaves, cfg, prev_tokens, n_row, state_rows)
    targets = np.where(unmask, next_tokens, 0)
    logp = ad.take_along_last(ad.log_softmax(logits), targets)
    model_part = ad.tensor_sum(ad.mul(logp, unmask.astype(np.float64)), axis=-1)
    return ad.add(model_part, const)


def step_kl_rows(
    leaves: dict[str, Tensor],
    cfg: DenoiserConfig,
    prev_tokens: np.ndarray,
    n_row: np.ndarray,
    state_rows: np.ndarray,
    schedule: NoiseSchedule,
    old_store: ParamStore,
) -> Tensor:
    """Per-transition KL(new || old) of the reverse kernels, shape (R,).

    Computed exactly per masked position: the unmask gate is
    schedule-determined and cancels, leaving ``abar(n)`` times the KL
    between the token rows.
    """
    prev_tokens = np.asarray(prev_tokens, dtype=np.int64)
    n_row = np.asarray(n_row)
    vocab = cfg.vocab
    masked = (prev_tokens == vocab.mask_id).astype(np.float64)
    ab_row = np.array([abar(schedule, int(n)) for n in n_row])
    logits_new = denoiser_logits(leaves, cfg, prev_tokens, n_row, state_rows)
    logits_old = denoiser_logits(
        old_store.leaves(requires_grad=False), cfg, prev_tokens, n_row, state_rows
    )
    log_new = ad.log_softmax(logits_new)
    p_new = ad.softmax(logits_new)
    log_old = ad.log_softmax(logits_old).data
    per_tok = ad.mul(p_new, ad.sub(log_new, log_old))
    per_pos = ad.tensor_sum(per_tok, axis=-1)
    per_row = ad.tensor_sum(ad.mul(per_pos, masked), axis=-1)
    return ad.mul(per_row, ab_row)
