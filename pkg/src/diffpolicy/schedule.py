"""Masking noise schedules and the forward (corruption) process.

Sequences are plain int64 arrays of length K over the alphabet
``{0, ..., n_actions - 1}`` plus the reserved mask id ``n_actions``.
The forward process at step n keeps each position independently with
probability ``alpha[n]`` and masks it otherwise; ``alpha`` is the only
stored quantity (per-step conditional rates are never exposed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

__all__ = [
    "MASK_SENTINEL_OFFSET",
    "NoiseSchedule",
    "Vocab",
    "abar",
    "count_masked",
    "forward_mask",
    "forward_mask_batch",
    "is_fully_unmasked",
    "linear_schedule",
]

# mask id is always n_actions; kept as a named constant for readability
MASK_SENTINEL_OFFSET = 0


@dataclass(frozen=True)
class Vocab:
    """Token alphabet: actions ``0..n_actions-1`` plus one mask token."""

    n_actions: int

    def __post_init__(self) -> None:
        if self.n_actions < 2:
            raise ValueError(f"need at least 2 actions, got {self.n_actions}")

    @property
    def mask_id(self) -> int:
        return self.n_actions + MASK_SENTINEL_OFFSET

    @property
    def n_tokens(self) -> int:
        """Alphabet size including the mask token."""
        return self.n_actions + 1


@dataclass(frozen=True)
class NoiseSchedule:
    """Keep-probabilities ``alpha[0..N]`` with alpha[0] = 1 and alpha[N] = 0."""

    alpha: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.alpha, dtype=np.float64)
        object.__setattr__(self, "alpha", a)
        if a.ndim != 1 or a.shape[0] < 2:
            raise ValueError("alpha must be a 1-d array of at least 2 entries")
        if a[0] != 1.0:
            raise ValueError("alpha[0] must be exactly 1")
        if a[-1] != 0.0:
            raise ValueError("alpha[N] must be exactly 0")
        if not np.all(np.diff(a) < 0.0):
            raise ValueError("alpha must be strictly decreasing")

    @property
    def n_steps(self) -> int:
        return self.alpha.shape[0] - 1


def linear_schedule(n_steps: int) -> NoiseSchedule:
    """``alpha[n] = 1 - n/N``; the reverse unmask rate is then 1/n."""
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    return NoiseSchedule(alpha=1.0 - np.arange(n_steps + 1) / n_steps)


def abar(schedule: NoiseSchedule, n: int) -> float:
    """Probability that a masked position unmasks on reverse step n.

    Defined as ``(alpha[n-1] - alpha[n]) / (1 - alpha[n])`` for
    ``1 <= n <= N``; satisfies ``alpha[n-1] = alpha[n] + abar*(1 - alpha[n])``.
    """
    if not 1 <= n <= schedule.n_steps:
        raise ValueError(f"step n={n} outside [1, {schedule.n_steps}]")
    a = schedule.alpha
    return float((a[n - 1] - a[n]) / (1.0 - a[n]))


def is_fully_unmasked(tokens: np.ndarray, vocab: Vocab) -> bool:
    return bool(np.all(tokens != vocab.mask_id))


def count_masked(tokens: np.ndarray, vocab: Vocab) -> int:
    return int(np.sum(tokens == vocab.mask_id))


def _check_clean(tokens: np.ndarray, vocab: Vocab) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise ValueError(f"expected a 1-d token array, got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab.n_actions):
        raise ValueError("clean sequence contains out-of-alphabet or mask tokens")
    return tokens


def forward_mask(
    tokens: np.ndarray,
    n: int,
    schedule: NoiseSchedule,
    vocab: Vocab,
    rng: np.random.Generator,
) -> np.ndarray:
    """Corrupt a clean sequence to diffusion step n.

    Each position is kept independently with probability ``alpha[n]`` and
    replaced by the mask token otherwise.  n = 0 returns a copy; n = N
    masks everything.
    """
    tokens = _check_clean(tokens, vocab)
    if not 0 <= n <= schedule.n_steps:
        raise ValueError(f"step n={n} outside [0, {schedule.n_steps}]")
    keep = float(schedule.alpha[n])
    u = rng.random(tokens.shape[0])
    return kernels.forward_mask_tokens(tokens, keep, vocab.mask_id, u)


def forward_mask_batch(
    tokens: np.ndarray,
    n_per_row: np.ndarray,
    schedule: NoiseSchedule,
    vocab: Vocab,
    rng: np.random.Generator,
) -> np.ndarray:
    """Vectorized ``forward_mask`` over rows, one step index per row."""
    tokens = np.asarray(tokens, dtype=np.int64)
    n_per_row = np.asarray(n_per_row)
    keep = schedule.alpha[n_per_row][:, None]
    u = rng.random(tokens.shape)
    return np.where(u < keep, tokens, vocab.mask_id).astype(np.int64)
