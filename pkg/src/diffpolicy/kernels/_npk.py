"""NumPy fallback implementations of the hot kernels.

Semantics match ``_ck`` (the Cython extension) exactly up to floating-point
summation order; integer outputs are identical given identical inputs.
All functions are pure except ``adam_update`` which mutates in place.
"""

from __future__ import annotations

import numpy as np


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-d array (stable, max-subtracted)."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax of a 2-d array."""
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward_mask_tokens(
    tokens: np.ndarray, keep_prob: float, mask_id: int, u: np.ndarray
) -> np.ndarray:
    """Keep each token where ``u < keep_prob``, else replace with mask_id."""
    return np.where(u < keep_prob, tokens, mask_id).astype(np.int64)


def unmask_step(
    tokens: np.ndarray,
    sample_probs: np.ndarray,
    logp_probs: np.ndarray,
    unmask_prob: float,
    mask_id: int,
    u_gate: np.ndarray,
    u_tok: np.ndarray,
) -> tuple[np.ndarray, float]:
    """One reverse-transition draw for a single sequence.

    Each masked position independently unmasks with probability
    ``unmask_prob``; unmasking positions draw a token by inverse CDF over
    their ``sample_probs`` row using ``u_tok``.  The returned log-probability
    is taken under ``logp_probs`` (the unfiltered model), with stay-masked
    events contributing ``log(1 - unmask_prob)``.  Unmasked positions carry
    over and contribute zero.
    """
    k = tokens.shape[0]
    n_act = sample_probs.shape[1]
    masked = tokens == mask_id
    unmask = masked & (u_gate < unmask_prob)
    out = tokens.copy()
    logp = 0.0
    if unmask.any():
        rows = sample_probs[unmask]
        cs = np.cumsum(rows, axis=1)
        v = np.minimum((cs <= u_tok[unmask, None]).sum(axis=1), n_act - 1)
        # float round-off at u ~ 1 can land on a zero-probability token of a
        # filtered row; step back to the last positive entry.
        bad = rows[np.arange(rows.shape[0]), v] <= 0.0
        if bad.any():
            for i in np.nonzero(bad)[0]:
                j = int(v[i])
                while j > 0 and rows[i, j] <= 0.0:
                    j -= 1
                v[i] = j
        out[unmask] = v
        logp += float(
            np.log(unmask_prob * logp_probs[np.nonzero(unmask)[0], v]).sum()
        )
    n_stay = int(masked.sum() - unmask.sum())
    if n_stay:
        logp += n_stay * np.log1p(-unmask_prob)
    return out, logp


def adam_update(
    p: np.ndarray,
    g: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    t: int,
) -> None:
    """In-place Adam step on flat float64 arrays; ``t`` is one-based."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
