"""Replay storage, value-network targets, and improvement batches.

Policy evaluation follows the one-step bootstrap: the target for (s, a, r,
s', done) is ``r`` when the episode ended and otherwise ``r + gamma *
mean_j Q_target(s', a'_j)`` with a small set of fresh policy samples a'_j.
Advantage sets for policy improvement are q-values of sampled actions
centered to zero mean over the set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .diffusion import BatchTrajectory, sample_actions_batch
from .errors import EmptyBufferError
from .models import DenoiserConfig, QNetConfig, qnet_value
from .params import ParamStore
from .pmd import PMDBatch, fkl_weights
from .schedule import NoiseSchedule

__all__ = [
    "ReplayBuffer",
    "Transition",
    "advantages_for",
    "improvement_batches",
    "polyak_update",
    "q_targets_batch",
    "td_loss",
]


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling (no prioritization)."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0
        self.total_inserted = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, tr: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(tr)
        else:
            self._items[self._next] = tr
        self._next = (self._next + 1) % self.capacity
        self.total_inserted += 1

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        """Uniform sample without replacement."""
        if not self._items:
            raise EmptyBufferError("sample() on an empty replay buffer")
        if n > len(self._items):
            raise ValueError(f"requested {n} items, buffer holds {len(self._items)}")
        idx = rng.choice(len(self._items), size=n, replace=False)
        return [self._items[i] for i in idx]


def polyak_update(target: ParamStore, online: ParamStore, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    for name in target.names():
        t = target.value(name)
        t *= 1.0 - tau
        t += tau * online.value(name)


def q_targets_batch(
    transitions: list[Transition],
    q_target_store: ParamStore,
    qcfg: QNetConfig,
    policy_store: ParamStore,
    pcfg: DenoiserConfig,
    schedule: NoiseSchedule,
    gamma: float,
    m_boot: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Bootstrapped regression targets for a transition batch, shape (B,)."""
    rewards = np.array([t.reward for t in transitions])
    done = np.array([t.done for t in transitions])
    targets = rewards.copy()
    live = np.nonzero(~done)[0]
    if live.size:
        next_states = np.stack([transitions[i].next_state for i in live])
        rep = np.repeat(next_states, m_boot, axis=0)
        acts, _ = sample_actions_batch(policy_store, pcfg, rep, schedule, rng)
        q_leaves = q_target_store.leaves(requires_grad=False)
        q = qnet_value(q_leaves, qcfg, rep, acts[:, : qcfg.seq_len]).data
        targets[live] += gamma * q.reshape(live.size, m_boot).mean(axis=1)
    return targets


def td_loss(
    q_store: ParamStore,
    qcfg: QNetConfig,
    states: np.ndarray,
    actions: np.ndarray,
    targets: np.ndarray,
) -> float:
    """Mean squared error to fixed targets; gradients accumulate in ``q_store``."""
    leaves = q_store.leaves()
    q = qnet_value(leaves, qcfg, states, actions)
    err = ad.sub(q, np.asarray(targets, dtype=np.float64))
    loss = ad.mean(ad.mul(err, err))
    ad.backward(loss)
    q_store.accumulate(leaves)
    return float(loss.data)


def improvement_batches(
    state_feats: np.ndarray,
    q_store: ParamStore,
    qcfg: QNetConfig,
    policy_store: ParamStore,
    pcfg: DenoiserConfig,
    schedule: NoiseSchedule,
    m: int,
    lam: float,
    rng: np.random.Generator,
    record: bool = False,
) -> tuple[list[PMDBatch], BatchTrajectory | None]:
    """Sample M actions per state from ``policy_store`` and score them.

    Returns one :class:`PMDBatch` per state; with ``record`` the stacked
    reverse trajectories (rows state-major, M per state) are returned too.
    Q-values are taken on the leading ``qcfg.seq_len`` tokens, which equals
    the full sequence except in planner setups.
    """
    state_feats = np.asarray(state_feats, dtype=np.float64)
    s_count = state_feats.shape[0]
    if m < 2:
        raise ValueError(f"need at least 2 samples per state, got {m}")
    rep = np.repeat(state_feats, m, axis=0)
    actions, trajs = sample_actions_batch(
        policy_store, pcfg, rep, schedule, rng, record=record
    )
    q_leaves = q_store.leaves(requires_grad=False)
    q = qnet_value(q_leaves, qcfg, rep, actions[:, : qcfg.seq_len]).data
    batches = []
    for i in range(s_count):
        qs = q[i * m : (i + 1) * m]
        batches.append(
            PMDBatch(
                state=state_feats[i],
                actions=actions[i * m : (i + 1) * m],
                q_values=qs,
                advantages=qs - qs.mean(),
                weights=fkl_weights(qs, lam),
            )
        )
    return batches, trajs


def advantages_for(
    state: np.ndarray,
    q_store: ParamStore,
    qcfg: QNetConfig,
    policy_store: ParamStore,
    pcfg: DenoiserConfig,
    schedule: NoiseSchedule,
    m: int,
    lam: float,
    rng: np.random.Generator,
) -> PMDBatch:
    """Single-state convenience wrapper around :func:`improvement_batches`."""
    batches, _ = improvement_batches(
        np.asarray(state, dtype=np.float64)[None, :],
        q_store,
        qcfg,
        policy_store,
        pcfg,
        schedule,
        m,
        lam,
        rng,
    )
    return batches[0]
