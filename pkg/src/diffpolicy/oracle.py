"""Brute-force references: tabular solvers and exact policy marginals.

Everything here is slow and exact, for verifying the learned machinery at
desk scale: tabular MDPs built by exhaustive simulation, value iteration,
exact linear-solve policy evaluation, the closed-form mirror-descent
iteration, and the policy's full action distribution via the exact
likelihood routine.  ``run_identity_suite`` bundles the cheap invariant
checks behind the ``oracle-check`` CLI verb.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import exact_log_likelihood
from .envs import EnvSpec, enumerate_sequences, grid_layout, reset, step
from .errors import RefusedScaleError, SupportError
from .models import DenoiserConfig
from .params import ParamStore
from .pmd import pmd_exact
from .schedule import NoiseSchedule

__all__ = [
    "CheckResult",
    "TabularMDP",
    "build_tabular_mdp",
    "chain_mdp",
    "greedy_rollout",
    "kl_exact",
    "policy_distribution",
    "policy_evaluation",
    "run_identity_suite",
    "tabular_pmd_iterate",
    "value_iteration",
]

MAX_POLICY_ENUM = 10_000


@dataclass(frozen=True)
class TabularMDP:
    """Dense finite MDP: P (S, A, S), R (S, A), discount, initial state."""

    P: np.ndarray
    R: np.ndarray
    gamma: float
    init_state: int

    def __post_init__(self) -> None:
        s, a, s2 = self.P.shape
        if s != s2 or self.R.shape != (s, a):
            raise ValueError("inconsistent P/R shapes")
        if not np.allclose(self.P.sum(axis=2), 1.0, atol=1e-12):
            raise ValueError("transition rows must sum to 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]


def value_iteration(
    mdp: TabularMDP, tol: float = 1e-12, max_iter: int = 200_000
) -> tuple[np.ndarray, np.ndarray]:
    """Optimal state values and action values, to sup-norm residual tol."""
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        q = mdp.R + mdp.gamma * mdp.P @ v
        v_new = q.max(axis=1)
        if np.abs(v_new - v).max() < tol:
            return v_new, mdp.R + mdp.gamma * mdp.P @ v_new
        v = v_new
    raise RuntimeError("value iteration did not converge")  # pragma: no cover


def policy_evaluation(
    mdp: TabularMDP, pi: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Exact (v, q) of a stochastic policy via a linear solve."""
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError("pi must be (S, A)")
    p_pi = np.einsum("sa,sat->st", pi, mdp.P)
    r_pi = (pi * mdp.R).sum(axis=1)
    v = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p_pi, r_pi)
    q = mdp.R + mdp.gamma * mdp.P @ v
    return v, q


def tabular_pmd_iterate(
    mdp: TabularMDP, pi0: np.ndarray, lam: float, n_iters: int
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Exact mirror-descent policy iteration.

    Each iterate evaluates the current policy exactly, forms advantages
    q - v, and applies the closed-form reweighting per state.  Returns the
    list of (policy, state values) pairs including the start point.
    """
    pi = pi0.copy()
    out = []
    for _ in range(n_iters + 1):
        v, q = policy_evaluation(mdp, pi)
        out.append((pi.copy(), v))
        adv = q - v[:, None]
        pi = np.stack(
            [pmd_exact(pi[s], adv[s], lam) for s in range(mdp.n_states)]
        )
    return out


def chain_mdp(n_states: int = 10, gamma: float = 0.95) -> TabularMDP:
    """Deterministic left/right chain; being in the last state pays 1."""
    n_a = 2
    P = np.zeros((n_states, n_a, n_states))
    R = np.zeros((n_states, n_a))
    for s in range(n_states):
        P[s, 0, max(s - 1, 0)] = 1.0
        P[s, 1, min(s + 1, n_states - 1)] = 1.0
        R[s, :] = 1.0 if s == n_states - 1 else 0.0
    return TabularMDP(P=P, R=R, gamma=gamma, init_state=0)


def build_tabular_mdp(spec: EnvSpec, gamma: float) -> TabularMDP:
    """Exhaustively simulate an env into a dense MDP over macro actions.

    One-shot kinds get a single live state plus an absorbing terminal; the
    grid enumerates every cell (walls stay unreachable) plus absorption at
    the goal.  Macro action index follows :func:`enumerate_sequences`.
    """
    seqs = enumerate_sequences(spec.n_primitive, spec.k)
    n_macro = seqs.shape[0]
    rng = np.random.default_rng(0)  # envs are deterministic; rng is interface-only
    if spec.kind in ("seq_bandit", "coop_game"):
        state = reset(spec, rng)
        P = np.zeros((2, n_macro, 2))
        R = np.zeros((2, n_macro))
        P[:, :, 1] = 1.0
        for i, seq in enumerate(seqs):
            R[0, i] = step(spec, state, seq, rng).reward
        return TabularMDP(P=P, R=R, gamma=gamma, init_state=0)

    w = spec.grid_size
    walls, start, goal = grid_layout(spec)
    n_cells = w * w
    # goal cell doubles as the absorbing terminal (episode ends there)
    P = np.zeros((n_cells, n_macro, n_cells))
    R = np.zeros((n_cells, n_macro))
    feats = np.eye(n_cells)
    for cell in range(n_cells):
        if cell in walls or cell == goal:
            P[cell, :, cell] = 1.0
            continue
        for i, seq in enumerate(seqs):
            res = step(spec, feats[cell], seq, rng)
            P[cell, i, int(np.argmax(res.next_state))] = 1.0
            R[cell, i] = res.reward
    return TabularMDP(P=P, R=R, gamma=gamma, init_state=start)


def greedy_rollout(spec: EnvSpec, episode_cap: int = 50) -> tuple[float, float]:
    """Roll the value-iteration-greedy macro policy once (deterministic).

    Returns (success, undiscounted return); defined for grid_macro.
    """
    mdp = build_tabular_mdp(spec, gamma=spec.gamma_env**spec.k)
    _, q = value_iteration(mdp)
    seqs = enumerate_sequences(spec.n_primitive, spec.k)
    rng = np.random.default_rng(0)
    state = reset(spec, rng)
    total = 0.0
    for _ in range(episode_cap):
        cell = int(np.argmax(state))
        res = step(spec, state, seqs[int(np.argmax(q[cell]))], rng)
        total += res.reward
        state = res.next_state
        if res.done:
            return 1.0, total
    return 0.0, total


def policy_distribution(
    store: ParamStore,
    cfg: DenoiserConfig,
    state: np.ndarray,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Exact action distribution of the diffusion policy at one state.

    Enumerates every clean sequence (refused above 10^4) and evaluates the
    exact likelihood of each; the result sums to 1 up to the dynamic
    program's round-off.
    """
    count = cfg.n_actions**cfg.seq_len
    if count > MAX_POLICY_ENUM:
        raise RefusedScaleError(
            f"policy enumeration of {count} sequences exceeds {MAX_POLICY_ENUM}"
        )
    seqs = enumerate_sequences(cfg.n_actions, cfg.seq_len)
    out = np.empty(count)
    for i, seq in enumerate(seqs):
        out[i] = np.exp(exact_log_likelihood(store, cfg, seq, state, schedule))
    return out


def kl_exact(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) over a shared finite support; 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("p and q must have the same shape")
    live = p > 0.0
    if np.any(live & (q <= 0.0)):
        raise SupportError("p places mass where q has none")
    return float(np.sum(p[live] * np.log(p[live] / q[live])))


# -- the oracle-check battery ---------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _simplex_hillclimb(
    pi_old: np.ndarray, adv: np.ndarray, lam: float, resolution: float = 1e-3
) -> np.ndarray:
    """Derivative-free maximizer of E_p[adv] - lam*KL(p||pi_old) on a lattice.

    The objective is strictly concave, so coordinate-pair moves at a
    shrinking step reach the grid optimum.  Used as an independent check of
    the closed form.
    """

    def objective(p: np.ndarray) -> float:
        live = p > 0.0
        if np.any(live & (pi_old <= 0.0)):
            return -np.inf
        kl = float(np.sum(p[live] * np.log(p[live] / pi_old[live])))
        return float(np.dot(p, adv)) - lam * kl

    n = pi_old.size
    p = pi_old.copy()
    scale = 0.128
    while scale >= resolution / 2:
        improved = True
        while improved:
            improved = False
            best_gain, best_move = 0.0, None
            base = objective(p)
            for i in range(n):
                for j in range(n):
                    if i == j or p[j] < scale - 1e-15:
                        continue
                    cand = p.copy()
                    cand[i] += scale
                    cand[j] -= scale
                    gain = objective(cand) - base
                    if gain > best_gain + 1e-15:
                        best_gain, best_move = gain, cand
            if best_move is not None:
                p = best_move
                improved = True
        scale /= 2.0
    return p


def run_identity_suite(quick: bool = False, seed: int = 0) -> list[CheckResult]:
    """Cheap end-to-end verification of the closed-form identities.

    Returns one result per identity; all must pass for a healthy build.
    """
    from . import diffusion as df
    from .models import init_denoiser
    from .schedule import Vocab, abar, linear_schedule

    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    def check(name: str, passed: bool, detail: str) -> None:
        results.append(CheckResult(name, bool(passed), detail))

    # schedule telescoping: alpha[n-1] = alpha[n] + abar(n) * (1 - alpha[n])
    worst = 0.0
    for n_steps in range(1, 9):
        sch = linear_schedule(n_steps)
        for n in range(1, n_steps + 1):
            lhs = sch.alpha[n - 1]
            rhs = sch.alpha[n] + abar(sch, n) * (1.0 - sch.alpha[n])
            worst = max(worst, abs(lhs - rhs))
    check("schedule_telescoping", worst < 1e-12, f"max err {worst:.2e}")

    # forward corruption keep-rate
    sch = linear_schedule(4)
    vocab = Vocab(3)
    trials = 20_000 if quick else 100_000
    tol = 0.02 if quick else 0.01
    a0 = np.tile(rng.integers(0, 3, size=6), (trials, 1))
    worst = 0.0
    from .schedule import forward_mask_batch

    for n in range(1, 4):
        noisy = forward_mask_batch(
            a0, np.full(trials, n), sch, vocab, np.random.default_rng(seed + n)
        )
        keep_rate = float((noisy != vocab.mask_id).mean())
        worst = max(worst, abs(keep_rate - sch.alpha[n]))
    check("forward_keep_rate", worst < tol, f"max dev {worst:.4f} (tol {tol})")

    # evidence bound vs exact likelihood
    cfg = DenoiserConfig(seq_len=2, n_actions=3, state_dim=2, arch="mlp", d_model=16)
    sch2 = linear_schedule(2)
    sch1 = linear_schedule(1)
    n_inst = 3 if quick else 10
    worst_gap, worst_eq = 0.0, 0.0
    for i in range(n_inst):
        store = init_denoiser(cfg, np.random.default_rng(seed + 10 + i))
        for name in store.names():  # break the at-init cond-independence
            store.value(name)[...] += 0.3 * np.random.default_rng(
                seed + 20 + i
            ).normal(size=store.value(name).shape)
        s = rng.normal(size=2)
        a = rng.integers(0, 3, size=2)
        bound = df.elbo(store, cfg, a, s, sch2, mode="exact_n")
        ll = df.exact_log_likelihood(store, cfg, a, s, sch2)
        worst_gap = max(worst_gap, bound - ll)
        b1 = df.elbo(store, cfg, a, s, sch1, mode="exact_n")
        l1 = df.exact_log_likelihood(store, cfg, a, s, sch1)
        worst_eq = max(worst_eq, abs(b1 - l1))
    check("elbo_lower_bound", worst_gap < 1e-12, f"max bound-ll {worst_gap:.2e}")
    check("elbo_tight_single_step", worst_eq < 1e-12, f"max |diff| {worst_eq:.2e}")

    # closed-form mirror-descent step vs lattice hill-climb
    n_inst = 2 if quick else 5
    worst = 0.0
    for i in range(n_inst):
        r = np.random.default_rng(seed + 30 + i)
        pi_old = r.dirichlet(np.ones(4))
        adv = r.normal(size=4)
        adv -= adv @ pi_old
        lam = float(r.uniform(0.2, 2.0))
        target = pmd_exact(pi_old, adv, lam)
        found = _simplex_hillclimb(pi_old, adv, lam)
        worst = max(worst, 0.5 * np.abs(target - found).sum())
    check("pmd_closed_form", worst < 2e-3, f"max TV {worst:.2e}")

    # ratio decomposition and its single-step degeneracy
    store_a = init_denoiser(cfg, np.random.default_rng(seed + 40))
    store_b = init_denoiser(cfg, np.random.default_rng(seed + 41))
    for st, off in ((store_a, 50), (store_b, 60)):
        for name in st.names():
            st.value(name)[...] += 0.2 * np.random.default_rng(
                seed + off
            ).normal(size=st.value(name).shape)
    s = rng.normal(size=2)
    a = rng.integers(0, 3, size=2)
    est = df.elbo(store_a, cfg, a, s, sch2) - df.elbo(store_b, cfg, a, s, sch2)
    true = exact_log_likelihood(store_a, cfg, a, s, sch2) - exact_log_likelihood(
        store_b, cfg, a, s, sch2
    )
    gap_new = exact_log_likelihood(store_a, cfg, a, s, sch2) - df.elbo(
        store_a, cfg, a, s, sch2
    )
    gap_old = exact_log_likelihood(store_b, cfg, a, s, sch2) - df.elbo(
        store_b, cfg, a, s, sch2
    )
    err = abs(np.exp(est) - np.exp(true) * np.exp(gap_old - gap_new))
    check("ratio_decomposition", err < 1e-10, f"err {err:.2e}")
    e1 = df.elbo(store_a, cfg, a, s, sch1) - df.elbo(store_b, cfg, a, s, sch1)
    t1 = exact_log_likelihood(store_a, cfg, a, s, sch1) - exact_log_likelihood(
        store_b, cfg, a, s, sch1
    )
    check("ratio_exact_single_step", abs(e1 - t1) < 1e-10, f"err {abs(e1 - t1):.2e}")

    # tabular mirror-descent monotonicity on the chain
    mdp = chain_mdp()
    pi0 = np.full((mdp.n_states, 2), 0.5)
    iters = 10 if quick else 50
    path = tabular_pmd_iterate(mdp, pi0, lam=0.1, n_iters=iters)
    vals = [v[mdp.init_state] for _, v in path]
    drops = min(np.diff(vals)) if len(vals) > 1 else 0.0
    check("pmd_monotone_chain", drops >= -1e-10, f"min improvement {drops:.2e}")

    # policy marginals sum to one
    probs = policy_distribution(store_a, cfg, s, sch2)
    err = abs(probs.sum() - 1.0)
    check("policy_distribution_normalized", err < 1e-8, f"|sum-1| {err:.2e}")

    # samplers terminate and match the exact distribution
    sampler = df.SamplerConfig(mode="top_p", top_p=0.9)
    draws = 200 if quick else 2000
    ok = True
    r = np.random.default_rng(seed + 70)
    for _ in range(draws // 10):
        act, _ = df.sample_action(store_a, cfg, s, sch2, sampler, r)
        ok &= bool(np.all(act < cfg.n_actions))
    check("sampler_terminates", ok, "all chains fully unmasked")

    return results
