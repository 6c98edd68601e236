"""Desk-scale environments with combinatorial (sequence-valued) actions.

Three kinds, all exactly enumerable at test sizes:

* ``seq_bandit`` — one-shot: reward is the fraction of positions matching a
  hidden target sequence, optionally plus 0.1 x a frozen random scoring
  network of the whole sequence (coupling positions).
* ``grid_macro`` — a walled gridworld where one env step executes the K
  primitive moves of the action sequence, accumulating internally
  discounted primitive rewards (-0.01 per move, +1.0 on reaching the goal,
  which ends the episode); a primitive-step variant backs planner mode.
* ``coop_game`` — one-shot coordination: two designated joint patterns pay
  1.0, any other all-equal pattern pays 0.2, everything else 0.

States are feature vectors: a constant 1.0 for the one-shot kinds, a
one-hot cell encoding for the grid.  All structure (targets, walls,
patterns, scoring net) derives deterministically from ``EnvSpec.seed``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "EnvSpec",
    "StepResult",
    "enumerate_sequences",
    "grid_layout",
    "optimal_value",
    "reset",
    "state_dim",
    "step",
    "step_primitive",
]

KINDS = ("seq_bandit", "grid_macro", "coop_game")

# grid primitive moves: up, right, down, left
MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))
STEP_PENALTY = -0.01
GOAL_REWARD = 1.0
WALL_DENSITY = 0.25
ALLEQ_REWARD = 0.2
BONUS_SCALE = 0.1
ENUM_LIMIT = 1_000_000


@dataclass(frozen=True)
class EnvSpec:
    """Immutable description of an environment instance."""

    kind: str
    k: int
    n_primitive: int
    seed: int = 0
    grid_size: int = 7
    bandit_bonus: bool = False
    gamma_env: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown env kind {self.kind!r}")
        if self.k < 1 or self.n_primitive < 2:
            raise ValueError("need k >= 1 and n_primitive >= 2")
        if self.kind == "grid_macro":
            if self.n_primitive != 4:
                raise ValueError("grid_macro has exactly 4 primitive moves")
            if self.grid_size < 3:
                raise ValueError("grid_size must be >= 3")
            if not 0.0 < self.gamma_env <= 1.0:
                raise ValueError("gamma_env must be in (0, 1]")


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    reward: float
    done: bool
    info: dict


def state_dim(spec: EnvSpec) -> int:
    if spec.kind == "grid_macro":
        return spec.grid_size * spec.grid_size
    return 1


def enumerate_sequences(n_actions: int, k: int) -> np.ndarray:
    """All n_actions^k sequences, shape (n_actions^k, k), first position
    most significant in the row index."""
    count = n_actions**k
    if count > ENUM_LIMIT:
        raise ValueError(f"enumeration of {count} sequences refused")
    idx = np.arange(count)
    out = np.empty((count, k), dtype=np.int64)
    for j in range(k - 1, -1, -1):
        out[:, j] = idx % n_actions
        idx //= n_actions
    return out


# -- seeded structure ---------------------------------------------------------


@lru_cache(maxsize=None)
def _bandit_target(spec: EnvSpec) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 101]))
    return rng.integers(0, spec.n_primitive, size=spec.k)


@lru_cache(maxsize=None)
def _bandit_bonus_weights(spec: EnvSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 202]))
    d_in = spec.k * spec.n_primitive
    h = 16
    w1 = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, h))
    b1 = rng.normal(0.0, 0.3, size=h)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(h), size=h)
    return w1, b1, w2


def _bandit_bonus(spec: EnvSpec, actions: np.ndarray) -> np.ndarray:
    """Frozen random scorer squashed to [0, 1]; actions (R, K) -> (R,)."""
    w1, b1, w2 = _bandit_bonus_weights(spec)
    x = np.eye(spec.n_primitive)[actions].reshape(actions.shape[0], -1)
    z = np.tanh(x @ w1 + b1) @ w2
    return 0.5 * (1.0 + np.tanh(z))


@lru_cache(maxsize=None)
def _coop_patterns(spec: EnvSpec) -> tuple[tuple[int, ...], tuple[int, ...]]:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 303]))
    pats: list[tuple[int, ...]] = []
    while len(pats) < 2:
        cand = tuple(int(x) for x in rng.integers(0, spec.n_primitive, size=spec.k))
        if len(set(cand)) == 1 or cand in pats:
            continue
        pats.append(cand)
    return pats[0], pats[1]


@lru_cache(maxsize=None)
def grid_layout(spec: EnvSpec) -> tuple[frozenset, int, int]:
    """(walls, start_cell, goal_cell); resamples until the goal is reachable."""
    w = spec.grid_size
    start = 0
    goal = w * w - 1
    for salt in range(1000):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 404, salt]))
        walls = {
            c
            for c in range(w * w)
            if c not in (start, goal) and rng.random() < WALL_DENSITY
        }
        if _bfs_reachable(w, walls, start, goal):
            return frozenset(walls), start, goal
    raise RuntimeError("could not draw a solvable layout")  # pragma: no cover


def _bfs_distance(w: int, walls: frozenset | set, start: int, goal: int) -> int:
    """Primitive moves from start to goal, or -1 if unreachable."""
    frontier = [start]
    seen = {start}
    depth = 0
    while frontier:
        nxt = []
        for c in frontier:
            if c == goal:
                return depth
            r, col = divmod(c, w)
            for dr, dc in MOVES:
                r2, c2 = r + dr, col + dc
                if 0 <= r2 < w and 0 <= c2 < w:
                    c3 = r2 * w + c2
                    if c3 not in walls and c3 not in seen:
                        seen.add(c3)
                        nxt.append(c3)
        frontier = nxt
        depth += 1
    return -1


def _bfs_reachable(w: int, walls: set, start: int, goal: int) -> bool:
    return _bfs_distance(w, walls, start, goal) >= 0


def _cell_features(spec: EnvSpec, cell: int) -> np.ndarray:
    f = np.zeros(spec.grid_size * spec.grid_size)
    f[cell] = 1.0
    return f


def _move(spec: EnvSpec, cell: int, a: int) -> int:
    """One primitive move with bump-into-wall/edge = stay."""
    w = spec.grid_size
    walls, _, _ = grid_layout(spec)
    r, c = divmod(cell, w)
    dr, dc = MOVES[a]
    r2, c2 = r + dr, c + dc
    if not (0 <= r2 < w and 0 <= c2 < w):
        return cell
    nxt = r2 * w + c2
    return cell if nxt in walls else nxt


# -- public api ----------------------------------------------------------------


def reset(spec: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    """Initial state features (rng accepted for interface uniformity)."""
    if spec.kind == "grid_macro":
        _, start, _ = grid_layout(spec)
        return _cell_features(spec, start)
    return np.ones(1)


def _check_action(spec: EnvSpec, action: np.ndarray, length: int) -> np.ndarray:
    action = np.asarray(action, dtype=np.int64)
    if action.shape != (length,):
        raise ValueError(f"action must have shape ({length},), got {action.shape}")
    if action.min() < 0 or action.max() >= spec.n_primitive:
        raise ValueError("action contains out-of-range primitives")
    return action


def step_primitive(
    spec: EnvSpec, state: np.ndarray, a: int, rng: np.random.Generator
) -> StepResult:
    """Single primitive move on the grid (used by planner mode)."""
    if spec.kind != "grid_macro":
        raise ValueError("step_primitive only applies to grid_macro")
    (a,) = _check_action(spec, np.array([a]), 1)
    _, _, goal = grid_layout(spec)
    cell = int(np.argmax(state))
    nxt = _move(spec, cell, int(a))
    done = nxt == goal
    reward = GOAL_REWARD if done else STEP_PENALTY
    return StepResult(
        next_state=_cell_features(spec, nxt),
        reward=reward,
        done=done,
        info={"cell": nxt, "success": done},
    )


def step(
    spec: EnvSpec, state: np.ndarray, action: np.ndarray, rng: np.random.Generator
) -> StepResult:
    """Execute one macro action; one-shot kinds terminate immediately."""
    if spec.kind == "seq_bandit":
        action = _check_action(spec, action, spec.k)
        target = _bandit_target(spec)
        reward = float(np.mean(action == target))
        info = {"match_fraction": reward}
        if spec.bandit_bonus:
            bonus = float(_bandit_bonus(spec, action[None, :])[0])
            reward += BONUS_SCALE * bonus
            info["bonus"] = bonus
        return StepResult(np.ones(1), reward, True, info)

    if spec.kind == "coop_game":
        action = _check_action(spec, action, spec.k)
        p1, p2 = _coop_patterns(spec)
        t = tuple(int(x) for x in action)
        if t in (p1, p2):
            reward = 1.0
        elif len(set(t)) == 1:
            reward = ALLEQ_REWARD
        else:
            reward = 0.0
        return StepResult(np.ones(1), reward, True, info={"pattern": t})

    # grid_macro: run the K primitives with internal discounting
    action = _check_action(spec, action, spec.k)
    cell = int(np.argmax(state))
    _, _, goal = grid_layout(spec)
    total = 0.0
    done = False
    for j, a in enumerate(action):
        nxt = _move(spec, cell, int(a))
        done = nxt == goal
        r_j = GOAL_REWARD if done else STEP_PENALTY
        total += (spec.gamma_env**j) * r_j
        cell = nxt
        if done:
            break
    return StepResult(
        next_state=_cell_features(spec, cell),
        reward=total,
        done=done,
        info={"cell": cell, "success": done},
    )


def optimal_value(spec: EnvSpec) -> float:
    """Best achievable single-step reward (one-shot kinds) or the
    discounted optimal start-state value (grid, via value iteration)."""
    if spec.kind == "seq_bandit":
        if not spec.bandit_bonus:
            return 1.0
        seqs = enumerate_sequences(spec.n_primitive, spec.k)
        target = _bandit_target(spec)
        match = (seqs == target).mean(axis=1)
        return float((match + BONUS_SCALE * _bandit_bonus(spec, seqs)).max())
    if spec.kind == "coop_game":
        return 1.0
    if spec.gamma_env == 1.0:
        # undiscounted shortest path: penalties on all moves but the last
        walls, start, goal = grid_layout(spec)
        d = _bfs_distance(spec.grid_size, walls, start, goal)
        return GOAL_REWARD + STEP_PENALTY * (d - 1)
    from .oracle import build_tabular_mdp, value_iteration

    mdp = build_tabular_mdp(spec, gamma=spec.gamma_env**spec.k)
    v, _ = value_iteration(mdp)
    return float(v[mdp.init_state])
