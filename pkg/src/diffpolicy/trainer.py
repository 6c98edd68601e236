"""Single-process actor/learner training loop.

Actors (round-robin logical actors sharing the process) collect transitions
with the current policy; the learner interleaves value regression toward
bootstrapped targets with policy improvement toward the mirror-descent
reweighting of an old-policy snapshot.  A token bucket keeps the ratio of
learner sample consumption to buffer insertions at the configured value.
Runs are bit-reproducible for a fixed seed and backend; the environment
variable ``RLD2_SEED`` overrides the configured seed.

Checkpoints bundle every parameter store, optimizer moments, temperature
and counters into one file (see :mod:`diffpolicy.params`); ``metrics.jsonl``
gets one record per evaluation event.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

import numpy as np

from .config import TrainerConfig, render_config
from .diffusion import SamplerConfig, sample_action
from .envs import EnvSpec, reset, state_dim, step, step_primitive
from .errors import GradientError, TrainAbort
from .models import (
    DenoiserConfig,
    QNetConfig,
    init_denoiser,
    init_qnet,
)
from .optim import AdamState, adam_step
from .params import ParamStore, read_arrays, write_arrays
from .pmd import (
    ClipConfig,
    TemperatureState,
    fkl_loss,
    rkl_loss_batch,
    rkl_loss_elbo_ratio,
    tune_lambda,
)
from .schedule import NoiseSchedule, linear_schedule
from .value import (
    ReplayBuffer,
    Transition,
    improvement_batches,
    polyak_update,
    q_targets_batch,
    td_loss,
)

__all__ = [
    "EvalStats",
    "TrainResult",
    "act_planner",
    "evaluate",
    "load_checkpoint",
    "make_setup",
    "policy_from_checkpoint",
    "save_checkpoint",
    "train",
]

SEED_ENV_VAR = "RLD2_SEED"
CHECKPOINT_SUFFIX = ".rld2"


@dataclass(frozen=True)
class EvalStats:
    mean_return: float
    stderr: float
    success_rate: float


@dataclass
class TrainResult:
    config: TrainerConfig
    checkpoint_path: str
    metrics_path: str
    env_steps: int
    learner_steps: int
    final_eval: EvalStats
    counters: dict


@dataclass(frozen=True)
class Setup:
    """Everything derived from a TrainerConfig that the loop needs."""

    env_spec: EnvSpec
    pcfg: DenoiserConfig
    qcfg: QNetConfig
    schedule: NoiseSchedule
    sampler: SamplerConfig
    clip: ClipConfig


def make_setup(cfg: TrainerConfig) -> Setup:
    seq_len = cfg.plan_k if cfg.planner else cfg.env_k
    gamma_env = cfg.value_gamma ** (1.0 / cfg.env_k) if cfg.env_kind == "grid_macro" else 1.0
    env_spec = EnvSpec(
        kind=cfg.env_kind,
        k=cfg.env_k,
        n_primitive=cfg.env_n_primitive,
        seed=cfg.env_seed,
        grid_size=cfg.env_grid_size,
        bandit_bonus=cfg.env_bandit_bonus,
        gamma_env=gamma_env,
    )
    pcfg = DenoiserConfig(
        seq_len=seq_len,
        n_actions=cfg.env_n_primitive,
        state_dim=state_dim(env_spec),
        arch=cfg.net_arch,
        d_model=cfg.net_d_model,
        n_blocks=cfg.net_n_blocks,
        n_heads=cfg.net_n_heads,
        t_embed_dim=cfg.net_t_embed_dim,
        use_positions=cfg.net_use_positions,
    )
    qcfg = QNetConfig(
        state_dim=state_dim(env_spec),
        seq_len=1 if cfg.planner else cfg.env_k,
        n_actions=cfg.env_n_primitive,
        hidden=cfg.net_q_hidden,
    )
    return Setup(
        env_spec=env_spec,
        pcfg=pcfg,
        qcfg=qcfg,
        schedule=linear_schedule(cfg.diffusion_n_steps),
        sampler=SamplerConfig(
            mode=cfg.sampler_mode,
            top_p=cfg.sampler_top_p,
            remask_eta=cfg.sampler_remask_eta,
        ),
        clip=ClipConfig(ratio_clip=cfg.clip_ratio, kl_coeff=cfg.clip_kl_coeff),
    )


def act_planner(
    policy: ParamStore,
    pcfg: DenoiserConfig,
    state: np.ndarray,
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
    rng: np.random.Generator,
) -> int:
    """Plan-then-commit: sample a full sequence, execute its first primitive."""
    a0, _ = sample_action(policy, pcfg, state, schedule, sampler, rng)
    return int(a0[0])


def evaluate(
    policy: ParamStore,
    pcfg: DenoiserConfig,
    env_spec: EnvSpec,
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
    episodes: int,
    rng: np.random.Generator,
    max_steps: int = 50,
    planner: bool = False,
) -> EvalStats:
    """Roll out the stochastic policy; returns mean/stderr of episode return
    and the fraction of episodes that reached a success flag."""
    returns = np.zeros(episodes)
    successes = np.zeros(episodes)
    for ep in range(episodes):
        state = reset(env_spec, rng)
        total = 0.0
        for _ in range(max_steps):
            if planner:
                a = act_planner(policy, pcfg, state, schedule, sampler, rng)
                res = step_primitive(env_spec, state, a, rng)
            else:
                a0, _ = sample_action(policy, pcfg, state, schedule, sampler, rng)
                res = step(env_spec, state, a0, rng)
            total += res.reward
            state = res.next_state
            if res.info.get("success"):
                successes[ep] = 1.0
            if res.done:
                break
        returns[ep] = total
    stderr = float(returns.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0
    return EvalStats(float(returns.mean()), stderr, float(successes.mean()))


def save_checkpoint(
    path: str,
    policy: ParamStore,
    policy_old: ParamStore,
    qnet: ParamStore,
    q_target: ParamStore,
    opt_policy: AdamState,
    opt_q: AdamState,
    ts: TemperatureState,
    counters: dict,
) -> None:
    arrays: dict[str, np.ndarray] = {}
    for prefix, store in (
        ("policy/", policy),
        ("policy_old/", policy_old),
        ("qnet/", qnet),
        ("q_target/", q_target),
    ):
        for name in store.names():
            arrays[prefix + name] = store.value(name)
    arrays.update(opt_policy.as_arrays("opt_policy/"))
    arrays.update(opt_q.as_arrays("opt_q/"))
    arrays["temperature/lambda"] = np.asarray(ts.lam)
    for key, val in counters.items():
        arrays[f"counters/{key}"] = np.asarray(float(val))
    write_arrays(path, arrays)


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    return read_arrays(path)


def policy_from_checkpoint(path: str, pcfg: DenoiserConfig) -> ParamStore:
    """Extract just the acting policy parameters from a checkpoint file."""
    arrays = read_arrays(path)
    rng = np.random.default_rng(0)
    store = init_denoiser(pcfg, rng)
    sub = {
        name[len("policy/") :]: arr
        for name, arr in arrays.items()
        if name.startswith("policy/")
    }
    store.load_values(sub)
    return store


@dataclass
class _Actor:
    rng: np.random.Generator
    state: np.ndarray
    ep_len: int = 0


def train(cfg: TrainerConfig) -> TrainResult:
    """Run the full loop; returns paths and final evaluation statistics."""
    seed = cfg.seed
    if os.environ.get(SEED_ENV_VAR):
        seed = int(os.environ[SEED_ENV_VAR])
    setup = make_setup(cfg)
    env_spec, pcfg, qcfg = setup.env_spec, setup.pcfg, setup.qcfg
    schedule, sampler, clip = setup.schedule, setup.sampler, setup.clip

    root = np.random.SeedSequence(seed)
    (init_ss, learner_ss, buffer_ss, eval_ss, *actor_ss) = root.spawn(
        4 + cfg.n_actors
    )
    init_rng = np.random.default_rng(init_ss)
    learner_rng = np.random.default_rng(learner_ss)
    buffer_rng = np.random.default_rng(buffer_ss)

    policy = init_denoiser(pcfg, init_rng)
    qnet = init_qnet(qcfg, init_rng)
    policy_old = policy.copy()
    q_target = qnet.copy()
    opt_policy = AdamState.for_store(policy)
    opt_q = AdamState.for_store(qnet)
    ts = TemperatureState(
        lam=cfg.pmd_lambda, epsilon=cfg.pmd_epsilon, lr=cfg.pmd_temp_lr
    )
    buffer = ReplayBuffer(cfg.buffer_capacity)
    actors = [
        _Actor(rng=np.random.default_rng(ss), state=reset(env_spec, np.random.default_rng(0)))
        for ss in actor_ss
    ]

    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.resolved.cfg"), "w") as f:
        f.write(render_config(cfg))
    metrics_path = os.path.join(cfg.out_dir, "metrics.jsonl")
    metrics_f = open(metrics_path, "w")
    t_start = time.time()

    counters = {
        "env_steps": 0,
        "learner_steps": 0,
        "episodes": 0,
        "samples_consumed": 0,
        "forward_mask_pairs": 0,
        "onpolicy_pairs": 0,
    }
    credits = 0.0
    last_actor_loss = float("nan")
    last_critic_loss = float("nan")
    eval_count = 0

    def write_metrics(ev: EvalStats | None) -> None:
        rec = {
            "env_steps": counters["env_steps"],
            "learner_steps": counters["learner_steps"],
            "episodes": counters["episodes"],
            "buffer_size": len(buffer),
            "actor_loss": last_actor_loss,
            "critic_loss": last_critic_loss,
            "lambda": ts.lam,
            "eval_return_mean": ev.mean_return if ev else None,
            "eval_return_stderr": ev.stderr if ev else None,
            "eval_success_rate": ev.success_rate if ev else None,
            "wall_time": time.time() - t_start,
        }
        metrics_f.write(json.dumps(rec) + "\n")
        metrics_f.flush()

    def run_eval() -> EvalStats:
        nonlocal eval_count
        eval_count += 1
        ev_rng = np.random.default_rng(eval_ss.spawn(1)[0])
        return evaluate(
            policy,
            pcfg,
            env_spec,
            schedule,
            sampler,
            cfg.eval_episodes,
            ev_rng,
            max_steps=cfg.max_episode_len,
            planner=cfg.planner,
        )

    def abort(reason: str) -> None:
        path = os.path.join(cfg.out_dir, "ckpt_abort" + CHECKPOINT_SUFFIX)
        save_checkpoint(
            path, policy, policy_old, qnet, q_target, opt_policy, opt_q, ts, counters
        )
        metrics_f.close()
        raise TrainAbort(f"{reason}; diagnostic checkpoint at {path}")

    def learner_step() -> None:
        nonlocal last_actor_loss, last_critic_loss, ts
        batch = buffer.sample(cfg.batch_size, buffer_rng)
        counters["samples_consumed"] += cfg.batch_size
        targets = q_targets_batch(
            batch,
            q_target,
            qcfg,
            policy,
            pcfg,
            schedule,
            cfg.value_gamma,
            cfg.value_m_boot,
            learner_rng,
        )
        states = np.stack([t.state for t in batch])
        actions = np.stack([t.action for t in batch])
        closs = td_loss(qnet, qcfg, states, actions, targets)
        try:
            adam_step(qnet, opt_q, cfg.critic_lr, clip_norm=cfg.grad_clip)
        except GradientError as e:
            abort(f"critic: {e}")
        # policy improvement on a slice of the sampled states
        s_imp = states[: cfg.improve_states]
        record = cfg.pmd_loss == "rkl_single_step" or cfg.pmd_onpolicy_pairs
        batches, trajs = improvement_batches(
            s_imp,
            qnet,
            qcfg,
            policy_old,
            pcfg,
            schedule,
            cfg.pmd_samples,
            ts.lam,
            learner_rng,
            record=record,
        )
        m = cfg.pmd_samples
        if cfg.pmd_loss == "fkl":
            noisy = None
            if cfg.pmd_onpolicy_pairs:
                noisy = [
                    [lvl[i * m : (i + 1) * m] for lvl in trajs.states[1:]]
                    for i in range(len(batches))
                ]
                counters["onpolicy_pairs"] += len(batches) * m * schedule.n_steps
            else:
                counters["forward_mask_pairs"] += len(batches) * m
            aloss, _ = fkl_loss(
                policy,
                pcfg,
                batches,
                schedule,
                elbo_mode=cfg.pmd_elbo_mode,
                rng=learner_rng,
                noisy_states=noisy,
            )
        elif cfg.pmd_loss == "rkl_single_step":
            adv = np.concatenate([b.advantages for b in batches])
            rep_states = np.repeat(s_imp, m, axis=0)
            aloss = rkl_loss_batch(
                policy, policy_old, pcfg, trajs, adv, rep_states, schedule, clip
            )
        else:  # rkl_elbo_ratio
            total = 0.0
            for b in batches:
                total += rkl_loss_elbo_ratio(
                    policy, policy_old, pcfg, b, schedule, clip, rng=learner_rng
                )
            for name in policy.names():
                policy.grad(name)[...] /= len(batches)
            aloss = total / len(batches)
        if not np.isfinite(aloss) or not np.isfinite(closs):
            abort(f"non-finite loss (actor {aloss}, critic {closs})")
        try:
            adam_step(policy, opt_policy, cfg.actor_lr, clip_norm=cfg.grad_clip)
        except GradientError as e:
            abort(f"actor: {e}")
        polyak_update(policy_old, policy, cfg.value_tau)
        polyak_update(q_target, qnet, cfg.value_tau)
        if cfg.pmd_auto_temp:
            all_adv = np.concatenate([b.advantages for b in batches])
            ts = tune_lambda(all_adv, ts)
        counters["learner_steps"] += 1
        last_actor_loss, last_critic_loss = float(aloss), float(closs)

    next_eval = cfg.eval_every
    while counters["env_steps"] < cfg.total_env_steps:
        actor = actors[counters["env_steps"] % cfg.n_actors]
        if cfg.planner:
            a = act_planner(policy, pcfg, actor.state, schedule, sampler, actor.rng)
            res = step_primitive(env_spec, actor.state, a, actor.rng)
            action_arr = np.array([a], dtype=np.int64)
        else:
            a0, _ = sample_action(
                policy, pcfg, actor.state, schedule, sampler, actor.rng
            )
            res = step(env_spec, actor.state, a0, actor.rng)
            action_arr = a0
        buffer.push(
            Transition(
                state=actor.state.copy(),
                action=action_arr,
                reward=res.reward,
                next_state=res.next_state.copy(),
                done=res.done,
            )
        )
        counters["env_steps"] += 1
        credits += cfg.sample_insert_ratio
        actor.ep_len += 1
        if res.done or actor.ep_len >= cfg.max_episode_len:
            actor.state = reset(env_spec, actor.rng)
            actor.ep_len = 0
            counters["episodes"] += 1
        else:
            actor.state = res.next_state

        if len(buffer) >= min(cfg.learning_starts, cfg.buffer_capacity):
            while credits >= cfg.batch_size:
                credits -= cfg.batch_size
                learner_step()

        if cfg.eval_every and counters["env_steps"] >= next_eval:
            next_eval += cfg.eval_every
            write_metrics(run_eval())
        if (
            cfg.checkpoint_every
            and counters["env_steps"] % cfg.checkpoint_every == 0
        ):
            save_checkpoint(
                os.path.join(
                    cfg.out_dir,
                    f"ckpt_{counters['env_steps']}{CHECKPOINT_SUFFIX}",
                ),
                policy,
                policy_old,
                qnet,
                q_target,
                opt_policy,
                opt_q,
                ts,
                counters,
            )

    final_eval = run_eval()
    write_metrics(final_eval)
    metrics_f.close()
    ckpt_path = os.path.join(
        cfg.out_dir, f"ckpt_{counters['env_steps']}{CHECKPOINT_SUFFIX}"
    )
    save_checkpoint(
        ckpt_path, policy, policy_old, qnet, q_target, opt_policy, opt_q, ts, counters
    )
    return TrainResult(
        config=cfg,
        checkpoint_path=ckpt_path,
        metrics_path=metrics_path,
        env_steps=counters["env_steps"],
        learner_steps=counters["learner_steps"],
        final_eval=final_eval,
        counters=dict(counters),
    )
