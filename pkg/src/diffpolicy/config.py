"""Run configuration: flat ``key = value`` files with dotted keys.

Example::

    env.kind = grid_macro
    env.k = 4
    pmd.loss = fkl
    trainer.total_env_steps = 100000

Lines starting with ``#`` are comments.  ``load_config`` parses a file,
``parse_overrides`` applies ``--set key=value`` pairs on top, and
``TrainerConfig.from_mapping`` validates the result.  Unknown keys are
rejected.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from typing import Any, Mapping

from .errors import ConfigError

__all__ = [
    "TrainerConfig",
    "load_config",
    "parse_overrides",
    "render_config",
]


def _parse_scalar(text: str) -> Any:
    t = text.strip()
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    return t


def load_config(path: str) -> dict[str, Any]:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, Any] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            if key in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = _parse_scalar(value)
    return out


def parse_overrides(pairs: list[str]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        out[key.strip()] = _parse_scalar(value)
    return out


# mapping from flat config keys to TrainerConfig field names
_KEY_TO_FIELD = {
    "env.kind": "env_kind",
    "env.k": "env_k",
    "env.n_primitive": "env_n_primitive",
    "env.seed": "env_seed",
    "env.grid_size": "env_grid_size",
    "env.bandit_bonus": "env_bandit_bonus",
    "diffusion.n_steps": "diffusion_n_steps",
    "sampler.mode": "sampler_mode",
    "sampler.top_p": "sampler_top_p",
    "sampler.remask_eta": "sampler_remask_eta",
    "net.arch": "net_arch",
    "net.d_model": "net_d_model",
    "net.n_blocks": "net_n_blocks",
    "net.n_heads": "net_n_heads",
    "net.t_embed_dim": "net_t_embed_dim",
    "net.use_positions": "net_use_positions",
    "net.q_hidden": "net_q_hidden",
    "pmd.loss": "pmd_loss",
    "pmd.lambda": "pmd_lambda",
    "pmd.auto_temp": "pmd_auto_temp",
    "pmd.epsilon": "pmd_epsilon",
    "pmd.temp_lr": "pmd_temp_lr",
    "pmd.samples": "pmd_samples",
    "pmd.elbo_mode": "pmd_elbo_mode",
    "pmd.onpolicy_pairs": "pmd_onpolicy_pairs",
    "clip.ratio": "clip_ratio",
    "clip.kl_coeff": "clip_kl_coeff",
    "value.gamma": "value_gamma",
    "value.tau": "value_tau",
    "value.m_boot": "value_m_boot",
    "buffer.capacity": "buffer_capacity",
    "trainer.seed": "seed",
    "trainer.total_env_steps": "total_env_steps",
    "trainer.batch_size": "batch_size",
    "trainer.improve_states": "improve_states",
    "trainer.sample_insert_ratio": "sample_insert_ratio",
    "trainer.learning_starts": "learning_starts",
    "trainer.actor_lr": "actor_lr",
    "trainer.critic_lr": "critic_lr",
    "trainer.n_actors": "n_actors",
    "trainer.planner": "planner",
    "trainer.plan_k": "plan_k",
    "trainer.max_episode_len": "max_episode_len",
    "trainer.eval_every": "eval_every",
    "trainer.eval_episodes": "eval_episodes",
    "trainer.out_dir": "out_dir",
    "trainer.checkpoint_every": "checkpoint_every",
    "trainer.grad_clip": "grad_clip",
}
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items()}


@dataclass(frozen=True)
class TrainerConfig:
    env_kind: str = "seq_bandit"
    env_k: int = 4
    env_n_primitive: int = 3
    env_seed: int = 0
    env_grid_size: int = 7
    env_bandit_bonus: bool = False
    diffusion_n_steps: int = 4
    sampler_mode: str = "ancestral"
    sampler_top_p: float = 0.98
    sampler_remask_eta: float = 0.0
    net_arch: str = "transformer"
    net_d_model: int = 64
    net_n_blocks: int = 2
    net_n_heads: int = 1
    net_t_embed_dim: int = 8
    net_use_positions: bool = True
    net_q_hidden: int = 64
    pmd_loss: str = "fkl"
    pmd_lambda: float = 1.0
    pmd_auto_temp: bool = False
    pmd_epsilon: float = 1.0
    pmd_temp_lr: float = 1e-2
    pmd_samples: int = 8
    pmd_elbo_mode: str = "mc"
    pmd_onpolicy_pairs: bool = False
    clip_ratio: float = 0.2
    clip_kl_coeff: float = 0.0
    value_gamma: float = 0.997
    value_tau: float = 0.005
    value_m_boot: int = 4
    buffer_capacity: int = 1_000_000
    seed: int = 0
    total_env_steps: int = 10_000
    batch_size: int = 64
    improve_states: int = 8
    sample_insert_ratio: float = 4.0
    learning_starts: int = 256
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    n_actors: int = 1
    planner: bool = False
    plan_k: int = 4
    max_episode_len: int = 50
    eval_every: int = 2_000
    eval_episodes: int = 32
    out_dir: str = "runs/default"
    checkpoint_every: int = 0  # 0 = only final
    grad_clip: float = 10.0

    def __post_init__(self) -> None:
        if self.env_kind not in ("seq_bandit", "grid_macro", "coop_game"):
            raise ConfigError(f"unknown env.kind {self.env_kind!r}")
        if self.pmd_loss not in ("fkl", "rkl_single_step", "rkl_elbo_ratio"):
            raise ConfigError(f"unknown pmd.loss {self.pmd_loss!r}")
        if self.sampler_mode not in ("ancestral", "top_p", "remask"):
            raise ConfigError(f"unknown sampler.mode {self.sampler_mode!r}")
        if self.pmd_elbo_mode not in ("mc", "exact_n"):
            raise ConfigError(f"unknown pmd.elbo_mode {self.pmd_elbo_mode!r}")
        if self.net_arch not in ("transformer", "mlp"):
            raise ConfigError(f"unknown net.arch {self.net_arch!r}")
        for key, val in (
            ("diffusion.n_steps", self.diffusion_n_steps),
            ("pmd.samples", self.pmd_samples),
            ("trainer.batch_size", self.batch_size),
            ("trainer.total_env_steps", self.total_env_steps),
        ):
            if int(val) < 1:
                raise ConfigError(f"{key} must be >= 1, got {val}")
        if self.pmd_samples < 2:
            raise ConfigError("pmd.samples must be >= 2")
        if not 0.0 < self.value_gamma < 1.0:
            raise ConfigError("value.gamma must be in (0, 1)")
        if self.sample_insert_ratio <= 0.0:
            raise ConfigError("trainer.sample_insert_ratio must be positive")
        if self.planner and self.env_kind != "grid_macro":
            raise ConfigError("planner mode requires env.kind = grid_macro")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "TrainerConfig":
        kwargs: dict[str, Any] = {}
        for key, value in mapping.items():
            if key not in _KEY_TO_FIELD:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[_KEY_TO_FIELD[key]] = value
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def to_mapping(self) -> dict[str, Any]:
        return {_FIELD_TO_KEY[f.name]: getattr(self, f.name) for f in fields(self)}


def render_config(cfg: TrainerConfig) -> str:
    """Flat-file form of a resolved config (stable key order)."""
    lines = [f"{k} = {v}" for k, v in sorted(cfg.to_mapping().items())]
    return "\n".join(lines) + "\n"
