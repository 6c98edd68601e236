"""Command-line entry points.

Subcommands::

    diffpolicy train --config run.cfg [--set key=value ...]
    diffpolicy eval --checkpoint ckpt_1000.rld2 --episodes 100
    diffpolicy sample --checkpoint ckpt_1000.rld2 --n 10
    diffpolicy oracle-check [--quick]

Exit codes: 0 success, 2 configuration/usage error, 3 oracle-check failure.
``eval`` and ``sample`` read the resolved config written next to the
checkpoint unless ``--config`` points elsewhere.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import TrainerConfig, load_config, parse_overrides
from .errors import ConfigError
from .trainer import SEED_ENV_VAR, evaluate, make_setup, policy_from_checkpoint, train

__all__ = ["main"]


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffpolicy")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training loop from a config file")
    t.add_argument("--config", required=True)
    t.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides"
    )

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, required=True)
    e.add_argument("--config", default=None)
    e.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sample", help="print sampled action sequences")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--seed", type=int, default=0)

    o = sub.add_parser("oracle-check", help="verify closed-form identities")
    o.add_argument("--quick", action="store_true")
    o.add_argument("--seed", type=int, default=0)
    return p


def _load_run_config(path: str, overrides: list[str]) -> TrainerConfig:
    mapping = load_config(path)
    mapping.update(parse_overrides(overrides))
    return TrainerConfig.from_mapping(mapping)


def _config_for_checkpoint(ckpt: str, explicit: str | None) -> TrainerConfig:
    path = explicit or os.path.join(os.path.dirname(ckpt) or ".", "config.resolved.cfg")
    if not os.path.exists(path):
        raise ConfigError(
            f"no config found at {path}; pass --config to locate the run config"
        )
    return TrainerConfig.from_mapping(load_config(path))


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cfg = _load_run_config(args.config, args.overrides)
            result = train(cfg)
            print(
                json.dumps(
                    {
                        "checkpoint": result.checkpoint_path,
                        "metrics": result.metrics_path,
                        "env_steps": result.env_steps,
                        "learner_steps": result.learner_steps,
                        "eval_return_mean": result.final_eval.mean_return,
                        "eval_success_rate": result.final_eval.success_rate,
                    }
                )
            )
            return 0

        if args.command == "eval":
            cfg = _config_for_checkpoint(args.checkpoint, args.config)
            setup = make_setup(cfg)
            policy = policy_from_checkpoint(args.checkpoint, setup.pcfg)
            seed = int(os.environ.get(SEED_ENV_VAR) or args.seed)
            stats = evaluate(
                policy,
                setup.pcfg,
                setup.env_spec,
                setup.schedule,
                setup.sampler,
                args.episodes,
                np.random.default_rng(seed),
                max_steps=cfg.max_episode_len,
                planner=cfg.planner,
            )
            print(
                json.dumps(
                    {
                        "episodes": args.episodes,
                        "return_mean": stats.mean_return,
                        "return_stderr": stats.stderr,
                        "success_rate": stats.success_rate,
                    }
                )
            )
            return 0

        if args.command == "sample":
            from .diffusion import sample_action
            from .envs import reset

            cfg = _config_for_checkpoint(args.checkpoint, args.config)
            setup = make_setup(cfg)
            policy = policy_from_checkpoint(args.checkpoint, setup.pcfg)
            seed = int(os.environ.get(SEED_ENV_VAR) or args.seed)
            rng = np.random.default_rng(seed)
            state = reset(setup.env_spec, rng)
            for _ in range(args.n):
                a0, _ = sample_action(
                    policy, setup.pcfg, state, setup.schedule, setup.sampler, rng
                )
                print(" ".join(str(int(x)) for x in a0))
            return 0

        # oracle-check
        from .oracle import run_identity_suite

        results = run_identity_suite(quick=args.quick, seed=args.seed)
        failed = 0
        for r in results:
            tag = "  ok " if r.passed else " FAIL"
            print(f"[{tag}] {r.name}: {r.detail}")
            failed += 0 if r.passed else 1
        if failed:
            print(f"{failed}/{len(results)} identity checks failed", file=sys.stderr)
            return 3
        print(f"all {len(results)} identity checks passed")
        return 0

    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
