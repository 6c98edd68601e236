#!/usr/bin/env python3
"""Compare the Cython kernel backend against the NumPy fallback.

Times each hot kernel at actor-path shapes (tiny arrays hit once per env
step) and learner-path shapes (batched), then the end-to-end single-state
sampler under each backend.  The dispatcher binds a backend at import time,
so the end-to-end rows re-run this script in a subprocess with
``DIFFPOLICY_KERNELS`` set.

Usage: python3 benchmarks/bench_kernels.py [--repeat 2000]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from diffpolicy.kernels import _npk

try:
    from diffpolicy.kernels import _ck
except ImportError:
    _ck = None


def best_of(fn, repeat: int, rounds: int = 5) -> float:
    """Seconds per call, best mean over `rounds` timing rounds."""
    best = float("inf")
    for _ in range(rounds):
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn()
        best = min(best, (time.perf_counter() - t0) / repeat)
    return best


def kernel_cases():
    rng = np.random.default_rng(0)
    small = rng.normal(size=(8, 5))
    big = rng.normal(size=(4096, 5))
    tokens = np.array([4, 4, 1, 4, 0, 4, 4, 4], dtype=np.int64)
    probs = rng.dirichlet(np.ones(4), size=8)
    u_gate = rng.random(8)
    u_tok = rng.random(8)
    u_mask = rng.random(8)
    p = rng.normal(size=4096)
    g = rng.normal(size=4096)
    m = np.zeros(4096)
    v = np.zeros(4096)

    def rows(mod):
        return [
            ("softmax_rows (8x5)", lambda: mod.softmax_rows(small)),
            ("softmax_rows (4096x5)", lambda: mod.softmax_rows(big)),
            ("log_softmax_rows (4096x5)", lambda: mod.log_softmax_rows(big)),
            (
                "forward_mask_tokens (K=8)",
                lambda: mod.forward_mask_tokens(tokens, 0.5, 4, u_mask),
            ),
            (
                "unmask_step (K=8, |A|=4)",
                lambda: mod.unmask_step(tokens, probs, probs, 0.5, 4, u_gate, u_tok),
            ),
            (
                "adam_update (4096 params)",
                lambda: mod.adam_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 100),
            ),
        ]

    return rows


def run_end_to_end(repeat: int) -> float:
    """Seconds per full reverse-chain draw (invoked in a subprocess)."""
    from diffpolicy.diffusion import SamplerConfig, sample_action
    from diffpolicy.models import DenoiserConfig, init_denoiser
    from diffpolicy.schedule import linear_schedule

    cfg = DenoiserConfig(
        seq_len=8, n_actions=4, state_dim=4, arch="mlp", d_model=64, t_embed_dim=8
    )
    store = init_denoiser(cfg, np.random.default_rng(0))
    sch = linear_schedule(2)
    state = np.zeros(4)
    sampler = SamplerConfig()
    rng = np.random.default_rng(1)
    for _ in range(50):
        sample_action(store, cfg, state, sch, sampler, rng)
    t0 = time.perf_counter()
    for _ in range(repeat):
        sample_action(store, cfg, state, sch, sampler, rng)
    return (time.perf_counter() - t0) / repeat


def end_to_end_subprocess(backend: str, repeat: int) -> float:
    env = dict(os.environ, DIFFPOLICY_KERNELS=backend)
    out = subprocess.run(
        [sys.executable, __file__, "--e2e", "--repeat", str(repeat)],
        env=env,
        capture_output=True,
        text=True,
        check=True,
    )
    return float(out.stdout.strip())


def fmt(seconds: float) -> str:
    if seconds < 1e-3:
        return f"{seconds * 1e6:9.2f} us"
    return f"{seconds * 1e3:9.3f} ms"


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=2000)
    ap.add_argument("--e2e", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()

    if args.e2e:
        print(run_end_to_end(args.repeat))
        return 0

    if _ck is None:
        print("compiled backend not built; timing the NumPy fallback only")

    rows = kernel_cases()
    table = []
    for (name, fn_np), (_, fn_c) in zip(
        rows(_npk), rows(_ck if _ck is not None else _npk)
    ):
        t_np = best_of(fn_np, args.repeat)
        t_c = best_of(fn_c, args.repeat) if _ck is not None else float("nan")
        table.append((name, t_np, t_c))

    e2e_np = end_to_end_subprocess("numpy", max(200, args.repeat // 4))
    e2e_c = (
        end_to_end_subprocess("c", max(200, args.repeat // 4))
        if _ck is not None
        else float("nan")
    )
    table.append(("sample_action (K=8, N=2, mlp)", e2e_np, e2e_c))

    width = max(len(name) for name, *_ in table)
    print(f"{'':{width}}  {'numpy':>12}  {'c':>12}  {'speedup':>8}")
    for name, t_np, t_c in table:
        speed = f"{t_np / t_c:7.2f}x" if np.isfinite(t_c) else "      --"
        print(f"{name:{width}}  {fmt(t_np)}  {fmt(t_c)}  {speed}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
