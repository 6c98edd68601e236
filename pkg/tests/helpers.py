"""Shared test utilities: finite-difference gradient checking and friends."""

from __future__ import annotations

import numpy as np

from diffpolicy.params import ParamStore


def perturb_store(store: ParamStore, scale: float, rng: np.random.Generator) -> None:
    """Add Gaussian noise to every parameter (breaks zero-init symmetry)."""
    for name in store.names():
        v = store.value(name)
        v += scale * rng.normal(size=v.shape)


def grad_check(
    fn,
    store: ParamStore,
    rng: np.random.Generator,
    n_coords: int = 4,
    h: float = 1e-4,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``fn(store)`` must return the scalar loss and accumulate its gradients
    into the store.  Checks ``n_coords`` random coordinates per parameter
    and returns the worst relative error.  The step is deliberately coarse
    (1e-4): tiny gradient coordinates (~1e-8) otherwise disappear into
    float64 cancellation noise.
    """
    store.zero_grads()
    fn(store)
    grads = {n: store.grad(n).copy() for n in store.names()}
    store.zero_grads()
    worst = 0.0
    for name in store.names():
        flat = store.value(name).reshape(-1)
        gflat = grads[name].reshape(-1)
        idxs = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(store)
            store.zero_grads()
            flat[i] = orig - h
            fm = fn(store)
            store.zero_grads()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            denom = max(abs(fd), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(fd - gflat[i]) / denom)
    return worst


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())
