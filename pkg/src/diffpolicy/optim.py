"""Adam optimizer over a ParamStore.

Gradients accumulate in the store between calls; ``adam_step`` consumes and
zeroes them.  Non-finite gradients abort with a diagnostic rather than
silently corrupting parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import GradientError
from .params import ParamStore

__all__ = ["AdamState", "adam_step"]

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_store(cls, store: ParamStore) -> "AdamState":
        return cls(
            m={n: np.zeros_like(store.value(n)) for n in store.names()},
            v={n: np.zeros_like(store.value(n)) for n in store.names()},
        )

    def as_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Flatten to named arrays for checkpointing."""
        out: dict[str, np.ndarray] = {prefix + "t": np.asarray(float(self.t))}
        for name, arr in self.m.items():
            out[prefix + "m/" + name] = arr
        for name, arr in self.v.items():
            out[prefix + "v/" + name] = arr
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        self.t = int(arrays[prefix + "t"])
        for name in self.m:
            self.m[name][...] = arrays[prefix + "m/" + name]
            self.v[name][...] = arrays[prefix + "v/" + name]


def adam_step(
    store: ParamStore,
    state: AdamState,
    lr: float,
    clip_norm: float | None = None,
) -> float:
    """Apply one Adam update from the store's accumulated gradients.

    Returns the pre-clip global gradient norm.  Raises
    :class:`GradientError` on NaN/inf gradients (parameters untouched).
    """
    norm = store.grad_norm()
    if not np.isfinite(norm):
        bad = [n for n in store.names() if not np.all(np.isfinite(store.grad(n)))]
        raise GradientError(f"non-finite gradient in parameters: {bad}")
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
    state.t += 1
    for name in store.names():
        g = store.grad(name)
        if scale != 1.0:
            g = g * scale
        kernels.adam_update(
            store.value(name).reshape(-1),
            np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
            state.m[name].reshape(-1),
            state.v[name].reshape(-1),
            lr,
            BETA1,
            BETA2,
            EPS,
            state.t,
        )
    store.zero_grads()
    return norm
