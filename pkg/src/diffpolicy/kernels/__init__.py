"""Hot-loop kernels with a compiled core and a NumPy fallback.

At import time the package picks the Cython extension ``_ck`` when it is
available, otherwise the pure-NumPy module ``_npk``.  Set the environment
variable ``DIFFPOLICY_KERNELS`` to ``c`` or ``numpy`` to force a backend
(``c`` raises if the extension is missing).  ``BACKEND`` reports the choice.
"""

from __future__ import annotations

import os

_requested = os.environ.get("DIFFPOLICY_KERNELS", "auto").lower()

if _requested not in ("auto", "c", "numpy"):
    raise ImportError(
        f"DIFFPOLICY_KERNELS must be 'auto', 'c' or 'numpy', got {_requested!r}"
    )

if _requested == "numpy":
    from . import _npk as _impl

    BACKEND = "numpy"
else:
    try:
        from . import _ck as _impl  # type: ignore[attr-defined]

        BACKEND = "c"
    except ImportError:
        if _requested == "c":
            raise
        from . import _npk as _impl

        BACKEND = "numpy"

softmax_rows = _impl.softmax_rows
log_softmax_rows = _impl.log_softmax_rows
forward_mask_tokens = _impl.forward_mask_tokens
unmask_step = _impl.unmask_step
adam_update = _impl.adam_update

__all__ = [
    "BACKEND",
    "adam_update",
    "forward_mask_tokens",
    "log_softmax_rows",
    "softmax_rows",
    "unmask_step",
]
