"""Kernel backend selection and thread capping.

PATCHFRAME_BACKEND=numpy|numba forces a backend; by default the numba
kernels are used when importable and the pure-numpy fallback otherwise.
PATCHFRAME_THREADS caps intra-stage parallelism (numba threads and the
evaluation worker pool).
"""

from __future__ import annotations

import os


def thread_cap() -> int:
    raw = os.environ.get("PATCHFRAME_THREADS", "").strip()
    avail = os.cpu_count() or 1
    if not raw:
        return avail
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"PATCHFRAME_THREADS must be an integer, got {raw!r}") from exc
    return max(1, min(n, avail))


def _load():
    forced = os.environ.get("PATCHFRAME_BACKEND", "").strip().lower()
    if forced and forced not in ("numpy", "numba"):
        raise ValueError(f"PATCHFRAME_BACKEND must be 'numpy' or 'numba', got {forced!r}")
    if forced == "numpy":
        from . import kernels_numpy as k

        return k, "numpy"
    # the portable threading layer avoids TBB/OMP version warnings
    os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
    try:
        from . import kernels_numba as k

        name = "numba"
    except ImportError:
        if forced == "numba":
            raise
        from . import kernels_numpy as k

        name = "numpy"
    if name == "numba":
        import numba

        numba.set_num_threads(max(1, min(thread_cap(), numba.config.NUMBA_NUM_THREADS)))
    return k, name


kernels, BACKEND_NAME = _load()
