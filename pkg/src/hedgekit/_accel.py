"""JIT acceleration switch.

Hot numeric kernels are written once, in a numba-compatible subset of numpy,
and wrapped with :func:`maybe_njit`.  Setting the environment variable
``HEDGEKIT_PURE_NUMPY=1`` (or any truthy value) before import selects the
plain-numpy path, which is also used automatically when numba is missing.
"""

from __future__ import annotations

import os


def _flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() not in ("", "0", "false", "no")


PURE_NUMPY = _flag("HEDGEKIT_PURE_NUMPY")

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

NUMBA_ENABLED = _numba is not None and not PURE_NUMPY

# fastmath stays off: bitwise-reproducible solves matter more than speed here
KERNEL_OPTS = dict(cache=True, nogil=True, fastmath=False)


def maybe_njit(**kwargs):
    """Return numba.njit(**kwargs) when acceleration is on, else a no-op decorator."""
    if NUMBA_ENABLED:
        return _numba.njit(**kwargs)

    def passthrough(fn):
        return fn

    return passthrough


def force_njit(**kwargs):
    """numba.njit regardless of the env flag; None when numba is unavailable.

    Used by the kernel benchmark to time both paths side by side.
    """
    if _numba is None:
        return None
    return _numba.njit(**kwargs)
