"""Optional numba acceleration.

Set ``AFLSIM_DISABLE_JIT=1`` to force the pure-numpy kernels even when numba
is importable. The flag is read once at import time.
"""

import os

_disabled = os.environ.get("AFLSIM_DISABLE_JIT", "").strip().lower() in ("1", "true", "yes", "on")

try:
    if _disabled:
        raise ImportError("disabled by AFLSIM_DISABLE_JIT")
    from numba import njit as _njit

    HAS_NUMBA = True
except ImportError:
    _njit = None
    HAS_NUMBA = False


def jit_or_fallback(fallback):
    """Return a decorator selecting the numba kernel or ``fallback``.

    The decorated function is the numba-compiled loop version; when numba is
    unavailable or disabled, ``fallback`` (a numpy implementation with the
    same signature) is returned instead.
    """

    def wrap(kernel):
        if HAS_NUMBA:
            compiled = _njit(cache=True, nogil=True)(kernel)
            compiled.__wrapped_fallback__ = fallback
            return compiled
        return fallback

    return wrap
