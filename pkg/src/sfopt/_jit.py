"""Optional numba compilation for the hot kernels.

Set ``SFOPT_DISABLE_NUMBA=1`` in the environment (before import) to run the
pure-numpy code path. The flag is read once at import time.
"""
import os

_FALSE = ("", "0", "false", "no", "off")

DISABLED = os.environ.get("SFOPT_DISABLE_NUMBA", "").strip().lower() not in _FALSE

try:
    if DISABLED:
        raise ImportError
    import numba as _numba
    HAS_NUMBA = True
except ImportError:
    _numba = None
    HAS_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available and enabled, identity otherwise."""
    if HAS_NUMBA:
        kwargs.setdefault("cache", True)
        kwargs.setdefault("nogil", True)
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"
