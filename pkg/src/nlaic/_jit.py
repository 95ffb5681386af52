"""Numba switch for the hot kernels.

Every compiled kernel in the package is written once as plain Python and
decorated with :func:`njit` from this module.  Setting the environment
variable ``NLAIC_DISABLE_NUMBA=1`` (or running without numba installed) makes
the decorator a no-op, so the very same source runs in the interpreter.  Both
paths perform identical IEEE operations in identical order; bitstreams do not
depend on which one produced them.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_FLAG = os.environ.get("NLAIC_DISABLE_NUMBA", "").strip().lower()
USE_NUMBA = numba is not None and _FLAG in ("", "0", "false", "no")


def njit(*args, **kwargs):
    """``numba.njit`` with on-disk caching, or the identity when disabled.

    Usable both bare (``@njit``) and with options (``@njit(parallel=True)``).
    """
    if args and callable(args[0]) and len(args) == 1 and not kwargs:
        return njit()(args[0])

    def wrap(func):
        if not USE_NUMBA:
            return func
        return numba.njit(cache=True, **kwargs)(func)

    return wrap


if USE_NUMBA:
    # the system TBB is too old for numba; skip probing it
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
    prange = numba.prange
else:
    prange = range


def python_impl(kernel):
    """Return the interpreted source of a kernel regardless of the switch."""
    return getattr(kernel, "py_func", kernel)
