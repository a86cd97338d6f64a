"""Numba acceleration shim.

Hot numeric kernels are decorated with ``maybe_njit``. By default they are
compiled with numba (cached on disk). Setting the environment variable
``TUBEMPC_NUMBA`` to ``0``/``false``/``off`` before import, or running
without numba installed, selects the pure-numpy/python fallback path: the
same source is executed uncompiled.
"""

import os
import warnings

_FLAG = os.environ.get("TUBEMPC_NUMBA", "1").strip().lower()
NUMBA_REQUESTED = _FLAG not in ("0", "false", "off", "no")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False
    if NUMBA_REQUESTED:
        warnings.warn("numba not importable, falling back to pure numpy kernels")

NUMBA_ENABLED = HAVE_NUMBA and NUMBA_REQUESTED


def maybe_njit(*args, **kwargs):
    """numba.njit when enabled, identity decorator otherwise."""
    if NUMBA_ENABLED:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(func):
        return func

    return wrap


def python_impl(func):
    """Return the uncompiled implementation of a maybe_njit kernel."""
    return getattr(func, "py_func", func)
