"""Numba switch.

Set ``CHUNKLM_NUMBA=0`` to force the pure-numpy kernels (also used when
numba is not importable).
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("CHUNKLM_NUMBA", "1").lower() not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    if not HAVE_NUMBA:
        def dec(f):
            return f

        return dec if not args else dec(args[0])
    return numba.njit(*args, **kwargs)
