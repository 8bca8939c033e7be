"""Switch between numba-compiled kernels and the pure-numpy fallback.

Set ``PHYSFACE_NUMBA=0`` in the environment before import to force the
numpy path everywhere. Kernels that have both flavours expose them as
``<name>_numba`` / ``<name>_numpy`` and dispatch through ``USE_NUMBA``.
"""
import os

_flag = os.environ.get("PHYSFACE_NUMBA", "1").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and _flag not in ("0", "false", "off", "no")


def njit(fn):
    """``numba.njit(cache=True)`` when numba is usable, else the plain function."""
    if numba is None:
        return fn
    return numba.njit(cache=True)(fn)
