"""Backend switch for the hot kernels.

Set ``SPARSEFLOW_NO_NUMBA=1`` to dispatch to the pure-numpy code paths. Both
paths are bit-identical; the numba one is only faster.
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("SPARSEFLOW_NO_NUMBA", "0").lower() not in (
    "1",
    "true",
    "yes",
)


def njit(fn):
    """Compile with numba when it is importable, otherwise leave as Python."""
    if HAVE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn  # pragma: no cover


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
