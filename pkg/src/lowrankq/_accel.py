"""Kernel backend selection.

Hot per-step loops are compiled with numba by default.  Setting the
environment variable ``LOWRANKQ_BACKEND=numpy`` skips compilation and runs
the identical function bodies as plain Python over numpy arrays.  That path
is slow but has no compile step, which makes it the reference when debugging
kernels or benchmarking the compiled backend against it.
"""

import os

_ENV_VAR = "LOWRANKQ_BACKEND"
_CHOICES = ("numba", "numpy")

BACKEND = os.environ.get(_ENV_VAR, "numba").strip().lower()
if BACKEND not in _CHOICES:
    raise RuntimeError(
        f"{_ENV_VAR} must be one of {_CHOICES}, got {BACKEND!r}"
    )

if BACKEND == "numba":
    try:
        import numba
    except ImportError:  # pragma: no cover - numba is a declared dependency
        BACKEND = "numpy"


if BACKEND == "numba":

    def jit_kernel(fn):
        # nogil so a thread pool of trials can overlap kernel execution.
        return numba.njit(cache=True, nogil=True)(fn)

else:

    def jit_kernel(fn):
        return fn
