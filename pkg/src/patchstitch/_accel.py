"""Backend selection for the compiled kernels.

The numba path is on by default. Set ``PATCHSTITCH_NUMBA=0`` in the
environment (before import) to run the pure-numpy fallbacks instead; both
paths return bit-identical results.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_ENV_FLAG = "PATCHSTITCH_NUMBA"


def _env_wants_numba():
    return os.environ.get(_ENV_FLAG, "1").strip().lower() not in ("0", "false", "no", "off")


_backend = "numba" if (HAVE_NUMBA and _env_wants_numba()) else "numpy"


def get_backend():
    return _backend


def set_backend(name):
    """Switch kernel backend at runtime (``"numba"`` or ``"numpy"``)."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _backend = name


def njit(*args, **kwargs):
    """``numba.njit`` with caching on; identity decorator without numba."""
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def set_num_threads(n):
    if HAVE_NUMBA and n:
        numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))
