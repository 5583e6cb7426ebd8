"""PPCN_THREADS handling.

BLAS libraries read their thread-count environment variables once, when
numpy first loads, so the cap must be applied before any numpy import.
The package __init__ calls apply_thread_env() as its very first statement.

PPCN_THREADS semantics: unset or 0 means "auto" (leave the environment
alone); a positive integer caps every BLAS/OpenMP pool at that many
threads.  Malformed values are ignored here so that importing the package
never fails; the command line tool validates and reports them.
"""

import os

_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def thread_request() -> int | None:
    """Parsed PPCN_THREADS value, or None when unset/malformed."""
    raw = os.environ.get("PPCN_THREADS")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        return None


def apply_thread_env() -> None:
    n = thread_request()
    if n is not None and n > 0:
        for var in _VARS:
            os.environ[var] = str(n)
