"""Process entry point.

Thread capping has to happen before numpy's first import, because BLAS
backends read their environment only once. Nothing numeric may be
imported at this module's top level.
"""

from __future__ import annotations

import os
import sys

_BLAS_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
              "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


def cap_threads() -> None:
    """Honor M3AD_THREADS by capping the BLAS/OpenMP pools it maps to.

    Explicitly set backend variables win over the cap.
    """
    n = os.environ.get("M3AD_THREADS")
    if not n:
        return
    if not n.isdigit() or int(n) < 1:
        print(f"error: M3AD_THREADS must be a positive integer, got {n!r}",
              file=sys.stderr)
        raise SystemExit(1)
    for var in _BLAS_VARS:
        os.environ.setdefault(var, n)


def run() -> int:
    cap_threads()
    from .cli import main

    return main()
