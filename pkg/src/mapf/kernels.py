"""Backend selection for the numerical kernels.

The compiled extension ``mapf._ckernels`` is used when it has been built;
otherwise the numpy fallback in ``mapf._kernels_py`` is used. Call
:func:`use_backend` to switch explicitly (benchmarks and tests do).

The exp-bound reductions stay on numpy even under the compiled backend:
numpy's vectorized ``exp`` beats a scalar libm loop, and the fast-math flags
that would vectorize the loop break ``-inf`` handling. The compiled twins
remain in ``_ckernels`` and are parity-tested against the reference.
"""

import logging
import math

from mapf import _kernels_py

logger = logging.getLogger(__name__)

_NAMES = ("logsumexp", "normalize_log", "weight_update", "inverse_cdf", "nearest_segment")
# kernels where the compiled loop wins (see benchmarks/bench_kernels.py)
COMPILED = ("inverse_cdf", "nearest_segment")

try:
    from mapf import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKEND = None


def available_backends():
    return ["python"] + (["cython"] if _ckernels is not None else [])


def use_backend(name):
    """Bind the module-level kernel functions to ``"cython"`` or ``"python"``."""
    global BACKEND
    if name == "cython":
        if _ckernels is None:
            raise ImportError("mapf._ckernels is not built; run `pip install -e . --no-build-isolation`")
        src = _ckernels
    elif name == "python":
        src = _kernels_py
    else:
        raise ValueError(f"unknown backend {name!r}")
    for fn in _NAMES:
        use = src if (src is _kernels_py or fn in COMPILED) else _kernels_py
        globals()[fn] = getattr(use, fn)
    BACKEND = name
    logger.debug("kernel backend: %s", name)


use_backend("cython" if _ckernels is not None else "python")


def logmeanexp(a):
    n = len(a)
    if n == 0:
        return float("-inf")
    return logsumexp(a) - math.log(n)
