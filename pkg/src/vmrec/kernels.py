"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise, or when the
environment variable ``VMREC_PURE_PYTHON`` is set to a non-empty value other
than ``0``, the numpy fallback is used. ``BACKEND`` names the active one.

The wrappers here normalise dtypes and memory layout; shape validation is
the callers' job.
"""

import os

import numpy as np

from . import _pykernels

_force_py = os.environ.get("VMREC_PURE_PYTHON", "") not in ("", "0")

_impl = _pykernels
BACKEND = "python"
if not _force_py:
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass


def backends():
    """Return ``{name: module}`` for every backend importable here."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels

        found["cython"] = _ckernels
    except ImportError:
        pass
    return found


def _f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def _i64(x):
    return np.ascontiguousarray(x, dtype=np.int64)


def sq_dist(E1, E2, impl=None):
    return (impl or _impl).sq_dist(_f64(E1), _f64(E2))


def hinge_all_pairs(D, margin, impl=None):
    """Mean of ``max(D[i,i] - D[i,j] + margin, 0)`` over ``j != i`` and its gradient wrt ``D``."""
    return (impl or _impl).hinge_all_pairs(_f64(D), float(margin))


def hinge_triples(E, a, p, n, margin, impl=None):
    return (impl or _impl).hinge_triples(_f64(E), _i64(a), _i64(p), _i64(n), float(margin))


def gt_ranks(S, gt, descending, impl=None):
    """1-based rank of ``S[i, gt[i]]`` in row ``i``; ties go to the lower column."""
    return (impl or _impl).gt_ranks(_f64(S), _i64(gt), bool(descending))
