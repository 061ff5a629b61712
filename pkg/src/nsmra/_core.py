"""Backend selection for the hot kernels.

The compiled extension is used when importable; set ``NSMRA_PURE_PYTHON=1``
to force the numpy fallback.
"""

import logging
import os

from . import _pykernels

logger = logging.getLogger(__name__)

BACKEND = "python"
_impl = _pykernels

if os.environ.get("NSMRA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        logger.debug("compiled kernels unavailable, using numpy fallback")


def _c64(a):
    import numpy as np

    return np.ascontiguousarray(a, dtype=np.float64)


def chordal_matrix(X, Y):
    return _impl.chordal_matrix(_c64(X), _c64(Y))


def nsexp_matrix(X, Y, sx, bx, sy, by):
    return _impl.nsexp_matrix(_c64(X), _c64(Y), _c64(sx), _c64(bx), _c64(sy), _c64(by))


def wendland_matrix(X, centers, ell):
    return _impl.wendland_matrix(_c64(X), _c64(centers), float(ell))


def lasso_cd(X, y, lam, w, tol=1e-8, max_iter=100000):
    import numpy as np

    X = np.asfortranarray(X, dtype=np.float64)
    return _impl.lasso_cd(X, _c64(y), float(lam), w, float(tol), int(max_iter))


def backends():
    """Return the available kernel modules keyed by name."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:  # pragma: no cover
        pass
    return out
