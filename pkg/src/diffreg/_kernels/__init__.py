"""Hot kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it has been built; set
``DIFFREG_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("DIFFREG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

nearest_pool = _impl.nearest_pool
kde_density = _impl.kde_density

__all__ = ["BACKEND", "nearest_pool", "kde_density"]
