"""Hot-loop kernels: the compiled extension when available, NumPy otherwise.

Set ``DIFFSQUEEZE_PURE_PYTHON=1`` to force the NumPy implementations.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("DIFFSQUEEZE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

searchsorted_rows = _impl.searchsorted_rows
scatter_matrices = _impl.scatter_matrices
g_means = _impl.g_means
project_to_ellipse = _impl.project_to_ellipse
