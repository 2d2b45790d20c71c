"""Select the Hamiltonian kernel: compiled if available, numpy otherwise.

Set ``RSOPT_PURE_PYTHON=1`` to force the numpy implementation.
"""

import os

from . import _hampy

BACKEND = "python"
solve_batch = _hampy.solve_batch

if os.environ.get("RSOPT_PURE_PYTHON") != "1":
    try:
        from . import _hamext
    except ImportError:
        pass
    else:
        BACKEND = "compiled"
        solve_batch = _hamext.solve_batch

__all__ = ["BACKEND", "solve_batch"]
