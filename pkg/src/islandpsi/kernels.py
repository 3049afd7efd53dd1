"""Backend selection for the swing-equation kernels.

The compiled ``_kernels`` extension is used when importable; otherwise the
numpy implementation in ``_kernels_py``. Set ``ISLANDPSI_PURE_PYTHON=1`` to
force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("ISLANDPSI_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"

electrical_power = _impl.electrical_power
sync_matrix = _impl.sync_matrix
rk4_steps = _impl.rk4_steps


def available_backends():
    out = {"python": _kernels_py}
    try:
        from . import _kernels
        out["cython"] = _kernels
    except ImportError:
        pass
    return out
