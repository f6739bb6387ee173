"""Backend selection for the simulation kernels.

The compiled extension is used when it imports; setting ``SJRP_FORCE_PYTHON=1``
selects the numpy fallback regardless. ``BACKEND`` names the active one.
"""
import os

from . import _kernels_py

if os.environ.get("SJRP_FORCE_PYTHON", "").strip() not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

BACKENDS = {"python": _kernels_py}
if BACKEND == "cython":
    BACKENDS["cython"] = _impl
else:
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
        BACKENDS["cython"] = _compiled
    except ImportError:
        pass

simulate_rs = _impl.simulate_rs
simulate_qs = _impl.simulate_qs
simulate_can_order = _impl.simulate_can_order
simulate_table = _impl.simulate_table


def get_backend(name=None):
    """Kernel module by name (``None`` for the active one)."""
    if name is None:
        return _impl
    if name not in BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(BACKENDS)}")
    return BACKENDS[name]
