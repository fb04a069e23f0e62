"""Kernel backend selection: compiled extension when available, numpy otherwise.

Set SERVOGRAPH_KERNELS=python or SERVOGRAPH_KERNELS=native to force a
backend (the benchmark uses this; native falls back with a warning when the
extension was not built).
"""

from __future__ import annotations

import os
import warnings

from . import numpy_impl

_forced = os.environ.get("SERVOGRAPH_KERNELS", "").strip().lower()

_impl = None
if _forced in ("python", "numpy"):
    _impl = numpy_impl
elif _forced in ("native", "compiled", ""):
    try:
        from . import _native as _impl  # type: ignore[no-redef]
    except ImportError:
        if _forced:
            warnings.warn("compiled kernels requested but not built; using numpy fallback")
        _impl = numpy_impl
else:
    warnings.warn(f"unknown SERVOGRAPH_KERNELS value {_forced!r}; using default selection")
    try:
        from . import _native as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = numpy_impl

bilinear_warp = _impl.bilinear_warp
patch_ssd_search = _impl.patch_ssd_search


def backend_name() -> str:
    return _impl.BACKEND_NAME


def available_backends() -> dict[str, object]:
    """Importable kernel modules by name (used by tests and the benchmark)."""
    out = {"numpy": numpy_impl}
    try:
        from . import _native

        out["native"] = _native
    except ImportError:
        pass
    return out
