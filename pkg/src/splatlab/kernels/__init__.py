"""Hot-kernel backend selection.

The compiled Cython extension is used when available; a pure numpy fallback
implements identical semantics. Set SPLATLAB_KERNELS=python (or =cython) to
force a backend, e.g. for the benchmark or for debugging.
"""

from __future__ import annotations

import os

from . import py_backend

_FORCED = os.environ.get("SPLATLAB_KERNELS", "").strip().lower()

_cy = None
if _FORCED != "python":
    try:
        from . import _cy_backend as _cy
    except ImportError:
        _cy = None
        if _FORCED == "cython":
            raise ImportError(
                "SPLATLAB_KERNELS=cython but the compiled backend is not built; "
                "run `pip install -e . --no-build-isolation`")

_active = _cy if _cy is not None else py_backend


def backend_name() -> str:
    return _active.BACKEND_NAME


def available_backends():
    names = ["python"]
    if _cy is not None:
        names.insert(0, "cython")
    return names


def get_backend(name: str = None):
    """Return the kernel module for `name` (default: the active backend)."""
    if name is None:
        return _active
    if name == "python":
        return py_backend
    if name == "cython":
        if _cy is None:
            raise ImportError("compiled backend not available")
        return _cy
    raise ValueError(f"unknown kernel backend {name!r}")


rasterize_forward = _active.rasterize_forward
rasterize_backward = _active.rasterize_backward
grid_min_dists = _active.grid_min_dists
