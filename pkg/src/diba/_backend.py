"""Kernel backend selection.

The compiled extension is used when importable. Setting ``DIBA_PURE_PYTHON=1``
forces the numpy fallback. Both produce identical results.
"""

from __future__ import annotations

import importlib
import os
from types import ModuleType

_FORCE_PY = os.environ.get("DIBA_PURE_PYTHON", "").strip().lower() not in ("", "0", "false", "no")


def load_backend(name: str | None = None) -> ModuleType:
    """Return the kernel module ``cython`` or ``python`` (default: best available)."""
    if name == "python":
        return importlib.import_module("diba._kernels_py")
    if name == "cython":
        return importlib.import_module("diba._kernels")
    if name is not None:
        raise ValueError(f"unknown backend {name!r}")
    if not _FORCE_PY:
        try:
            return importlib.import_module("diba._kernels")
        except ImportError:
            pass
    return importlib.import_module("diba._kernels_py")


kernels = load_backend()
BACKEND: str = kernels.BACKEND
