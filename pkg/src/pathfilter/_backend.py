"""Selects the kernel backend at import time.

The compiled extension is preferred; the numpy fallback has identical
contracts.  Set PATHFILTER_BACKEND=python to force the fallback (used by the
backend-comparison tests and the benchmark).
"""

from __future__ import annotations

import os

from . import _pykernels

_choice = os.environ.get("PATHFILTER_BACKEND", "auto")

if _choice not in ("auto", "native", "python"):
    raise ImportError(f"PATHFILTER_BACKEND must be auto|native|python, got {_choice!r}")

kernels = None
if _choice in ("auto", "native"):
    try:
        from . import _native as kernels  # type: ignore[no-redef]
    except ImportError:
        if _choice == "native":
            raise
        kernels = None
if kernels is None:
    kernels = _pykernels

BACKEND = kernels.NAME


def get_kernels(name: str | None = None):
    """Kernel module by name ('native'/'python'); default is the active one."""
    if name is None or name == BACKEND:
        return kernels
    if name == "python":
        return _pykernels
    if name == "native":
        from . import _native
        return _native
    raise ValueError(f"unknown backend {name!r}")


def available_backends() -> list[str]:
    names = ["python"]
    try:
        from . import _native  # noqa: F401
        names.insert(0, "native")
    except ImportError:
        pass
    return names
