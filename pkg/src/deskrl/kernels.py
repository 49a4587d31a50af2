"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy twin.
Set ``DESKRL_PURE_PYTHON=1`` to force the fallback (inherited by child
processes, so a whole run agrees on one backend).
"""
from __future__ import annotations

import os

from . import _pykernels as python_backend

try:
    if os.environ.get("DESKRL_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend forced")
    from . import _ckernels as compiled_backend
except ImportError:
    compiled_backend = None

backend = compiled_backend if compiled_backend is not None else python_backend
BACKEND: str = backend.BACKEND
HAS_COMPILED = compiled_backend is not None


def get_backend(name: str | None = None):
    """Return a backend module by name ("compiled" / "python"), or the active one."""
    if name is None:
        return backend
    if name == "python":
        return python_backend
    if name == "compiled":
        if compiled_backend is None:
            raise ImportError("compiled kernels are not built")
        return compiled_backend
    raise ValueError(f"unknown kernel backend {name!r}")
