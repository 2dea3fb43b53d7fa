"""Backend selection: compiled kernels when available, numpy fallback otherwise.

The environment variable ``SPDECTRL_BACKEND`` forces a choice: ``c``,
``python``, or ``auto`` (default).  Requesting ``c`` without the compiled
extension raises at first use rather than silently degrading.
"""

from __future__ import annotations

import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # pragma: no cover - build-environment dependent
    _ckernels = None

__all__ = ["active_backend", "available_backends", "forward_tables"]


def available_backends() -> dict:
    return {"python": True, "c": _ckernels is not None}


def _resolve(name: str | None) -> str:
    choice = name or os.environ.get("SPDECTRL_BACKEND", "auto").lower()
    if choice == "auto":
        return "c" if _ckernels is not None else "python"
    if choice == "c":
        if _ckernels is None:
            raise RuntimeError("compiled backend requested but spdectrl._ckernels is not built")
        return "c"
    if choice == "python":
        return "python"
    raise ValueError(f"unknown backend {choice!r}")


def active_backend(name: str | None = None) -> str:
    return _resolve(name)


def forward_tables(*args, backend: str | None = None):
    mod = _ckernels if _resolve(backend) == "c" else _pykernels
    return mod.forward_tables(*args)
