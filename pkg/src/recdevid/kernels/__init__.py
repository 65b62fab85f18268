"""Recurrent cell kernels, compiled when available.

The Cython extension ``_cell`` is used if it was built; otherwise (or when
``RECDEVID_KERNELS=python`` is set) the numpy implementation in
``_fallback`` is selected.  Both expose ``cell_forward`` and
``cell_backward`` with identical semantics.
"""
from __future__ import annotations

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("RECDEVID_KERNELS", "").lower() != "python":
    try:
        from . import _cell as _compiled
    except ImportError:  # extension not built
        _compiled = None
    else:
        _impl = _compiled
        BACKEND = "cython"
else:
    _compiled = None


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _compiled is not None else [])


def get_backend(name: str | None = None):
    """Return the kernel module for ``name`` (default: the selected one)."""
    if name is None:
        return _impl
    if name == "python":
        return _fallback
    if name == "cython" and _compiled is not None:
        return _compiled
    raise ValueError(f"kernel backend {name!r} is not available")


def use_backend(name: str) -> None:
    global _impl, BACKEND
    _impl = get_backend(name)
    BACKEND = name


def cell_forward(*args):
    return _impl.cell_forward(*args)


def cell_backward(*args):
    return _impl.cell_backward(*args)
