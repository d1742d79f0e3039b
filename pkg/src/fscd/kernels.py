"""Kernel dispatch: compiled Cython core if importable, else pure Python.

Set ``FSCD_PURE_PYTHON=1`` before import to force the fallback.
"""
from __future__ import annotations

import os

from fscd import _kernels_py

_compiled = None
if os.environ.get("FSCD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from fscd import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py

BACKEND = "cython" if _compiled is not None else "python"

linear_assignment = _impl.linear_assignment
pairwise_iou_xyxy = _impl.pairwise_iou_xyxy
pairwise_giou_xyxy = _impl.pairwise_giou_xyxy
greedy_match = _impl.greedy_match


def backends() -> dict:
    """Every available implementation, keyed by name (used by tests and benchmarks)."""
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    else:
        try:
            from fscd import _kernels  # type: ignore[attr-defined]

            out["cython"] = _kernels
        except ImportError:
            pass
    return out
