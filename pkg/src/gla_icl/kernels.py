"""Backend selection for the sequential recurrences.

The compiled extension is used when it imports; set ``GLA_ICL_PURE_PYTHON=1``
to force the numpy fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

_forced = os.environ.get("GLA_ICL_PURE_PYTHON", "").strip() not in ("", "0")

if _forced:
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

gla_scan = _impl.gla_scan
lms_sq_errors = _impl.lms_sq_errors
rls_sq_errors = _impl.rls_sq_errors

__all__ = ["BACKEND", "gla_scan", "lms_sq_errors", "rls_sq_errors"]
