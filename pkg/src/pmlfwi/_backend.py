"""Select the element-kernel implementation at import time.

The compiled extension ``pmlfwi._kernels`` is used when it can be imported;
otherwise the NumPy module ``pmlfwi._kernels_py`` is used. Setting the
environment variable ``PMLFWI_BACKEND=python`` forces the fallback.
"""

from __future__ import annotations

import logging
import os

log = logging.getLogger(__name__)

if os.environ.get("PMLFWI_BACKEND", "").lower() == "python":
    from pmlfwi import _kernels_py as kernels

    BACKEND = "python"
else:
    try:
        from pmlfwi import _kernels as kernels  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:  # pragma: no cover - depends on the build
        from pmlfwi import _kernels_py as kernels

        BACKEND = "python"
        log.debug("compiled kernels unavailable, using the NumPy fallback")

__all__ = ["BACKEND", "kernels"]
