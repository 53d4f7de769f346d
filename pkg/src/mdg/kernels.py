"""Hot-kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``MDG_PURE_PYTHON=1`` to force the numpy path.
"""
from __future__ import annotations

import os

from mdg import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("MDG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from mdg import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

rollout_forward = _impl.rollout_forward
rollout_backward = _impl.rollout_backward
obb_overlap_frames = _impl.obb_overlap_frames


def backends() -> dict:
    """All importable kernel implementations, keyed by name."""
    found = {"python": _kernels_py}
    try:
        from mdg import _kernels as compiled  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        found["cython"] = compiled
    return found
