"""Kernel backend selection.

The compiled backend (``_fast``) is preferred when the extension built;
otherwise the pure-Python reference (``_pure``) is used. Both produce
bit-identical results, so the choice only affects speed. Set
``ARGSCORE_PURE=1`` to force the pure backend.
"""

import os

from . import _pure

if os.environ.get("ARGSCORE_PURE") == "1":
    kernels = _pure
else:
    try:
        from . import _fast as kernels  # type: ignore[no-redef]
    except ImportError:
        kernels = _pure

BACKEND = kernels.BACKEND


def backends():
    """Return the available backend modules keyed by name."""
    out = {"pure": _pure}
    try:
        from . import _fast

        out["fast"] = _fast
    except ImportError:
        pass
    return out
