"""Kernel backend selection.

The compiled Cython extension is used when it was built; otherwise the numpy
fallback takes over. Set FIELDSCHED_PURE=1 to force the fallback.
"""

import os

from . import _reference

if os.environ.get("FIELDSCHED_PURE", "") not in ("", "0"):
    _impl, BACKEND = _reference, "fallback"
else:
    try:
        from . import _gainkernel as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl, BACKEND = _reference, "fallback"

gain_sums = _impl.gain_sums


def get_backend(name):
    """Return a specific backend module ("compiled" or "fallback").

    Used by the benchmark and the cross-backend agreement tests; raises
    ImportError when the compiled extension is unavailable.
    """
    if name == "fallback":
        return _reference
    if name == "compiled":
        from . import _gainkernel
        return _gainkernel
    raise ValueError(f"unknown backend {name!r}")
