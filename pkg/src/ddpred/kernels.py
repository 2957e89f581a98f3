"""Hot-kernel dispatch.

The compiled ``_core`` extension is used when it was built; otherwise the
numpy implementations in ``_fallback`` are used. Setting
``DDPRED_PURE_PYTHON=1`` forces the fallback. ``BACKEND`` names the active
implementation.
"""
import os

from . import _fallback

if os.environ.get("DDPRED_PURE_PYTHON", "") not in ("", "0"):
    _compiled = None
else:
    try:
        from . import _core as _compiled
    except ImportError:
        _compiled = None

BACKEND = "python" if _compiled is None else "cython"
_impl = _fallback if _compiled is None else _compiled

sos_synthesize = _impl.sos_synthesize
adam_update = _impl.adam_update

__all__ = ["BACKEND", "sos_synthesize", "adam_update"]
