"""Dispatch between the compiled phase-sum core and the numpy fallback.

The compiled extension is optional: if it failed to build (or the
``BUNCHDESIGN_NO_EXT`` environment variable is set), the chunked numpy
implementation is used instead.  Both expose the same ``phase_sums``
signature and agree to floating-point recurrence accuracy.
"""

from __future__ import annotations

import os

if os.environ.get("BUNCHDESIGN_NO_EXT"):
    HAVE_EXT = False
else:
    try:
        from ._core import phase_sums as _ext_phase_sums

        HAVE_EXT = True
    except ImportError:
        HAVE_EXT = False

if HAVE_EXT:
    phase_sums = _ext_phase_sums
else:
    from ._ref import phase_sums  # noqa: F401

__all__ = ["phase_sums", "HAVE_EXT"]
