"""Pure-numpy fallback for the phase-sum kernels.

Chunks the observation axis so the n-by-m phase matrix never exceeds a fixed
memory budget.
"""

from __future__ import annotations

import numpy as np

_CHUNK_ELEMENTS = 8_000_000


def phase_sums(y, w0, w1, xi0, dxi, m):
    """Return S_k[j] = sum_i w_k[i] * exp(1j*(xi0 + j*dxi)*y[i])."""
    y = np.asarray(y, dtype=float)
    w0 = np.asarray(w0, dtype=float)
    xi = xi0 + dxi * np.arange(m)
    s0 = np.zeros(m, dtype=complex)
    s1 = np.zeros(m, dtype=complex) if w1 is not None else None
    chunk = max(1024, _CHUNK_ELEMENTS // max(m, 1))
    for start in range(0, y.size, chunk):
        stop = min(start + chunk, y.size)
        phases = np.exp(1j * np.outer(y[start:stop], xi))
        s0 += w0[start:stop] @ phases
        if w1 is not None:
            s1 += np.asarray(w1[start:stop], dtype=float) @ phases
    return s0, s1
