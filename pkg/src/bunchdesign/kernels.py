"""Kernel families shared by the smoothing and deconvolution layers.

Five kinds are supported: four nonnegative smoothing kernels (triangular,
epanechnikov, uniform, gaussian) and the signed band-limit kernel
``sinc_flat`` whose Fourier transform is the indicator of [-1, 1].  The
band-limit kernel only enters through its transform, as the deconvolution
regularizer; it is not a valid smoothing weight.
"""

from __future__ import annotations

from enum import Enum

import numpy as np
from scipy.integrate import quad
from scipy.special import ndtr

__all__ = ["KernelKind", "kernel_eval", "kernel_ft", "one_sided_exp_moment"]


class KernelKind(str, Enum):
    """Kernel family identifier (string-valued for configs and CLI flags)."""

    TRIANGULAR = "triangular"
    EPANECHNIKOV = "epanechnikov"
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"
    SINC_FLAT = "sinc_flat"


SMOOTHING_KINDS = (
    KernelKind.TRIANGULAR,
    KernelKind.EPANECHNIKOV,
    KernelKind.UNIFORM,
    KernelKind.GAUSSIAN,
)

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def _as_array(u):
    arr = np.asarray(u, dtype=float)
    return arr, arr.ndim == 0


def _finalize(out, scalar):
    return float(out) if scalar else out


def kernel_eval(kind: KernelKind, u):
    """Evaluate the kernel at ``u`` (scalar or array).

    All kernels are even; evaluation goes through ``abs(u)`` so evenness is
    exact in floating point.  The compact kernels vanish outside [-1, 1].
    """
    kind = KernelKind(kind)
    arr, scalar = _as_array(u)
    a = np.abs(arr)
    if kind is KernelKind.TRIANGULAR:
        out = np.maximum(1.0 - a, 0.0)
    elif kind is KernelKind.EPANECHNIKOV:
        out = np.where(a <= 1.0, 0.75 * (1.0 - a * a), 0.0)
    elif kind is KernelKind.UNIFORM:
        out = np.where(a <= 1.0, 0.5, 0.0)
    elif kind is KernelKind.GAUSSIAN:
        out = np.exp(-0.5 * a * a) / _SQRT_2PI
    else:  # sinc_flat: sin(u)/(pi u), equal to 1/pi at the origin
        out = np.sinc(a / np.pi) / np.pi
    return _finalize(out, scalar)


def kernel_ft(kind: KernelKind, t):
    """Fourier transform ``\\int k(u) e^{i t u} du`` of the kernel at ``t``.

    The transforms are real and even.  Closed forms are used throughout, with
    series branches where the closed form loses digits to cancellation near
    ``t = 0``.  The band-limit kernel transforms to the indicator of [-1, 1]
    (one-half exactly at the edges, the Dirichlet limit).
    """
    kind = KernelKind(kind)
    arr, scalar = _as_array(t)
    a = np.abs(arr)
    if kind is KernelKind.TRIANGULAR:
        # (sin(t/2) / (t/2))^2
        out = np.sinc(a / (2.0 * np.pi)) ** 2
    elif kind is KernelKind.EPANECHNIKOV:
        out = _epanechnikov_ft(a)
    elif kind is KernelKind.UNIFORM:
        out = np.sinc(a / np.pi)
    elif kind is KernelKind.GAUSSIAN:
        out = np.exp(-0.5 * a * a)
    else:
        out = np.select([a < 1.0, a == 1.0], [1.0, 0.5], default=0.0)
    return _finalize(out, scalar)


def _epanechnikov_ft(a):
    """3 (sin t - t cos t) / t^3 with a series branch for small ``t``."""
    a = np.atleast_1d(a)
    out = np.empty_like(a)
    small = a < 1e-2
    t2 = a[small] ** 2
    out[small] = 1.0 - t2 / 10.0 + t2 * t2 / 280.0
    t = a[~small]
    out[~small] = 3.0 * (np.sin(t) - t * np.cos(t)) / t**3
    return out if out.size > 1 else out.reshape(())


def one_sided_exp_moment(kind: KernelKind, t: float) -> float:
    """Tilted half-kernel mass ``\\int_0^b k(v) e^{t v} dv``.

    This is the normalizing denominator of the boundary density estimator,
    evaluated at ``t`` equal to the estimated log-slope times the bandwidth.
    The upper limit ``b`` is 1 for the compact kernels and infinity for the
    gaussian.  Closed forms: triangular ``(e^t - 1 - t)/t^2``, epanechnikov
    ``(3/4)(2 - t^2 + 2 e^t (t-1))/t^3``, uniform ``(e^t - 1)/(2t)``,
    gaussian ``e^{t^2/2} \\Phi(t)``; series branches guard the removable
    singularity at ``t = 0``.
    """
    kind = KernelKind(kind)
    if kind not in SMOOTHING_KINDS:
        raise ValueError(f"one_sided_exp_moment requires a smoothing kernel, got {kind.value!r}")
    t = float(t)
    if kind is KernelKind.EPANECHNIKOV:
        if abs(t) < 0.1:
            # 3/4 * sum_{j>=0} 2 t^j / (j! (j+1) (j+3)); the closed form below
            # cancels to O(t^3) and sheds ~10 digits for small t.
            return 0.75 * (
                2.0 / 3.0
                + t / 4.0
                + t**2 / 15.0
                + t**3 / 72.0
                + t**4 / 420.0
                + t**5 / 2880.0
                + t**6 / 22680.0
                + t**7 / 201600.0
            )
        return 0.75 * (2.0 - t * t + 2.0 * np.exp(t) * (t - 1.0)) / t**3
    if kind is KernelKind.TRIANGULAR:
        if abs(t) < 1e-2:
            # sum_{k>=2} t^(k-2)/k!
            return 0.5 + t / 6.0 + t**2 / 24.0 + t**3 / 120.0 + t**4 / 720.0
        return (np.expm1(t) - t) / (t * t)
    if kind is KernelKind.UNIFORM:
        if t == 0.0:
            return 0.5
        return 0.5 * np.expm1(t) / t
    if kind is KernelKind.GAUSSIAN:
        return float(np.exp(0.5 * t * t) * ndtr(t))
    # Unreachable, but keeps a generic escape hatch for future kinds.
    val, _ = quad(lambda v: kernel_eval(kind, v) * np.exp(t * v), 0.0, 1.0)
    return val
