"""Boundary-aware smoothers: local-linear regression and boundary density.

All fits are one-sided by construction: the outcome regressions use only
observations strictly above the bunch point, and the density estimator
corrects the one-sided kernel window with a tilted half-kernel mass so the
boundary value is estimated without the usual edge bias.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import DegenerateCaseError, InputError, Sample
from .kernels import KernelKind, kernel_eval, one_sided_exp_moment

__all__ = [
    "LocalLinearFit",
    "BoundaryDensity",
    "local_linear",
    "intercept_weights",
    "boundary_mean_and_slope",
    "interior_mean",
    "boundary_log_slope",
    "boundary_density",
    "pinkse_bandwidth",
    "boundary_variance",
]


@dataclass(frozen=True)
class LocalLinearFit:
    """Weighted local-linear fit evaluated at ``x0``.

    ``effective_n`` counts observations carrying positive weight.
    """

    intercept: float
    slope: float
    effective_n: int
    x0: float


@dataclass(frozen=True)
class BoundaryDensity:
    """Boundary density estimate with its local log-slope.

    ``density_derivative`` is ``density * log_slope`` by construction.
    """

    log_slope: float
    density: float
    density_derivative: float


def _weights_and_mask(xs, x0, h, kernel, filter, base_weights):
    xs = np.asarray(xs, dtype=float)
    if not h > 0:
        raise InputError("bandwidth must be positive")
    u = (xs - x0) / h
    w = kernel_eval(kernel, u)
    if filter is not None:
        w = np.where(np.asarray(filter, dtype=bool), w, 0.0)
    if base_weights is not None:
        w = w * np.asarray(base_weights, dtype=float)
    return xs, u, w


def _solve_local_linear(u, w, ys, h):
    """Solve the 2x2 weighted normal equations in the scaled coordinate u."""
    s0 = float(np.sum(w))
    s1 = float(np.dot(w, u))
    wu = w * u
    s2 = float(np.dot(wu, u))
    t0 = float(np.dot(w, ys))
    t1 = float(np.dot(wu, ys))
    det = s0 * s2 - s1 * s1
    if det <= 0 or not np.isfinite(det):
        raise DegenerateCaseError(
            "local-linear fit needs at least two distinct weighted points"
        )
    intercept = (s2 * t0 - s1 * t1) / det
    slope_scaled = (s0 * t1 - s1 * t0) / det
    return intercept, slope_scaled / h


def local_linear(xs, ys, x0, h, kernel=KernelKind.TRIANGULAR, filter=None, *, base_weights=None) -> LocalLinearFit:
    """Local-linear fit of ``ys`` on ``xs`` at ``x0`` with bandwidth ``h``.

    ``filter`` (boolean mask) zeroes weights outside a subsample;
    ``base_weights`` multiplies the kernel weights observation-wise.  Exactly
    affine data is reproduced to near machine precision.  Raises
    :class:`DegenerateCaseError` when fewer than two distinct points carry
    weight.
    """
    xs, u, w = _weights_and_mask(xs, x0, h, kernel, filter, base_weights)
    ys = np.asarray(ys, dtype=float)
    if ys.shape != xs.shape:
        raise InputError("xs and ys must have matching shapes")
    pos = w > 0
    ess = int(np.count_nonzero(pos))
    if ess < 2 or np.min(u[pos]) == np.max(u[pos]):
        raise DegenerateCaseError(
            "local-linear fit needs at least two distinct weighted points"
        )
    intercept, slope = _solve_local_linear(u, w, ys, h)
    return LocalLinearFit(intercept=intercept, slope=slope, effective_n=ess, x0=float(x0))


def intercept_weights(xs, x0, h, kernel=KernelKind.TRIANGULAR, filter=None, *, base_weights=None):
    """Linear-smoother weights l_i with intercept = sum_i l_i y_i.

    The local-linear intercept is response-independent, so any response
    (including complex exponentials) can be smoothed by one dot product with
    these weights.  Returns (weights, effective_n).
    """
    xs, u, w = _weights_and_mask(xs, x0, h, kernel, filter, base_weights)
    pos = w > 0
    ess = int(np.count_nonzero(pos))
    if ess < 2 or np.min(u[pos]) == np.max(u[pos]):
        raise DegenerateCaseError(
            "local-linear fit needs at least two distinct weighted points"
        )
    s0 = float(np.sum(w))
    s1 = float(np.dot(w, u))
    s2 = float(np.dot(w * u, u))
    det = s0 * s2 - s1 * s1
    if det <= 0 or not np.isfinite(det):
        raise DegenerateCaseError(
            "local-linear fit needs at least two distinct weighted points"
        )
    return w * (s2 - s1 * u) / det, ess


def boundary_mean_and_slope(sample: Sample, h1: float, kernel1=KernelKind.TRIANGULAR, *, base_weights=None) -> LocalLinearFit:
    """Boundary limit and slope of E[Y | X = x] from above-the-bunch data."""
    above = sample.treatment > sample.bunch_point
    return local_linear(
        sample.treatment,
        sample.outcome,
        sample.bunch_point,
        h1,
        kernel1,
        filter=above,
        base_weights=base_weights,
    )


def interior_mean(sample: Sample, x: float, h: float, kernel=KernelKind.TRIANGULAR, *, base_weights=None) -> LocalLinearFit:
    """Local-linear estimate of E[Y | X = x] at an interior x > bunch point."""
    if not x > sample.bunch_point:
        raise InputError("interior_mean requires x strictly above the bunch point")
    above = sample.treatment > sample.bunch_point
    return local_linear(
        sample.treatment,
        sample.outcome,
        x,
        h,
        kernel,
        filter=above,
        base_weights=base_weights,
    )


def boundary_log_slope(xs, xbar: float, h2: float, *, base_weights=None) -> float:
    """One-sided estimate of d/dx log f_X at the boundary.

    Uses the moment form
    ``-sum(1 - 2 d/h) / sum(d (1 - d/h))`` over 0 < d <= h2, d = X - x̄,
    which is exact for log-linear densities up to O((slope*h)^2).
    """
    xs = np.asarray(xs, dtype=float)
    if not h2 > 0:
        raise InputError("bandwidth must be positive")
    d = xs - xbar
    mask = (d > 0) & (d <= h2)
    if base_weights is None:
        bw = np.ones_like(d)
    else:
        bw = np.asarray(base_weights, dtype=float)
    if not np.any(mask & (bw > 0)):
        raise DegenerateCaseError("no observations inside the log-slope window")
    u = d[mask] / h2
    w = bw[mask]
    num = float(np.dot(w, 1.0 - 2.0 * u))
    den = float(np.dot(w, d[mask] * (1.0 - u)))
    if den <= 0:
        raise DegenerateCaseError("log-slope window has no interior mass")
    return -num / den


def boundary_density(sample: Sample, h2: float, kernel2=KernelKind.EPANECHNIKOV, *, base_weights=None) -> BoundaryDensity:
    """Boundary-corrected density estimate f_X(x̄⁺) with its log-slope.

    The one-sided kernel sum over X > x̄ is normalized by total sample size
    times the tilted half-kernel mass evaluated at the estimated log-slope,
    which removes the boundary truncation bias.  The divisor is the total n
    (bunched observations included): the estimand is the unconditional
    density limit.
    """
    kernel2 = KernelKind(kernel2)
    if kernel2 is KernelKind.SINC_FLAT:
        raise InputError("boundary_density requires a smoothing kernel")
    x = sample.treatment
    xbar = sample.bunch_point
    if base_weights is None:
        bw = np.ones_like(x)
    else:
        bw = np.asarray(base_weights, dtype=float)
    log_slope = boundary_log_slope(x, xbar, h2, base_weights=base_weights)
    d = x - xbar
    above = d > 0
    kern = kernel_eval(kernel2, d / h2)
    num = float(np.dot(bw[above], kern[above]))
    total = float(np.sum(bw))
    if total <= 0:
        raise DegenerateCaseError("no weighted observations")
    tilt = one_sided_exp_moment(kernel2, log_slope * h2)
    density = num / (total * h2 * tilt)
    return BoundaryDensity(
        log_slope=log_slope,
        density=density,
        density_derivative=density * log_slope,
    )


def pinkse_bandwidth(n_above: int, pilot_density: float, beta2: float) -> float:
    """Plug-in bandwidth (72 / (n f β₂²))^{1/5} for the boundary density."""
    if n_above <= 0 or pilot_density <= 0 or beta2 == 0:
        raise InputError("pinkse_bandwidth needs n_above > 0, pilot_density > 0, beta2 != 0")
    return float((72.0 / (n_above * pilot_density * beta2 * beta2)) ** 0.2)


def _stage_one_residuals(x_above, y_above, h_fit, kernel, need_mask, leave_one_out):
    """Squared stage-one residuals for the observations in ``need_mask``."""
    if leave_one_out:
        resid = np.full(x_above.size, np.nan)
        idx = np.flatnonzero(need_mask)
        for i in idx:
            xi = x_above[i]
            u = (x_above - xi) / h_fit
            w = kernel_eval(kernel, u)
            w[i] = 0.0
            pos = w > 0
            if np.count_nonzero(pos) < 2 or np.min(u[pos]) == np.max(u[pos]):
                continue
            intercept, _ = _solve_local_linear(u, w, y_above, h_fit)
            resid[i] = y_above[i] - intercept
        return resid
    lo = float(np.min(x_above[need_mask]))
    hi = float(np.max(x_above[need_mask]))
    if lo == hi:
        grid = np.array([lo])
    else:
        grid = np.linspace(lo, hi, 257)
    fitted = np.full(grid.size, np.nan)
    for j, g in enumerate(grid):
        u = (x_above - g) / h_fit
        w = kernel_eval(kernel, u)
        pos = w > 0
        if np.count_nonzero(pos) < 2 or np.min(u[pos]) == np.max(u[pos]):
            continue
        fitted[j], _ = _solve_local_linear(u, w, y_above, h_fit)
    ok = np.isfinite(fitted)
    if not np.any(ok):
        raise DegenerateCaseError("stage-one fit failed everywhere in the variance window")
    resid = np.full(x_above.size, np.nan)
    resid[need_mask] = y_above[need_mask] - np.interp(
        x_above[need_mask], grid[ok], fitted[ok]
    )
    return resid


def boundary_variance(
    sample: Sample,
    h_fit: float,
    h_var: float,
    kernel=KernelKind.TRIANGULAR,
    *,
    leave_one_out: bool = False,
    base_weights=None,
) -> float:
    """Two-stage estimate of Var(Y | X = x̄⁺).

    Stage one fits the conditional mean locally (in-sample predictions on a
    fine grid, or exact leave-one-out fits when ``leave_one_out`` is set);
    stage two runs a local-linear fit of the squared residuals at the
    boundary.  A negative stage-two intercept is floored at zero with a
    warning.
    """
    kernel = KernelKind(kernel)
    above = sample.treatment > sample.bunch_point
    x_above = sample.treatment[above]
    y_above = sample.outcome[above]
    if x_above.size < 2:
        raise DegenerateCaseError("boundary_variance needs at least two above-bunch points")
    bw_above = None if base_weights is None else np.asarray(base_weights, float)[above]
    # Only observations with stage-two weight matter; for compact kernels
    # that is the window (x̄, x̄ + h_var].
    d = x_above - sample.bunch_point
    if kernel is KernelKind.GAUSSIAN:
        need = np.ones_like(d, dtype=bool)
    else:
        need = d <= h_var
        if not np.any(need):
            raise DegenerateCaseError("no observations inside the variance window")
    resid = _stage_one_residuals(x_above, y_above, h_fit, kernel, need, leave_one_out)
    usable = np.isfinite(resid)
    fit = local_linear(
        x_above[usable],
        resid[usable] ** 2,
        sample.bunch_point,
        h_var,
        kernel,
        base_weights=None if bw_above is None else bw_above[usable],
    )
    if fit.intercept < 0:
        warnings.warn("negative boundary variance estimate floored at zero", stacklevel=2)
        return 0.0
    return float(fit.intercept)
