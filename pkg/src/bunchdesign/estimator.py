"""Composition of the boundary fits and the deconvolution into effects.

The pieces assembled here: the sign of selection from the boundary outcome
discontinuity, the marginal effect at the bunch point, treatment-effect
extrapolation away from it, pairs-bootstrap uncertainty, and the three
control-variable strategies (discrete stratification, continuous kernel
weighting, clustering of mixed controls into strata).

Everything is pure given its inputs.  Bootstrap replicates derive their
random state from ``(seed, replicate_index)``, so the replicate vector does
not depend on execution order or worker count.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np

from .data import (
    AmeEstimate,
    AttEstimate,
    ControlKind,
    DegenerateCaseError,
    EstimationConfig,
    InputError,
    NoiseModel,
    Sample,
    UnreliableInferenceError,
)
from .deconv import (
    CfEvaluation,
    _degenerate_tolerance,
    _uniform_grid,
    cf_evaluation,
    invert_cf,
    selection_density,
    selection_density_normal_plugin,
)
from ._fast import phase_sums
from .kernels import KernelKind, kernel_eval, kernel_ft
from .smoothers import (
    boundary_density,
    boundary_mean_and_slope,
    boundary_variance,
    interior_mean,
    intercept_weights,
    local_linear,
)
from .tuning import resolve_config

__all__ = [
    "ThetaResult",
    "StrataAssignment",
    "BootstrapResult",
    "theta",
    "ame",
    "att",
    "att_curve",
    "bootstrap",
    "stratified_ame",
    "strata_from_labels",
    "kernel_weighted_ame",
    "cluster_controls",
]

_MAX_FAILED_SHARE = 0.10
_CLUSTER_RETRIES = 3
# Per-replicate phase matrices are float32; past this budget (bytes) the
# bootstrap falls back to physically rebuilt samples.
_FAST_BOOT_BYTES = 400e6


@dataclass(frozen=True)
class ThetaResult:
    """Sign of selection from the boundary outcome discontinuity.

    ``theta`` is 0 exactly when ``|gap| <= tolerance_used``, otherwise the
    sign of the gap.
    """

    gap: float
    theta: int
    tolerance_used: float


@dataclass(frozen=True)
class StrataAssignment:
    """Row labels plus bunching-conditional stratum weights.

    ``weights[l]`` is the share of bunched observations carrying label ``l``
    (computed from bunched rows only), and ``kept`` lists the labels with
    positive weight in ascending order; their weights sum to one when every
    bunched row is covered.
    """

    labels: np.ndarray
    weights: dict[int, float]
    kept: tuple[int, ...]

    def __post_init__(self):
        labels = np.ascontiguousarray(np.asarray(self.labels))
        if labels.ndim != 1:
            raise InputError("stratum labels must be a one-dimensional vector")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "kept", tuple(int(k) for k in self.kept))


@dataclass(frozen=True)
class BootstrapResult:
    """Successful replicate estimates with their spread and 95% interval."""

    se: float
    ci: tuple[float, float]
    replicates: np.ndarray
    n_failed: int

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.replicates, dtype=float))
        arr.setflags(write=False)
        object.__setattr__(self, "replicates", arr)
        object.__setattr__(self, "ci", (float(self.ci[0]), float(self.ci[1])))


def _as_config(config: EstimationConfig | None) -> EstimationConfig:
    return config if config is not None else EstimationConfig()


def _bunched_stats(sample: Sample, base_weights):
    """(bunch mass, bunched outcome mean) — weighted when weights are given."""
    bunched = sample.bunched_mask
    if base_weights is None:
        y_b = sample.outcome[bunched]
        return sample.n_bunched / sample.n, float(np.mean(y_b))
    w = np.asarray(base_weights, dtype=float)
    total = float(w.sum())
    wb = w[bunched]
    wb_total = float(wb.sum())
    if total <= 0 or wb_total <= 0:
        raise DegenerateCaseError("zero weighted bunched mass")
    if float(w[~bunched].sum()) <= 0:
        raise DegenerateCaseError("zero weighted mass above the bunch point")
    mean = float(np.sum(wb * sample.outcome[bunched]) / wb_total)
    return wb_total / total, mean


def _theta_tolerance(sample: Sample, resolved: EstimationConfig) -> float:
    """Fixed tolerance, or z * bootstrap-SE of the gap when the flag is set."""
    if resolved.theta_se_z is None:
        return float(resolved.theta_tolerance)
    return resolved.theta_se_z * _gap_bootstrap_se(sample, resolved)


def _gap_bootstrap_se(sample: Sample, resolved: EstimationConfig) -> float:
    """Pairs-bootstrap standard error of the boundary discontinuity.

    Only the bunched rows and the rows with positive boundary-kernel weight
    can move the gap, so each replicate reduces to count-weighted sums over
    those rows.
    """
    n = sample.n
    x = sample.treatment
    above = x > sample.bunch_point
    kernel1 = KernelKind(resolved.kernel1)
    kw = np.zeros(n)
    kw[above] = kernel_eval(kernel1, (x[above] - sample.bunch_point) / resolved.h1)
    idx_fit = np.nonzero(kw > 0)[0]
    if idx_fit.size < 2:
        raise DegenerateCaseError("too few observations in the boundary window")
    idx_b = np.nonzero(sample.bunched_mask)[0]
    x_fit = x[idx_fit]
    y_fit = sample.outcome[idx_fit]
    y_b = sample.outcome[idx_b]

    B = resolved.theta_se_replications
    gaps = []
    failed = 0
    for i in range(B):
        rng = np.random.default_rng((resolved.bootstrap.seed, i))
        counts = np.bincount(rng.integers(0, n, n), minlength=n).astype(float)
        cb = counts[idx_b]
        cb_total = cb.sum()
        if cb_total == 0:
            failed += 1
            continue
        try:
            fit = local_linear(
                x_fit,
                y_fit,
                sample.bunch_point,
                resolved.h1,
                kernel1,
                base_weights=counts[idx_fit],
            )
        except DegenerateCaseError:
            failed += 1
            continue
        gaps.append(fit.intercept - float(cb @ y_b) / cb_total)
    if failed > _MAX_FAILED_SHARE * B:
        raise UnreliableInferenceError(
            f"{failed}/{B} gap bootstrap replicates failed; cannot set a data-driven tolerance"
        )
    return float(np.std(np.asarray(gaps), ddof=1))


def theta(sample: Sample, config: EstimationConfig | None = None) -> ThetaResult:
    """Sign of the selection slope from the outcome discontinuity at the bunch point."""
    resolved = resolve_config(sample, _as_config(config))
    fit = boundary_mean_and_slope(sample, resolved.h1, resolved.kernel1)
    _, bunched_mean = _bunched_stats(sample, None)
    gap = fit.intercept - bunched_mean
    tolerance = _theta_tolerance(sample, resolved)
    value = 0 if abs(gap) <= tolerance else (1 if gap > 0 else -1)
    return ThetaResult(gap=float(gap), theta=value, tolerance_used=float(tolerance))


def _selection_value(sample, resolved, base_weights):
    if resolved.noise_model is NoiseModel.NORMAL_PLUGIN:
        if base_weights is not None:
            raise InputError(
                "the normal-plugin noise model does not support observation weights"
            )
        sigma2 = boundary_variance(sample, resolved.h1, 2.0 * resolved.h1, resolved.kernel1)
        return selection_density_normal_plugin(sample, sigma2, resolved.h4, resolved)
    if base_weights is None:
        return selection_density(sample, resolved)
    cfe = cf_evaluation(sample, resolved, base_weights=base_weights)
    above = sample.treatment > sample.bunch_point
    _, ess = intercept_weights(
        sample.treatment,
        sample.bunch_point,
        resolved.h3,
        resolved.kernel3,
        filter=above,
        base_weights=base_weights,
    )
    wb = np.asarray(base_weights, dtype=float)[sample.bunched_mask]
    kish = float(wb.sum()) ** 2 / float(np.sum(wb * wb))
    tol = _degenerate_tolerance(kish, ess)
    return invert_cf(
        cfe,
        resolved.quadrature.floor,
        excluded_mass_warn=resolved.quadrature.excluded_mass_warn,
        degenerate_tol=tol,
    )


def _ame_resolved(
    sample: Sample,
    resolved: EstimationConfig,
    base_weights=None,
    theta_tolerance: float | None = None,
) -> AmeEstimate:
    """One pass of the full pipeline with already-resolved tuning."""
    fit = boundary_mean_and_slope(
        sample, resolved.h1, resolved.kernel1, base_weights=base_weights
    )
    bunch_mass, bunched_mean = _bunched_stats(sample, base_weights)
    gap = float(fit.intercept - bunched_mean)
    if theta_tolerance is None:
        theta_tolerance = _theta_tolerance(sample, resolved)
    theta_value = 0 if abs(gap) <= theta_tolerance else (1 if gap > 0 else -1)
    dens = boundary_density(sample, resolved.h2, resolved.kernel2, base_weights=base_weights)
    diagnostics = {
        "effective_n_boundary": fit.effective_n,
        "boundary_log_slope": dens.log_slope,
        "theta_tolerance": float(theta_tolerance),
    }
    if theta_value == 0:
        return AmeEstimate(
            ame=fit.slope,
            m_slope=fit.slope,
            theta=0,
            gap=gap,
            f_x_boundary=dens.density,
            bunch_mass=bunch_mass,
            s_prime=0.0,
            selection_density_at_zero=None,
            diagnostics=diagnostics,
        )
    try:
        sel = _selection_value(sample, resolved, base_weights)
    except DegenerateCaseError as err:
        raise DegenerateCaseError(
            f"theta={theta_value:+d} from gap {gap:.4g}, but the selection "
            f"density is unavailable: {err}"
        ) from err
    s_prime = theta_value * (dens.density / bunch_mass) / sel.value_at_zero
    diagnostics.update(
        selection_log_derivative=sel.log_derivative_at_zero,
        excluded_mass=sel.excluded_mass,
    )
    return AmeEstimate(
        ame=fit.slope - s_prime,
        m_slope=fit.slope,
        theta=theta_value,
        gap=gap,
        f_x_boundary=dens.density,
        bunch_mass=bunch_mass,
        s_prime=s_prime,
        selection_density_at_zero=sel.value_at_zero,
        diagnostics=diagnostics,
    )


def ame(sample: Sample, config: EstimationConfig | None = None) -> AmeEstimate:
    """Marginal effect of the treatment at the bunch point.

    The slope of the boundary outcome regression, minus the implied selection
    slope theta * (f_X(xbar+)/F_X(xbar)) / f_s(0) whenever the discontinuity
    test finds selection.  With ``config.bootstrap.replications > 0`` a pairs
    bootstrap attaches ``se`` and a 95% percentile ``ci``; tuning is resolved
    once on the original sample and reused by every replicate.
    """
    resolved = resolve_config(sample, _as_config(config))
    tolerance = _theta_tolerance(sample, resolved)
    estimate = _ame_resolved(sample, resolved, theta_tolerance=tolerance)
    B = resolved.bootstrap.replications
    if B > 0:
        boot = _ame_bootstrap(sample, resolved, B, resolved.bootstrap.seed, tolerance)
        diagnostics = dict(estimate.diagnostics or {})
        diagnostics["bootstrap_failed"] = boot.n_failed
        estimate = dataclasses.replace(
            estimate, se=boot.se, ci=boot.ci, diagnostics=diagnostics
        )
    return estimate


# ---------------------------------------------------------------------------
# extrapolated treatment effects


def att(
    sample: Sample,
    x: float,
    degree: int = 1,
    config: EstimationConfig | None = None,
) -> AttEstimate:
    """Treatment effect on the treated at level ``x``, extrapolated from the bunch point."""
    estimate = att_curve(sample, [x], degree, config)[0]
    resolved = resolve_config(sample, _as_config(config))
    B = resolved.bootstrap.replications
    if B > 0:
        tolerance = _theta_tolerance(sample, resolved)

        def replicate_value(rep: Sample) -> float:
            return _att_values(rep, [float(x)], degree, resolved, tolerance)[0][0]

        boot = bootstrap(sample, replicate_value, B, resolved.bootstrap.seed)
        estimate = dataclasses.replace(estimate, se=boot.se, ci=boot.ci)
    return estimate


def att_curve(
    sample: Sample,
    xs,
    degree: int = 1,
    config: EstimationConfig | None = None,
) -> tuple[AttEstimate, ...]:
    """ATT at each level in ``xs``, sharing one pass of the component fits."""
    resolved = resolve_config(sample, _as_config(config))
    tolerance = _theta_tolerance(sample, resolved)
    values = _att_values(sample, [float(v) for v in xs], degree, resolved, tolerance)
    return tuple(
        AttEstimate(x=float(x), degree=degree, att=a, m_at_x=m, correction_terms=terms)
        for x, (a, m, terms) in zip(xs, values)
    )


def _att_values(sample, xs, degree, resolved, theta_tolerance):
    if degree not in (1, 2):
        raise InputError("att degree must be 1 or 2")
    xbar = sample.bunch_point
    if any(x < xbar for x in xs):
        raise InputError("att is defined at or above the bunch point")
    fit = boundary_mean_and_slope(sample, resolved.h1, resolved.kernel1)
    bunch_mass, bunched_mean = _bunched_stats(sample, None)
    gap = float(fit.intercept - bunched_mean)
    theta_value = 0 if abs(gap) <= theta_tolerance else (1 if gap > 0 else -1)
    s_prime = 0.0
    curvature = 0.0
    if theta_value != 0:
        dens = boundary_density(sample, resolved.h2, resolved.kernel2)
        try:
            sel = _selection_value(sample, resolved, None)
        except DegenerateCaseError as err:
            raise DegenerateCaseError(
                f"theta={theta_value:+d} from gap {gap:.4g}, but the selection "
                f"density is unavailable: {err}"
            ) from err
        s_prime = theta_value * (dens.density / bunch_mass) / sel.value_at_zero
        if degree == 2:
            # Implied selection curvature s''(xbar+) = s' L_X + s'^2 * D_s with
            # L_X the boundary log-density slope and D_s the (sign-flipped)
            # selection log-derivative reported by the deconvolution.
            curvature = s_prime * dens.log_slope + s_prime**2 * sel.log_derivative_at_zero
    out = []
    for x in xs:
        if x == xbar:
            out.append((0.0, 0.0, (0.0,) * degree))
            continue
        m_at_x = interior_mean(sample, x, resolved.h1, resolved.kernel1).intercept - fit.intercept
        d = x - xbar
        terms = (float(s_prime * d),)
        if degree == 2:
            terms = (float(s_prime * d), float(0.5 * curvature * d * d))
        out.append((float(m_at_x - sum(terms)), float(m_at_x), terms))
    return out


# ---------------------------------------------------------------------------
# bootstrap


def _resample(sample: Sample, idx) -> Sample:
    return Sample(
        treatment=sample.treatment[idx],
        outcome=sample.outcome[idx],
        bunch_point=sample.bunch_point,
        controls=None if sample.controls is None else sample.controls[idx],
        control_kinds=sample.control_kinds,
    )


def bootstrap(sample: Sample, target, replications: int, seed: int) -> BootstrapResult:
    """Pairs bootstrap of an arbitrary scalar statistic.

    Rows (treatment, outcome, controls) are resampled with replacement, the
    replicate random state is derived from ``(seed, replicate_index)``, and
    replicates on which ``target`` raises an input or degeneracy error are
    dropped and counted.  More than 10% dropped replicates abort inference.
    """
    if replications < 2:
        raise InputError("bootstrap needs at least 2 replications")
    n = sample.n
    values = []
    failed = 0
    for i in range(replications):
        rng = np.random.default_rng((seed, i))
        idx = rng.integers(0, n, n)
        try:
            values.append(float(target(_resample(sample, idx))))
        except (InputError, DegenerateCaseError):
            failed += 1
    if failed > _MAX_FAILED_SHARE * replications:
        raise UnreliableInferenceError(
            f"{failed} of {replications} bootstrap replicates failed; "
            "inference on this sample is unreliable"
        )
    return _summarize_replicates(values, failed)


def _summarize_replicates(values, failed) -> BootstrapResult:
    arr = np.asarray(values, dtype=float)
    lo, hi = np.percentile(arr, [2.5, 97.5])
    return BootstrapResult(
        se=float(np.std(arr, ddof=1)),
        ci=(float(lo), float(hi)),
        replicates=arr,
        n_failed=failed,
    )


def _ame_bootstrap(sample, resolved, replications, seed, theta_tolerance) -> BootstrapResult:
    """Bootstrap of ame with a precomputed-phase fast path.

    A pairs resample is equivalent to weighting the original rows by their
    multiplicity, so each replicate re-runs the smoothers with count weights
    and evaluates the bunched characteristic function as a matrix-vector
    product against phases precomputed on the frequency nodes the
    regularizer keeps.  Falls back to physically rebuilt samples when the
    phase matrix would be too large or the noise model is parametric.
    """
    if replications < 2:
        raise InputError("bootstrap needs at least 2 replications")
    xi, step = _uniform_grid(resolved)
    reg = kernel_ft(resolved.kernel4, resolved.h4 * xi)
    nz = np.nonzero(reg)[0]
    last = int(nz[-1]) if nz.size else 0
    n_kept = last + 1
    idx_b = np.nonzero(sample.bunched_mask)[0]
    fast = (
        resolved.noise_model is NoiseModel.NONPARAMETRIC
        and 2 * 4 * idx_b.size * n_kept <= _FAST_BOOT_BYTES
    )
    if not fast:
        def replicate_value(rep: Sample) -> float:
            return _ame_resolved(rep, resolved, theta_tolerance=theta_tolerance).ame

        return bootstrap(sample, replicate_value, replications, seed)

    n = sample.n
    y_b = sample.outcome[idx_b]
    cos_m, sin_m = _phase_matrix(y_b, xi[:n_kept])
    above = sample.treatment > sample.bunch_point
    xi_pad = np.arange(n_kept + 1) * step
    reg_pad = np.concatenate([reg[:n_kept], [0.0]])

    values = []
    failed = 0
    for i in range(replications):
        rng = np.random.default_rng((seed, i))
        counts = np.bincount(rng.integers(0, n, n), minlength=n).astype(float)
        try:
            values.append(
                _ame_from_counts(
                    sample,
                    resolved,
                    counts,
                    theta_tolerance,
                    idx_b,
                    above,
                    cos_m,
                    sin_m,
                    xi_pad,
                    reg_pad,
                    step,
                    n_kept,
                )
            )
        except (InputError, DegenerateCaseError):
            failed += 1
    if failed > _MAX_FAILED_SHARE * replications:
        raise UnreliableInferenceError(
            f"{failed} of {replications} bootstrap replicates failed; "
            "inference on this sample is unreliable"
        )
    return _summarize_replicates(values, failed)


def _phase_matrix(values, xi):
    """cos/sin of values x frequencies as float32, built in row chunks."""
    cos_m = np.empty((values.size, xi.size), dtype=np.float32)
    sin_m = np.empty((values.size, xi.size), dtype=np.float32)
    chunk = max(1, int(8e6 / max(xi.size, 1)))
    for start in range(0, values.size, chunk):
        phases = np.outer(values[start : start + chunk], xi)
        np.cos(phases, out=phases)
        cos_m[start : start + chunk] = phases
        phases = np.outer(values[start : start + chunk], xi)
        np.sin(phases, out=phases)
        sin_m[start : start + chunk] = phases
    return cos_m, sin_m


def _ame_from_counts(
    sample,
    resolved,
    counts,
    theta_tolerance,
    idx_b,
    above,
    cos_m,
    sin_m,
    xi_pad,
    reg_pad,
    step,
    n_kept,
) -> float:
    cb = counts[idx_b]
    cb_total = float(cb.sum())
    if cb_total == 0:
        raise DegenerateCaseError("replicate has no bunched rows")
    fit = boundary_mean_and_slope(sample, resolved.h1, resolved.kernel1, base_weights=counts)
    bunched_mean = float(cb @ sample.outcome[idx_b]) / cb_total
    gap = fit.intercept - bunched_mean
    theta_value = 0 if abs(gap) <= theta_tolerance else (1 if gap > 0 else -1)
    if theta_value == 0:
        return float(fit.slope)
    dens = boundary_density(sample, resolved.h2, resolved.kernel2, base_weights=counts)
    bunch_mass = cb_total / sample.n

    wb = (cb / cb_total).astype(np.float32)
    num = np.empty(n_kept + 1, dtype=complex)
    num[:n_kept] = (wb @ cos_m).astype(float) + 1j * (wb @ sin_m).astype(float)
    num[0] = 1.0
    num[n_kept] = 1.0
    l_weights, ess = intercept_weights(
        sample.treatment,
        sample.bunch_point,
        resolved.h3,
        resolved.kernel3,
        filter=above,
        base_weights=counts,
    )
    nz = l_weights != 0.0
    den_kept, _ = phase_sums(
        sample.outcome[nz], l_weights[nz], None, 0.0, step, n_kept
    )
    den = np.empty(n_kept + 1, dtype=complex)
    den[:n_kept] = den_kept
    den[0] = 1.0
    den[n_kept] = 1.0
    cfe = CfEvaluation(
        xi_grid=xi_pad, numerator=num, denominator=den, regularizer=reg_pad
    )
    sel = invert_cf(
        cfe,
        resolved.quadrature.floor,
        excluded_mass_warn=resolved.quadrature.excluded_mass_warn,
        degenerate_tol=_degenerate_tolerance(cb_total, ess),
    )
    s_prime = theta_value * (dens.density / bunch_mass) / sel.value_at_zero
    return float(fit.slope - s_prime)


# ---------------------------------------------------------------------------
# controls


def strata_from_labels(sample: Sample, labels) -> StrataAssignment:
    """Assignment from per-row integer labels; weights from bunched rows only."""
    arr = np.asarray(labels)
    if arr.shape != (sample.n,):
        raise InputError("one stratum label per observation is required")
    as_int = np.round(arr.astype(float)).astype(int)
    if np.max(np.abs(arr.astype(float) - as_int)) > 1e-9:
        raise InputError("stratum labels must be integer-valued")
    sample.require_estimable()
    bunched_labels = as_int[sample.bunched_mask]
    weights = {}
    for label in np.unique(as_int):
        weights[int(label)] = float(np.mean(bunched_labels == label))
    kept = tuple(sorted(label for label, w in weights.items() if w > 0))
    return StrataAssignment(labels=as_int, weights=weights, kept=kept)


def stratified_ame(
    sample: Sample,
    strata: StrataAssignment,
    config: EstimationConfig | None = None,
) -> AmeEstimate:
    """Bunching-weighted aggregate of per-stratum marginal effects.

    Tuning is resolved once on the pooled sample and reused in every stratum.
    Strata whose pipeline degenerates are dropped with a warning and the
    weights renormalized over the survivors; no bootstrap is run here
    (resample externally with a closure that rebuilds the assignment).
    """
    if strata.labels.shape != (sample.n,):
        raise InputError("stratum labels are not aligned with the sample")
    resolved = resolve_config(sample, _as_config(config))
    per_stratum: dict[int, AmeEstimate] = {}
    for label in strata.kept:
        mask = strata.labels == label
        sub = Sample(
            treatment=sample.treatment[mask],
            outcome=sample.outcome[mask],
            bunch_point=sample.bunch_point,
            controls=None if sample.controls is None else sample.controls[mask],
            control_kinds=sample.control_kinds,
        )
        try:
            per_stratum[label] = _ame_resolved(sub, resolved)
        except (InputError, DegenerateCaseError) as err:
            warnings.warn(f"stratum {label} dropped: {err}", stacklevel=2)
    if not per_stratum:
        raise DegenerateCaseError("no stratum supports the estimation pipeline")
    total = sum(strata.weights[label] for label in per_stratum)

    def aggregate(take):
        return float(
            sum(strata.weights[label] * take(est) for label, est in per_stratum.items())
            / total
        )

    thetas = {est.theta for est in per_stratum.values()}
    gap = aggregate(lambda e: e.gap)
    if len(thetas) == 1:
        theta_value = thetas.pop()
    else:
        theta_value = 0 if gap == 0 else (1 if gap > 0 else -1)
    return AmeEstimate(
        ame=aggregate(lambda e: e.ame),
        m_slope=aggregate(lambda e: e.m_slope),
        theta=theta_value,
        gap=gap,
        f_x_boundary=aggregate(lambda e: e.f_x_boundary),
        bunch_mass=aggregate(lambda e: e.bunch_mass),
        s_prime=aggregate(lambda e: e.s_prime),
        selection_density_at_zero=None,
        diagnostics={
            "stratum_ame": {label: est.ame for label, est in per_stratum.items()},
            "stratum_weight": {label: strata.weights[label] for label in per_stratum},
            "strata_dropped": sorted(set(strata.kept) - set(per_stratum)),
        },
    )


def _product_weights(controls, z0, bandwidths, kernels) -> np.ndarray:
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    n_cols = controls.shape[1]
    if z0.size != n_cols:
        raise InputError(f"z0 must give one value per control column ({n_cols})")
    bw = np.atleast_1d(np.asarray(bandwidths, dtype=float))
    if bw.size == 1:
        bw = np.repeat(bw, n_cols)
    if bw.size != n_cols or np.any(bw <= 0):
        raise InputError("control bandwidths must be positive, one per column")
    if isinstance(kernels, (str, KernelKind)):
        kernels = [KernelKind(kernels)] * n_cols
    else:
        kernels = [KernelKind(k) for k in kernels]
        if len(kernels) != n_cols:
            raise InputError("one kernel per control column is required")
    weights = np.ones(controls.shape[0])
    for m in range(n_cols):
        weights *= kernel_eval(kernels[m], (controls[:, m] - z0[m]) / bw[m])
    total = float(weights.sum())
    if total <= 0:
        raise DegenerateCaseError("zero weighted mass at the requested control point")
    return weights / total


def kernel_weighted_ame(
    sample: Sample,
    z0,
    bandwidths,
    kernels=KernelKind.GAUSSIAN,
    config: EstimationConfig | None = None,
) -> AmeEstimate:
    """Marginal effect local to ``z0`` in continuous control space.

    Every pipeline stage is re-run with product-kernel observation weights
    (normalized to sum one); tuning parameters are resolved on the unweighted
    sample.  With bootstrap replications configured, replicates recompute
    their weights from the resampled control rows.
    """
    if sample.controls is None:
        raise InputError("kernel weighting needs control columns")
    if any(kind is not ControlKind.CONTINUOUS for kind in sample.control_kinds):
        raise InputError("kernel weighting supports continuous control columns only")
    weights = _product_weights(sample.controls, z0, bandwidths, kernels)
    resolved = resolve_config(sample, _as_config(config))
    tolerance = _theta_tolerance(sample, resolved)
    estimate = _ame_resolved(sample, resolved, base_weights=weights, theta_tolerance=tolerance)
    B = resolved.bootstrap.replications
    if B > 0:
        def replicate_value(rep: Sample) -> float:
            w = _product_weights(rep.controls, z0, bandwidths, kernels)
            return _ame_resolved(
                rep, resolved, base_weights=w, theta_tolerance=tolerance
            ).ame

        boot = bootstrap(sample, replicate_value, B, resolved.bootstrap.seed)
        diagnostics = dict(estimate.diagnostics or {})
        diagnostics["bootstrap_failed"] = boot.n_failed
        estimate = dataclasses.replace(
            estimate, se=boot.se, ci=boot.ci, diagnostics=diagnostics
        )
    return estimate


def cluster_controls(sample: Sample, n_clusters: int, seed: int) -> StrataAssignment:
    """Cluster mixed controls into strata for :func:`stratified_ame`.

    Continuous columns are standardized to unit spread and discrete columns
    one-hot encoded with a 1/sqrt(2) scale, so a category mismatch and a
    one-spread continuous gap contribute comparably to the distance.  Uses
    centroid clustering with a fixed seed and iteration cap; if a cluster
    comes back empty the seed is bumped a few times before giving up.
    """
    if sample.controls is None:
        raise InputError("clustering needs control columns")
    if n_clusters < 1:
        raise InputError("cluster count must be at least 1")
    if sample.n < n_clusters:
        raise InputError("cannot form more clusters than observations")
    columns = []
    for m, kind in enumerate(sample.control_kinds):
        col = sample.controls[:, m]
        if kind is ControlKind.CONTINUOUS:
            sd = float(np.std(col))
            columns.append((col - float(np.mean(col))) / sd if sd > 0 else np.zeros_like(col))
        else:
            for level in np.unique(col):
                columns.append((col == level).astype(float) / np.sqrt(2.0))
    features = np.column_stack(columns)

    from sklearn.cluster import KMeans

    for attempt in range(_CLUSTER_RETRIES + 1):
        km = KMeans(
            n_clusters=n_clusters,
            random_state=seed + attempt,
            n_init=10,
            max_iter=300,
        ).fit(features)
        labels = km.labels_.astype(int)
        if np.unique(labels).size == n_clusters:
            return strata_from_labels(sample, labels)
    raise DegenerateCaseError(
        f"clustering produced an empty stratum in {_CLUSTER_RETRIES + 1} attempts"
    )
