"""Data-driven resolution of unset tuning parameters.

Any bandwidth or grid width left as None in an :class:`EstimationConfig` is
filled from the sample here, once, so that every downstream stage (including
bootstrap replicates) works with the same concrete numbers.  The rules:

* h1, h3: normal-reference rule 1.06 * sd(X - x̄ | X > x̄) * n_above^{-1/5};
* h2: plug-in rule with a window-count pilot density and normal-reference
  log-curvature 1 / sd(X - x̄ | X > x̄)^2;
* h4: implied selection scale over 2.6, where the selection variance is the
  bunched outcome variance minus the boundary conditional variance (floored
  at (0.05 * sd)^2);
* grid half-width: 10 / IQR of the bunched outcomes.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .data import DegenerateCaseError, EstimationConfig, Sample
from .smoothers import boundary_variance, pinkse_bandwidth

__all__ = ["resolve_config"]

_H4_CUTOFF_FACTOR = 2.6


def _bunched_scale(outcome_bunched):
    q75, q25 = np.percentile(outcome_bunched, [75.0, 25.0])
    iqr = float(q75 - q25)
    sd = float(np.std(outcome_bunched))
    return max(iqr, 1.349 * sd * 0.1), sd


def resolve_config(sample: Sample, config: EstimationConfig) -> EstimationConfig:
    """Return a copy of ``config`` with all None tuning values made concrete."""
    config.validate()
    sample.require_estimable()
    d_above = sample.treatment[sample.treatment > sample.bunch_point] - sample.bunch_point
    n_above = d_above.size
    sd_d = float(np.std(d_above))
    if sd_d == 0.0:
        raise DegenerateCaseError("above-bunch treatments are all identical")

    h1 = config.h1
    if h1 is None:
        h1 = 1.06 * sd_d * n_above ** (-0.2)
    # The cf denominator tolerates more smoothing bias than the outcome fit,
    # and its variance feeds straight into the deconvolution integrand, so
    # the default window is wider.
    h3 = config.h3 if config.h3 is not None else 2.0 * sd_d * n_above ** (-0.2)

    h2 = config.h2
    if h2 is None:
        window = sd_d / 2.0
        count = int(np.count_nonzero((d_above > 0) & (d_above <= window)))
        if count == 0:
            raise DegenerateCaseError("no observations near the boundary for the pilot density")
        pilot = count / (sample.n * window)
        h2 = pinkse_bandwidth(n_above, pilot, 1.0 / sd_d**2)

    y_bunched = sample.outcome[sample.bunched_mask]
    needs_h4 = config.h4 is None
    needs_xi = config.quadrature.xi_max is None
    h4 = config.h4
    xi_max = config.quadrature.xi_max
    if needs_h4 or needs_xi:
        var_b = float(np.var(y_bunched))
        if var_b == 0.0:
            raise DegenerateCaseError(
                "bunched outcomes are constant; the selection distribution is degenerate"
            )
        if needs_h4:
            sigma2_plus = boundary_variance(sample, h1, 2.0 * h1, config.kernel1)
            sigma_s = np.sqrt(max(var_b - sigma2_plus, (0.05 * np.sqrt(var_b)) ** 2))
            h4 = float(sigma_s / _H4_CUTOFF_FACTOR)
        if needs_xi:
            scale, _ = _bunched_scale(y_bunched)
            xi_max = 10.0 / scale

    resolved = dataclasses.replace(
        config,
        h1=float(h1),
        h2=float(h2),
        h3=float(h3),
        h4=float(h4),
        quadrature=dataclasses.replace(config.quadrature, xi_max=float(xi_max)),
    )
    resolved.validate()
    return resolved
