"""Observed-data representation, ingestion, validation, and report schemas.

The canonical orientation puts all treatment mass at or above the bunch
point; data bunched on a right boundary or at an interior kink is mapped into
that orientation by :func:`reorient` before estimation.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .kernels import KernelKind

__all__ = [
    "InputError",
    "DegenerateCaseError",
    "UnreliableInferenceError",
    "ControlKind",
    "Side",
    "NoiseModel",
    "Sample",
    "QuadratureSpec",
    "BootstrapSpec",
    "EstimationConfig",
    "AmeEstimate",
    "AttEstimate",
    "DiagnosticsBundle",
    "LoadReport",
    "load_sample",
    "write_sample_csv",
    "reorient",
    "emit_report",
    "config_to_dict",
    "config_hash",
]

_MISSING_TOKENS = {"", "na", "nan", "null", "none", "."}


class InputError(ValueError):
    """Invalid input data or configuration (CLI exit code 2)."""

    exit_code = 2


class DegenerateCaseError(RuntimeError):
    """The estimation problem is degenerate on this sample (CLI exit code 3)."""

    exit_code = 3


class UnreliableInferenceError(RuntimeError):
    """Bootstrap inference failed on too many replicates (CLI exit code 4)."""

    exit_code = 4


class ControlKind(str, Enum):
    CONTINUOUS = "continuous"
    DISCRETE = "discrete"


class Side(str, Enum):
    """Where the bunching sits relative to the observed support."""

    LEFT_BOUNDARY = "left_boundary"
    RIGHT_BOUNDARY = "right_boundary"
    INTERIOR_ABOVE = "interior_above"
    INTERIOR_BELOW = "interior_below"


class NoiseModel(str, Enum):
    NONPARAMETRIC = "nonparametric"
    NORMAL_PLUGIN = "normal_plugin"


@dataclass(frozen=True)
class Sample:
    """Immutable observed sample (treatment, outcome, optional controls).

    Arrays are coerced to contiguous float64 and marked read-only, so a
    constructed sample is safe to share across concurrent readers.
    """

    treatment: np.ndarray
    outcome: np.ndarray
    bunch_point: float
    controls: np.ndarray | None = None
    control_kinds: tuple[ControlKind, ...] = ()

    def __post_init__(self):
        x = np.ascontiguousarray(np.asarray(self.treatment, dtype=float))
        y = np.ascontiguousarray(np.asarray(self.outcome, dtype=float))
        if x.ndim != 1 or y.ndim != 1:
            raise InputError("treatment and outcome must be one-dimensional vectors")
        if x.size != y.size:
            raise InputError(
                f"length mismatch: {x.size} treatment values vs {y.size} outcomes"
            )
        if x.size < 1:
            raise InputError("sample must contain at least one observation")
        z = self.controls
        kinds = tuple(ControlKind(k) for k in self.control_kinds)
        if z is not None:
            z = np.ascontiguousarray(np.asarray(z, dtype=float))
            if z.ndim == 1:
                z = z[:, None]
            if z.ndim != 2 or z.shape[0] != x.size:
                raise InputError("controls must be an (n, p) matrix aligned with treatment")
            if len(kinds) != z.shape[1]:
                raise InputError("one control kind per control column is required")
            z.setflags(write=False)
        elif kinds:
            raise InputError("control kinds given without a control matrix")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "treatment", x)
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "controls", z)
        object.__setattr__(self, "control_kinds", kinds)
        object.__setattr__(self, "bunch_point", float(self.bunch_point))

    @property
    def n(self) -> int:
        return self.treatment.size

    @property
    def bunched_mask(self) -> np.ndarray:
        return self.treatment == self.bunch_point

    @property
    def n_bunched(self) -> int:
        return int(np.count_nonzero(self.bunched_mask))

    @property
    def n_above(self) -> int:
        return int(np.count_nonzero(self.treatment > self.bunch_point))

    def require_estimable(self) -> None:
        """Reject samples on which the boundary estimands are undefined."""
        if self.n_bunched == 0:
            raise InputError(
                f"no observations bunched at {self.bunch_point!r}; "
                "check the bunch point and matching tolerance"
            )
        if self.n_above == 0:
            raise InputError("no observations strictly above the bunch point")
        if bool(np.any(self.treatment < self.bunch_point)):
            raise InputError(
                "observations below the bunch point; apply reorient() for "
                "right-boundary or interior bunching first"
            )


@dataclass(frozen=True)
class QuadratureSpec:
    """Frequency-grid settings for the deconvolution integral.

    ``xi_max`` is the grid half-width in xi-space (None resolves to
    10/IQR of the bunched outcomes), ``nodes`` the symmetric-grid node count
    (even, >= 16), ``floor`` the denominator modulus below which grid points
    are excluded, and ``excluded_mass_warn`` the excluded regularizer-mass
    fraction that triggers a warning.
    """

    xi_max: float | None = None
    nodes: int = 2048
    floor: float = 1e-3
    excluded_mass_warn: float = 0.05

    def validate(self) -> None:
        if self.xi_max is not None and not self.xi_max > 0:
            raise InputError("quadrature half-width must be positive")
        if self.nodes < 16 or self.nodes % 2:
            raise InputError("quadrature node count must be even and at least 16")
        if self.floor < 0:
            raise InputError("denominator floor must be nonnegative")


@dataclass(frozen=True)
class BootstrapSpec:
    replications: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.replications < 0:
            raise InputError("bootstrap replications must be nonnegative")


@dataclass(frozen=True)
class EstimationConfig:
    """Tuning parameters for the full estimation pipeline.

    Bandwidths left as None are resolved from the data (recorded in the
    report): h1 and h3 by a normal-reference rule on the above-bunch
    treatments, h2 by the boundary-density plug-in rule, and h4 from the
    implied selection scale.
    """

    h1: float | None = None
    h2: float | None = None
    h3: float | None = None
    h4: float | None = None
    kernel1: KernelKind = KernelKind.TRIANGULAR
    kernel2: KernelKind = KernelKind.EPANECHNIKOV
    kernel3: KernelKind = KernelKind.TRIANGULAR
    kernel4: KernelKind = KernelKind.SINC_FLAT
    quadrature: QuadratureSpec = field(default_factory=QuadratureSpec)
    theta_tolerance: float = 0.0
    theta_se_z: float | None = None
    theta_se_replications: int = 200
    bootstrap: BootstrapSpec = field(default_factory=BootstrapSpec)
    noise_model: NoiseModel = NoiseModel.NONPARAMETRIC
    bunch_match_tolerance: float = 0.0

    def validate(self) -> None:
        for name in ("h1", "h2", "h3", "h4"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise InputError(f"bandwidth {name} must be positive")
        for name in ("kernel1", "kernel2", "kernel3", "kernel4"):
            KernelKind(getattr(self, name))
        self.quadrature.validate()
        self.bootstrap.validate()
        if self.theta_tolerance < 0:
            raise InputError("theta_tolerance must be nonnegative")
        if self.theta_se_z is not None and not self.theta_se_z > 0:
            raise InputError("theta_se_z must be positive when set")
        NoiseModel(self.noise_model)
        if self.bunch_match_tolerance < 0:
            raise InputError("bunch_match_tolerance must be nonnegative")


@dataclass(frozen=True)
class AmeEstimate:
    """Average marginal effect at the bunch point with its components."""

    ame: float
    m_slope: float
    theta: int
    gap: float
    f_x_boundary: float
    bunch_mass: float
    s_prime: float
    selection_density_at_zero: float | None = None
    se: float | None = None
    ci: tuple[float, float] | None = None
    diagnostics: dict | None = None


@dataclass(frozen=True)
class AttEstimate:
    """Extrapolated treatment effect on the treated at ``x``."""

    x: float
    degree: int
    att: float
    m_at_x: float
    correction_terms: tuple[float, ...]
    se: float | None = None
    ci: tuple[float, float] | None = None


@dataclass(frozen=True)
class LevelCurve:
    level: float
    grid: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class DiagnosticsBundle:
    """Descriptive curves: conditional mean, per-level KDEs, per-level QQ."""

    conditional_mean: np.ndarray  # columns: x, mean_y, ci_lo, ci_hi
    kde_levels: tuple[LevelCurve, ...]
    qq_levels: tuple[LevelCurve, ...]  # grid=theoretical quantile, values=empirical


@dataclass(frozen=True)
class LoadReport:
    n_rows: int
    n_dropped: int
    n_snapped: int


def _resolve_column(header: list[str], spec, what: str) -> int:
    if isinstance(spec, int):
        if not 0 <= spec < len(header):
            raise InputError(f"{what} column index {spec} out of range for {len(header)} columns")
        return spec
    try:
        return header.index(str(spec))
    except ValueError:
        raise InputError(f"missing {what} column {spec!r}; header has {header}") from None


def _parse_cell(token: str, column: str, row_index: int) -> float | None:
    stripped = token.strip()
    if stripped.lower() in _MISSING_TOKENS:
        return None
    try:
        value = float(stripped)
    except ValueError:
        raise InputError(
            f"non-numeric value {token!r} in column {column!r} at data row {row_index}"
        ) from None
    if math.isnan(value):
        return None
    return value


def load_sample(
    path,
    treatment_col,
    outcome_col,
    bunch_value: float,
    *,
    control_cols=(),
    control_kinds=(),
    match_tolerance: float = 0.0,
    delimiter: str = ",",
    require_above: bool = True,
) -> tuple[Sample, LoadReport]:
    """Read a delimited text file into a validated :class:`Sample`.

    Columns may be given by header name or zero-based index.  Treatment
    values within ``match_tolerance`` of ``bunch_value`` are snapped exactly
    to it; rows with missing treatment/outcome/control cells are dropped.
    Returns the sample together with a :class:`LoadReport` carrying the row,
    drop, and snap counts.  ``require_above=False`` defers the
    above-the-bunch check to after :func:`reorient` (right-boundary data).
    """
    if match_tolerance < 0:
        raise InputError("match tolerance must be nonnegative")
    control_cols = tuple(control_cols)
    kinds = tuple(ControlKind(k) for k in control_kinds)
    if len(kinds) != len(control_cols):
        raise InputError("one control kind per control column is required")
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        ix = _resolve_column(header, treatment_col, "treatment")
        iy = _resolve_column(header, outcome_col, "outcome")
        iz = [_resolve_column(header, c, "control") for c in control_cols]
        xs: list[float] = []
        ys: list[float] = []
        zs: list[list[float]] = []
        n_rows = 0
        n_dropped = 0
        n_snapped = 0
        for row_index, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            n_rows += 1
            needed = max(ix, iy, *iz) if iz else max(ix, iy)
            if len(row) <= needed:
                raise InputError(f"too few columns at data row {row_index}")
            x = _parse_cell(row[ix], header[ix], row_index)
            y = _parse_cell(row[iy], header[iy], row_index)
            z_row = [_parse_cell(row[j], header[j], row_index) for j in iz]
            if x is None or y is None or any(v is None for v in z_row):
                n_dropped += 1
                continue
            if x != bunch_value and abs(x - bunch_value) <= match_tolerance:
                x = float(bunch_value)
                n_snapped += 1
            xs.append(x)
            ys.append(y)
            if iz:
                zs.append(z_row)
    if not xs:
        raise InputError(f"{path}: no usable data rows")
    sample = Sample(
        treatment=np.array(xs),
        outcome=np.array(ys),
        bunch_point=float(bunch_value),
        controls=np.array(zs) if zs else None,
        control_kinds=kinds,
    )
    if sample.n_bunched == 0:
        raise InputError(
            f"{path}: no observations bunched at {bunch_value!r} "
            f"(tolerance {match_tolerance!r})"
        )
    if require_above and sample.n_above == 0:
        raise InputError(f"{path}: no observations above the bunch point")
    return sample, LoadReport(n_rows=n_rows, n_dropped=n_dropped, n_snapped=n_snapped)


def write_sample_csv(sample: Sample, path) -> None:
    """Write a sample as delimited text with full-precision (repr) floats."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        control_names = [f"z{j}" for j in range(len(sample.control_kinds))]
        writer.writerow(["x", "y", *control_names])
        for i in range(sample.n):
            row = [repr(sample.treatment[i].item()), repr(sample.outcome[i].item())]
            if sample.controls is not None:
                row.extend(repr(v.item()) for v in sample.controls[i])
            writer.writerow(row)


def reorient(sample: Sample, side: Side) -> Sample:
    """Map a sample into canonical orientation (all mass at or above x̄).

    Right-boundary data is reflected through the bunch point; interior
    bunching is restricted to the requested side (reflecting the below side),
    keeping the bunched mass either way.
    """
    side = Side(side)
    x = sample.treatment
    xbar = sample.bunch_point
    if side is Side.LEFT_BOUNDARY:
        return sample
    if side is Side.RIGHT_BOUNDARY:
        # Reflection is total (and self-inverse); only an all-bunched sample
        # has no side to work with.
        if not bool(np.any(x != xbar)):
            raise InputError("right_boundary reorientation needs observations off the bunch point")
        return dataclasses.replace(sample, treatment=2.0 * xbar - x)
    keep = x >= xbar if side is Side.INTERIOR_ABOVE else x <= xbar
    if not bool(np.any(x > xbar if side is Side.INTERIOR_ABOVE else x < xbar)):
        raise InputError(f"no observations on the {side.value} side of the bunch point")
    restricted = dataclasses.replace(
        sample,
        treatment=x[keep],
        outcome=sample.outcome[keep],
        controls=None if sample.controls is None else sample.controls[keep],
    )
    if side is Side.INTERIOR_BELOW:
        restricted = dataclasses.replace(restricted, treatment=2.0 * xbar - restricted.treatment)
    return restricted


def config_to_dict(config: EstimationConfig) -> dict:
    """Serialize a config with stable key order (JSON-ready)."""
    return {
        "h1": config.h1,
        "h2": config.h2,
        "h3": config.h3,
        "h4": config.h4,
        "kernel1": KernelKind(config.kernel1).value,
        "kernel2": KernelKind(config.kernel2).value,
        "kernel3": KernelKind(config.kernel3).value,
        "kernel4": KernelKind(config.kernel4).value,
        "quadrature": {
            "xi_max": config.quadrature.xi_max,
            "nodes": config.quadrature.nodes,
            "floor": config.quadrature.floor,
            "excluded_mass_warn": config.quadrature.excluded_mass_warn,
        },
        "theta_tolerance": config.theta_tolerance,
        "theta_se_z": config.theta_se_z,
        "theta_se_replications": config.theta_se_replications,
        "bootstrap": {
            "replications": config.bootstrap.replications,
            "seed": config.bootstrap.seed,
        },
        "noise_model": NoiseModel(config.noise_model).value,
        "bunch_match_tolerance": config.bunch_match_tolerance,
    }


def config_hash(config: EstimationConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _ame_to_dict(est: AmeEstimate) -> dict:
    out = {
        "ame": est.ame,
        "m_slope": est.m_slope,
        "theta": int(est.theta),
        "gap": est.gap,
        "f_x_boundary": est.f_x_boundary,
        "bunch_mass": est.bunch_mass,
    }
    if est.theta != 0:
        out["selection_density_at_zero"] = est.selection_density_at_zero
    out["s_prime"] = est.s_prime
    if est.se is not None:
        out["se"] = est.se
    if est.ci is not None:
        out["ci"] = [est.ci[0], est.ci[1]]
    if est.diagnostics is not None:
        out["diagnostics"] = est.diagnostics
    return out


def _att_to_dict(est: AttEstimate) -> dict:
    out = {
        "x": est.x,
        "degree": int(est.degree),
        "att": est.att,
        "m_at_x": est.m_at_x,
        "correction_terms": list(est.correction_terms),
    }
    if est.se is not None:
        out["se"] = est.se
    if est.ci is not None:
        out["ci"] = [est.ci[0], est.ci[1]]
    return out


def emit_report(estimates: dict, config: EstimationConfig, provenance: dict) -> str:
    """Render estimates as a deterministic JSON document (string).

    Key order is fixed, ATT entries are sorted by x, and parse -> re-emit of
    the document is byte-identical (shortest-round-trip float formatting).
    """
    if not estimates or all(v is None for v in estimates.values()):
        raise InputError("emit_report requires at least one estimate")
    body: dict = {
        "schema_version": 1,
        "provenance": dict(provenance),
        "config": config_to_dict(config),
    }
    body["provenance"].setdefault("config_hash", config_hash(config))
    if (ame := estimates.get("ame")) is not None:
        body["ame"] = _ame_to_dict(ame)
    if (sweep := estimates.get("sweep")) is not None:
        body["sweep"] = [
            {"h1": h1, "ame": _ame_to_dict(est)} for h1, est in sweep
        ]
    if (att := estimates.get("att")) is not None:
        body["att"] = [_att_to_dict(a) for a in sorted(att, key=lambda a: a.x)]
    if (extra := estimates.get("validation")) is not None:
        body["validation"] = extra
    return json.dumps(body, indent=2)
