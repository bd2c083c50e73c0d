"""Causal effects from bunching in a continuous treatment.

Estimates the average marginal effect at a bunching point and extrapolated
treatment effects away from it, using boundary local-linear regression, a
boundary-corrected density estimator, and characteristic-function
deconvolution of the selection distribution.
"""

from .data import (
    AmeEstimate,
    AttEstimate,
    BootstrapSpec,
    ControlKind,
    DegenerateCaseError,
    EstimationConfig,
    InputError,
    KernelKind,
    NoiseModel,
    QuadratureSpec,
    Sample,
    UnreliableInferenceError,
    load_sample,
)
from .estimator import (
    BootstrapResult,
    StrataAssignment,
    ThetaResult,
    ame,
    att,
    att_curve,
    bootstrap,
    cluster_controls,
    kernel_weighted_ame,
    strata_from_labels,
    stratified_ame,
    theta,
)
from .simulate import DgpSpec, sample_dgp

__version__ = "0.1.0"

__all__ = [
    "AmeEstimate",
    "AttEstimate",
    "BootstrapResult",
    "BootstrapSpec",
    "ControlKind",
    "DegenerateCaseError",
    "DgpSpec",
    "EstimationConfig",
    "InputError",
    "KernelKind",
    "NoiseModel",
    "QuadratureSpec",
    "Sample",
    "StrataAssignment",
    "ThetaResult",
    "UnreliableInferenceError",
    "ame",
    "att",
    "att_curve",
    "bootstrap",
    "cluster_controls",
    "kernel_weighted_ame",
    "load_sample",
    "sample_dgp",
    "strata_from_labels",
    "stratified_ame",
    "theta",
    "__version__",
]
