"""k-monotone density estimation: splines, LSE/MLE, and limit-process tools."""

from .piecewise import PiecewisePoly
from .kernels import (
    MixingMeasure,
    Sample,
    beta_kernel,
    kernel_gram,
    mixture_density,
    mixture_to_piecewise,
)
from .estimators import (
    CharacterizationReport,
    FitOptions,
    FitResult,
    NonConvergenceError,
    StepFunction,
    certify,
    empirical_Y,
    fit_lse,
    fit_mle,
    grenander,
    hhat_values,
    invert_hampel,
    invert_mixing,
)
from .estimator import KMonotoneDensity
from .hermite import (
    HermiteData,
    IllConditionedError,
    complete_interpolant,
    error_monospline,
    hermite_interpolant,
    perfect_spline,
)
from .conjecture import ConjectureReport, conjecture_trial, sample_knots
from .limits import (
    ExponentialTruth,
    GapResult,
    InvelopeError,
    InvelopeResult,
    LimitPath,
    MixtureTruth,
    RateResult,
    gap_experiment,
    invelope_Hk,
    rate_experiment,
    scaling_constants,
    simulate_Yk,
)

__all__ = [
    "PiecewisePoly",
    "MixingMeasure",
    "Sample",
    "beta_kernel",
    "kernel_gram",
    "mixture_density",
    "mixture_to_piecewise",
    "CharacterizationReport",
    "FitOptions",
    "FitResult",
    "NonConvergenceError",
    "StepFunction",
    "certify",
    "empirical_Y",
    "fit_lse",
    "fit_mle",
    "grenander",
    "hhat_values",
    "invert_hampel",
    "invert_mixing",
    "KMonotoneDensity",
    "HermiteData",
    "IllConditionedError",
    "complete_interpolant",
    "error_monospline",
    "hermite_interpolant",
    "perfect_spline",
    "ConjectureReport",
    "conjecture_trial",
    "sample_knots",
    "ExponentialTruth",
    "GapResult",
    "InvelopeError",
    "InvelopeResult",
    "LimitPath",
    "MixtureTruth",
    "RateResult",
    "gap_experiment",
    "invelope_Hk",
    "rate_experiment",
    "scaling_constants",
    "simulate_Yk",
]

__version__ = "0.1.0"
