"""Summarization of variable-dimensional posterior samples.

The package fits a parametric approximation (gated Gaussian components plus
a Poisson point process for outliers) to the output of trans-dimensional
samplers, and ships two such samplers for end-to-end experiments: one for
sinusoids in white noise, one for photoelectron count traces.
"""

from .fit import FitConfig, FitResult, sem_fit
from .model import (
    AllocationVector,
    ApproxModel,
    GaussianComponent,
    IndicatorVector,
    ParamSpace,
    SampleSet,
    VariableDimSample,
    allocation_log_prior,
    component_log_density,
    indicator_from_allocation,
    labeled_joint_log_density,
    model_intensity,
    sample_from_model,
)
from .muons import (
    AugerChainConfig,
    PECountSignal,
    PulseShape,
    rjmcmc_run_auger,
    simulate_pe_signal,
)
from .sinusoid import (
    SinChainConfig,
    SinusoidSignal,
    generate_synthetic_signal,
    rjmcmc_run,
)

__version__ = "0.1.0"

__all__ = [
    "AllocationVector",
    "ApproxModel",
    "AugerChainConfig",
    "FitConfig",
    "FitResult",
    "GaussianComponent",
    "IndicatorVector",
    "PECountSignal",
    "ParamSpace",
    "PulseShape",
    "SampleSet",
    "SinChainConfig",
    "SinusoidSignal",
    "VariableDimSample",
    "allocation_log_prior",
    "component_log_density",
    "generate_synthetic_signal",
    "indicator_from_allocation",
    "labeled_joint_log_density",
    "model_intensity",
    "rjmcmc_run",
    "rjmcmc_run_auger",
    "sample_from_model",
    "sem_fit",
    "simulate_pe_signal",
]
