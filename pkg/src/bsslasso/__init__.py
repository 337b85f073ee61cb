"""Fault location in optical fiber links from baseband-subcarrier sweeps."""

from .fibermodel import (
    DEFAULT_CONSTANTS,
    Event,
    FiberLink,
    FrequencyProfile,
    MagnitudeError,
    PhysicalConstants,
    StepCoefficients,
    coefficients_from_magnitudes,
    frequency_response_analytic,
    frequency_response_numeric,
    magnitudes_from_coefficients,
    time_domain_profile,
)

__version__ = "0.1.0"
