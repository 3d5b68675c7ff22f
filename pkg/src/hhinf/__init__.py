"""Hierarchical structured H-infinity controller tuning for coupled power networks."""

__version__ = "0.1.0"

from .lti import (
    BlockDiagram,
    FrequencyGrid,
    FrequencyResponse,
    Mode,
    Parameter,
    StateSpace,
    assemble,
    freq_response,
    hinf_bisection,
    hinf_sampled,
    is_stable,
    modal_analysis,
    simulate_step,
)

__all__ = [
    "BlockDiagram", "FrequencyGrid", "FrequencyResponse", "Mode", "Parameter",
    "StateSpace", "assemble", "freq_response", "hinf_bisection", "hinf_sampled",
    "is_stable", "modal_analysis", "simulate_step", "__version__",
]
