"""Design-based robust estimation for stepped wedge cluster-randomized trials."""

from .data import LongFormatDataset
from .design import AssignmentDistribution, TrialLayout, assignment_distribution, build_layout
from .effectmodel import TreatmentBasis, custom_basis, eti_basis, it_basis, with_modifiers
from .errors import (ConfigError, DataError, DesignError, IdentificationError,
                     NumericalError, SteppedWedgeError)
from .pipeline import AnalysisConfig, AnalysisResult, fit_trial

__all__ = [
    "AnalysisConfig", "AnalysisResult", "AssignmentDistribution", "ConfigError",
    "DataError", "DesignError", "IdentificationError", "LongFormatDataset",
    "NumericalError", "SteppedWedgeError", "TreatmentBasis", "TrialLayout",
    "assignment_distribution", "build_layout", "custom_basis", "eti_basis",
    "fit_trial", "it_basis", "with_modifiers",
]
__version__ = "0.1.0"
