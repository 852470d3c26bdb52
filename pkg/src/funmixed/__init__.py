"""Penalized functional mixed-effects models for replicated short time series.

Each response unit (a gene) is modelled as a population mean curve plus
gender and age-group effect curves and a random curve per individual, all
represented by their values at the design time points with a cubic-spline
roughness penalty.
"""

from .estimators import FunctionalMixedEffects, FunctionalPCA
from .estimation import ModelFit, blue_blup, e_step, fit_em, fit_fixed, m_step
from .exceptions import (
    FunMixedError,
    GridError,
    IncidenceError,
    InestimableEffectError,
    ResamplingError,
    SchemaError,
    SelectionError,
    SingularSystemError,
)
from .fpca import FpcaResult, curve_matrix, decompose, discretize, loadings
from .inference import (
    ConfidenceBand,
    NullPool,
    TestResult,
    bh_fdr,
    bootstrap_bands,
    build_null_pool,
    effect_statistic,
    empirical_pvalues,
    permutation_test,
    theoretical_bands,
)
from .model import (
    AssembledModel,
    GeneDataset,
    IndividualSeries,
    SmoothingParameters,
    VarianceComponents,
    assemble,
    gll,
    pgll,
)
from .selection import SelectionResult, information_criterion, select, smoother_matrices
from .simulate import SimulationSpec, generate
from .spline_basis import NaturalCubicSpline, TimeGrid, build_incidence, build_roughness

__version__ = "0.1.0"

__all__ = [
    "AssembledModel",
    "ConfidenceBand",
    "FpcaResult",
    "FunctionalMixedEffects",
    "FunctionalPCA",
    "FunMixedError",
    "GeneDataset",
    "GridError",
    "IncidenceError",
    "IndividualSeries",
    "InestimableEffectError",
    "ModelFit",
    "NaturalCubicSpline",
    "NullPool",
    "ResamplingError",
    "SchemaError",
    "SelectionError",
    "SelectionResult",
    "SimulationSpec",
    "SingularSystemError",
    "SmoothingParameters",
    "TestResult",
    "TimeGrid",
    "VarianceComponents",
    "assemble",
    "bh_fdr",
    "blue_blup",
    "bootstrap_bands",
    "build_incidence",
    "build_null_pool",
    "build_roughness",
    "curve_matrix",
    "decompose",
    "discretize",
    "e_step",
    "effect_statistic",
    "empirical_pvalues",
    "fit_em",
    "fit_fixed",
    "generate",
    "gll",
    "information_criterion",
    "loadings",
    "m_step",
    "permutation_test",
    "pgll",
    "select",
    "smoother_matrices",
    "theoretical_bands",
]
