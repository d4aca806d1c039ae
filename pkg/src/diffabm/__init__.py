"""Differentiable agent-based simulation of coupled epidemic and
labor-market dynamics over synthetic populations.

Core entry points: validate_config / Simulation for runs, calibrate for
gradient-based parameter fitting, poll / counterfactual / prospective_sweep
for analyses, and service.create_app plus the diffabm CLI for the HTTP and
command-line surfaces.
"""

from .analysis import (
    CounterfactualReport,
    FitnessCurve,
    PollQuery,
    PollTable,
    counterfactual,
    poll,
    prospective_sweep,
)
from .calibrate import (
    CalibNet,
    CovariateSeries,
    ObservedSeries,
    calibrate,
    predict_structural,
    synthetic_covariates,
)
from .config import (
    RunConfig,
    apply_patch,
    canonical_json,
    config_hash,
    load_config,
    validate_config,
)
from .engine import (
    Simulation,
    Trajectory,
    aggregate,
    build_population,
    run_simulation,
)
from .errors import (
    ConvergenceError,
    DiffAbmError,
    DomainError,
    GradientError,
    InfeasibleError,
    SchemaError,
    UsageError,
)
from .popgen import Population, ipf_fit, sample_population
from .providers import make_provider
from .tape import Param, Tape

__all__ = [
    "CalibNet",
    "ConvergenceError",
    "CounterfactualReport",
    "CovariateSeries",
    "DiffAbmError",
    "DomainError",
    "FitnessCurve",
    "GradientError",
    "InfeasibleError",
    "ObservedSeries",
    "Param",
    "PollQuery",
    "PollTable",
    "Population",
    "RunConfig",
    "SchemaError",
    "Simulation",
    "Tape",
    "Trajectory",
    "UsageError",
    "aggregate",
    "apply_patch",
    "build_population",
    "calibrate",
    "canonical_json",
    "config_hash",
    "counterfactual",
    "ipf_fit",
    "load_config",
    "make_provider",
    "poll",
    "predict_structural",
    "prospective_sweep",
    "run_simulation",
    "sample_population",
    "synthetic_covariates",
    "validate_config",
]
