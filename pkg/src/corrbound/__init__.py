"""Time-averaged autocorrelations of Hamiltonian observables and their
lower bounds from polynomials in conserved quantities."""
from .backend import available as available_backends, get_backend, set_threads
from .bounds import (
    BoundResult,
    MonomialBasis,
    OverlapData,
    bootstrap,
    bound_sequence,
    build_gram,
    build_overlaps,
    enumerate_basis,
    mazur_strict,
    orthogonalize,
    partitioned_bound,
    partitioned_sequence,
    polynomial_bound,
    saturation_diagnostic,
)
from .config import ConfigError, RunConfig, load_config, parse_config
from .correlation import (
    CEstimate,
    correlation_function,
    estimate_C,
    estimate_C_direct,
    estimate_C_norm,
    orbital_average,
)
from .dynamics import PhaseState, SystemSpec, builtin, integrate, make_system, step_verlet
from .expr import derivative, evaluate, gradient, parse, pretty
from .gibbs import GibbsEnsemble, expectation, load_ensemble, sample_gibbs, save_ensemble
from .labeler import InvariantLabeler, pendulum_labeler
from .regular import level_set_average, level_set_table, norm_AH_squared
from .report import BoundReport, compute_report

__version__ = "0.1.0"

__all__ = [
    "BoundReport", "BoundResult", "CEstimate", "ConfigError", "GibbsEnsemble", "InvariantLabeler",
    "MonomialBasis", "OverlapData", "PhaseState", "RunConfig", "SystemSpec", "available_backends", "bootstrap",
    "bound_sequence", "build_gram", "build_overlaps", "builtin", "compute_report", "correlation_function",
    "derivative", "enumerate_basis", "estimate_C", "estimate_C_direct", "estimate_C_norm", "evaluate",
    "expectation", "get_backend", "gradient", "integrate", "level_set_average", "level_set_table",
    "load_config", "load_ensemble", "make_system", "mazur_strict", "norm_AH_squared", "orbital_average",
    "orthogonalize", "parse", "parse_config", "partitioned_bound", "partitioned_sequence", "pendulum_labeler",
    "polynomial_bound", "pretty", "sample_gibbs", "saturation_diagnostic", "save_ensemble", "set_threads",
    "step_verlet",
]
