"""Fluctuation relations for quantum systems with non-commuting conserved charges."""

from .dynamics import PropagatorConfig, Protocol, propagate
from .flucts import FTReport, ft_report, integral_exchange_ft, integral_work_ft
from .gge import ChargeSet, GibbsState, build_gibbs_state
from .heisenberg import HeisenbergParams, build_driven_model, build_exchange_model, run_sweep
from .linalg import HermitianOperator, UnitaryOperator, spectral_decompose
from .pauli import PauliExpr, format_pauli_expr, parse_pauli_expr
from .trajectories import EnsembleOptions, JointSetup, PathEnsemble, enumerate_ensemble

__version__ = "0.1.0"

__all__ = [
    "ChargeSet",
    "EnsembleOptions",
    "FTReport",
    "GibbsState",
    "HeisenbergParams",
    "HermitianOperator",
    "JointSetup",
    "PathEnsemble",
    "PauliExpr",
    "PropagatorConfig",
    "Protocol",
    "UnitaryOperator",
    "build_driven_model",
    "build_exchange_model",
    "build_gibbs_state",
    "enumerate_ensemble",
    "format_pauli_expr",
    "ft_report",
    "integral_exchange_ft",
    "integral_work_ft",
    "parse_pauli_expr",
    "propagate",
    "run_sweep",
    "spectral_decompose",
]
