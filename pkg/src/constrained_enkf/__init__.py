"""Ensemble Kalman inversion with equality constraints on the control."""

from .constraints import (LinearConstraint, QuadraticConstraint, RepairError, licq_check,
                          quadratic_pairing_constraint, repair_ensemble, repair_pairwise,
                          symmetry_constraint)
from .dae import SolverConfig, StepError, adaptive_dt, imex_step, run_filter, solve_multiplier
from .diagnostics import CSV_COLUMNS, DiagnosticsRow, RunRecord
from .discrete import constrained_step, run_discrete, unconstrained_step
from .ensemble import Ensemble, compute_covariance_blocks, compute_stats, sample_brownian_bridge
from .experiment import ExperimentConfig, emit_csv, run_experiment
from .forward import LinearForwardModel, assemble_elliptic_operator, grid, synthesize_observation
from .meanfield import (CounterexampleState, ScalarSystemParams, equilibria, integrate_counterexample,
                        m1_bound, moment_relation_residual, singularly_perturbed_integrate)
from .multiplier import MultiplierError

__version__ = "0.1.0"
