"""Discrete-time ensemble Kalman updates, unconstrained and constrained."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .constraints import EqualityConstraint
from .diagnostics import RunRecord, diagnostics_row
from .ensemble import Ensemble, compute_covariance_blocks
from .forward import LinearForwardModel
from .multiplier import solve_scaled


@dataclass(frozen=True)
class DiscreteStepResult:
    ensemble_next: Ensemble
    multipliers: np.ndarray
    feasibility_residuals: np.ndarray


def _kalman_pieces(ensemble: Ensemble, model: LinearForwardModel, y):
    u = ensemble.members
    images = model.apply(u)
    blocks = compute_covariance_blocks(ensemble, images)
    chol = sla.cho_factor(blocks.c_ww + model.gamma_inv, lower=True)
    innovation = np.asarray(y, dtype=float) - images
    u_enkf = u + sla.cho_solve(chol, innovation.T).T @ blocks.c_uw.T
    return blocks, chol, u_enkf


def unconstrained_step(ensemble: Ensemble, model: LinearForwardModel, y) -> Ensemble:
    """u^j + C_uw (C_ww + Gamma^{-1})^{-1} (y - G u^j) for every member."""
    _, _, u_enkf = _kalman_pieces(ensemble, model, y)
    return Ensemble(u_enkf)


def posterior_covariance(blocks, chol) -> np.ndarray:
    """C_uu - C_uw (C_ww + Gamma^{-1})^{-1} C_uw^T."""
    p = blocks.c_uu - blocks.c_uw @ sla.cho_solve(chol, blocks.c_uw.T)
    return 0.5 * (p + p.T)


def constrained_step(ensemble: Ensemble, model: LinearForwardModel, y,
                     constraint: EqualityConstraint, tol: float = 1e-10, max_iter: int = 50,
                     lambda_init=None, lambda_max: float = 1e6) -> DiscreteStepResult:
    """Constrained update satisfying the first-order optimality conditions.

    Each member solves

        u = u_EnKF + (D - C_uu) grad A(u) lambda,   A(u) = 0,

    with D = C_uw (C_ww + Gamma^{-1})^{-1} C_uw^T. For a quadratic
    constraint grad A(u) = A u + b, so u is linear in u given lambda and the
    system reduces to a scalar root find in lambda (see ``multiplier``).

    Parameters
    ----------
    lambda_init : array_like, optional
        Warm start per member, typically the previous step's multipliers.
    lambda_max : float
        Bracket search is limited to |lambda| <= lambda_max.

    Raises
    ------
    MultiplierError
        If some member's multiplier cannot be found; ``members`` lists them.
    """
    blocks, chol, u_enkf = _kalman_pieces(ensemble, model, y)
    p = posterior_covariance(blocks, chol)
    lam, u_next, res = solve_scaled(p, u_enkf, constraint, lambda_init, tol, max_iter, lambda_max)
    return DiscreteStepResult(Ensemble(u_next), lam, np.abs(res))


def run_discrete(initial: Ensemble, model: LinearForwardModel, y, eta_norm_sq: float,
                 constraint: EqualityConstraint | None = None, max_steps: int = 200,
                 truth=None, constrained: bool = False, tol: float = 1e-10,
                 metadata: dict | None = None) -> RunRecord:
    """Iterate the discrete filter until the discrepancy principle holds.

    Rows are indexed by iteration number (t = n, dt = 1). With
    ``constrained`` the constrained update is used, otherwise the plain
    EnKF step.
    """
    ensemble = initial
    m = constraint.m if constraint is not None else 1
    lam = np.zeros((initial.J, m)) if m > 1 else np.zeros(initial.J)
    record = RunRecord(metadata=dict(metadata or {}))
    record.append(diagnostics_row(0.0, 0.0, ensemble, lam, model, y, constraint, truth))
    record.termination = "max_steps"
    for n in range(1, max_steps + 1):
        if record.rows[-1].misfit <= eta_norm_sq:
            record.termination = "discrepancy"
            break
        if constrained:
            step = constrained_step(ensemble, model, y, constraint, tol=tol, lambda_init=lam)
            ensemble, lam = step.ensemble_next, step.multipliers
        else:
            ensemble = unconstrained_step(ensemble, model, y)
        record.append(diagnostics_row(float(n), 1.0, ensemble, lam, model, y, constraint, truth))
    else:
        if record.rows[-1].misfit <= eta_norm_sq:
            record.termination = "discrepancy"
    record.final_ensemble = ensemble
    record.final_multipliers = lam
    return record
