"""Run diagnostics: spread, residual, misfit, constraint on the mean, multipliers, KKT."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .constraints import EqualityConstraint, LinearConstraint, QuadraticConstraint
from .ensemble import Ensemble

CSV_COLUMNS = ("t", "dt", "E", "R", "misfit", "constraint_mean", "lambda_min",
               "lambda_spread", "kkt_stationarity", "kkt_feasibility")


@dataclass(frozen=True)
class DiagnosticsRow:
    t: float
    dt: float
    E: float
    R: float
    misfit: float
    constraint_mean: float
    lambda_min: float
    lambda_spread: float
    kkt_stationarity: float
    kkt_feasibility: float

    def as_tuple(self):
        return tuple(getattr(self, f.name) for f in fields(self))


@dataclass
class RunRecord:
    """Per-step diagnostics plus termination cause and run metadata."""

    rows: list = field(default_factory=list)
    termination: str = "max_steps"
    metadata: dict = field(default_factory=dict)
    error: str | None = None
    final_ensemble: Ensemble | None = None
    final_multipliers: np.ndarray | None = None

    def append(self, row: DiagnosticsRow):
        if self.rows and not row.t > self.rows[-1].t:
            raise ValueError("time must be strictly increasing across rows")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def __len__(self):
        return len(self.rows)


def spread_and_residual(ensemble: Ensemble, u_truth) -> tuple[float, float]:
    """E = (1/J) sum |u^j - mean|^2 and R = (1/J) sum |u^j - u_truth|^2."""
    u = ensemble.members
    e = u - u.mean(axis=0)
    r = u - np.asarray(u_truth, dtype=float)
    return float(np.mean(np.sum(e * e, axis=1))), float(np.mean(np.sum(r * r, axis=1)))


def spread(ensemble: Ensemble) -> float:
    e = ensemble.deviations()
    return float(np.mean(np.sum(e * e, axis=1)))


def misfit(ensemble: Ensemble, model, u_truth, eta) -> float:
    """(1/J) sum |G (u^j - u_truth) - eta|^2."""
    r = ensemble.members - np.asarray(u_truth, dtype=float)
    theta = model.apply(r) - np.asarray(eta, dtype=float)
    return float(np.mean(np.sum(theta * theta, axis=1)))


def misfit_from_data(ensemble: Ensemble, model, y) -> float:
    """(1/J) sum |G u^j - y|^2; equals ``misfit`` when y = G u_truth + eta."""
    theta = model.apply(ensemble.members) - np.asarray(y, dtype=float)
    return float(np.mean(np.sum(theta * theta, axis=1)))


def discrepancy_met(misfit_value: float, eta_norm_sq: float) -> bool:
    return bool(misfit_value <= eta_norm_sq)


def constraint_on_mean(ensemble: Ensemble, constraint: EqualityConstraint) -> np.ndarray:
    return constraint.evaluate(ensemble.mean())


def multiplier_stats(multipliers) -> tuple[float, float]:
    """Minimum and (1/J) sum (lambda_j - mean)^2.

    For vector multipliers of shape (J, m) the spread is averaged over
    components.
    """
    lam = np.asarray(multipliers, dtype=float)
    if lam.ndim == 1:
        lam = lam[:, None]
    spread_ = np.mean((lam - lam.mean(axis=0)) ** 2, axis=0).mean()
    return float(lam.min()), float(spread_)


def kkt_residual(ensemble: Ensemble, multipliers, model, y,
                 constraint: EqualityConstraint | None) -> tuple[float, float]:
    """max_j |grad Phi(u_j) + J_A(u_j)^T lambda_j| and max_j |A(u_j)|."""
    u = ensemble.members
    grad = model.least_squares_gradient(u, y)
    if constraint is None:
        return float(np.linalg.norm(grad, axis=1).max()), 0.0
    lam = np.asarray(multipliers, dtype=float).reshape(ensemble.J, constraint.m)
    if isinstance(constraint, QuadraticConstraint):
        grad += lam * (constraint._apply(u) + constraint.b_vector)
    elif isinstance(constraint, LinearConstraint):
        grad += lam @ constraint.a_matrix
    else:
        for j in range(ensemble.J):
            grad[j] += constraint.jacobian(u[j]).T @ lam[j]
    feas = np.linalg.norm(constraint.evaluate_many(u), axis=1)
    return float(np.linalg.norm(grad, axis=1).max()), float(feas.max())


def diagnostics_row(t, dt, ensemble, multipliers, model, y, constraint, truth=None) -> DiagnosticsRow:
    if truth is None:
        e = spread(ensemble)
        r = float("nan")
    else:
        e, r = spread_and_residual(ensemble, truth)
    if constraint is None:
        c_mean = 0.0
    else:
        a_mean = constraint_on_mean(ensemble, constraint)
        c_mean = float(a_mean[0]) if a_mean.size == 1 else float(np.linalg.norm(a_mean))
    lam_min, lam_spread = multiplier_stats(multipliers)
    stat, feas = kkt_residual(ensemble, multipliers, model, y, constraint)
    return DiagnosticsRow(float(t), float(dt), e, r, misfit_from_data(ensemble, model, y),
                          c_mean, lam_min, lam_spread, stat, feas)
