"""IMEX integration of the constrained ensemble Kalman flow.

Each member follows

    du_j/dt = -C_uu (grad Phi(u_j, y) + J_A(u_j)^T lambda_j),   A(u_j) = 0,

discretised with C_uu and grad Phi explicit at level n and the multiplier
term implicit at level n + 1:

    u_j^{n+1} = u_j^n - dt C_uu grad Phi(u_j^n) - dt lambda_j C_uu (A u_j^{n+1} + b).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace

import numpy as np

from .constraints import EqualityConstraint, LinearConstraint, QuadraticConstraint
from .diagnostics import RunRecord, diagnostics_row
from .ensemble import Ensemble, covariance
from .forward import LinearForwardModel
from .multiplier import MultiplierError, MultiplierSystem, solve_scaled

log = logging.getLogger(__name__)

STOP_RULES = ("discrepancy", "max_steps", "both")


class StepError(RuntimeError):
    """An IMEX step failed even after repeated step-size halving."""


@dataclass(frozen=True)
class SolverConfig:
    """Integrator settings.

    ``stop_rule``: "discrepancy" and "both" stop as soon as the misfit
    reaches the noise level, "max_steps" ignores it; ``max_steps`` is always
    a hard cap. ``dt_cap_initial`` replaces ``dt_max`` by 2/rho_0 from the
    initial ensemble; safe for long runs but slow, since rho decays like 1/t.
    """

    dt_safety: float = 0.9
    dt_max: float = np.inf
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    max_steps: int = 2000
    stop_rule: str = "discrepancy"
    lambda_max: float = 1e6
    max_halvings: int = 10
    power_tol: float = 1e-8
    power_max_iter: int = 500
    dt_cap_initial: bool = False

    def __post_init__(self):
        if not 0 < self.dt_safety <= 1:
            raise ValueError("dt_safety must lie in (0, 1]")
        if self.dt_max <= 0 or self.newton_tol <= 0 or self.lambda_max <= 0:
            raise ValueError("dt_max, newton_tol and lambda_max must be positive")
        if self.newton_max_iter < 1 or self.max_steps < 0 or self.max_halvings < 0:
            raise ValueError("iteration limits must be non-negative")
        if self.stop_rule not in STOP_RULES:
            raise ValueError(f"stop_rule must be one of {STOP_RULES}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class FilterState:
    t: float
    ensemble: Ensemble
    multipliers: np.ndarray
    dt_last: float = 0.0


def power_iteration(c_uu, hessian, tol=1e-8, max_iter=500, v0=None) -> float:
    """Spectral radius of C H for symmetric PSD C and symmetric PD H.

    C H is self-adjoint in the H inner product, so its eigenvalues are real
    and non-negative and the H-weighted Rayleigh quotient converges with
    squared rate.
    """
    c = np.asarray(c_uu, dtype=float)
    h = np.asarray(hessian, dtype=float)
    if v0 is None:
        v = np.random.default_rng(0).standard_normal(c.shape[0])
    else:
        v = np.array(v0, dtype=float)
    rho = 0.0
    for _ in range(max_iter):
        hv = h @ v
        w = c @ hv
        num = hv @ w
        den = v @ hv
        if den <= 0 or not np.isfinite(num):
            return 0.0
        rho_new = num / den
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(rho_new - rho) <= tol * abs(rho_new):
            return float(rho_new)
        rho = rho_new
    return float(rho)


def adaptive_dt(c_uu, model: LinearForwardModel, config: SolverConfig) -> float:
    """min(dt_max, dt_safety / rho(C_uu G^T Gamma G)); dt_max once rho < 1e-14.

    With rho < 1e-14 and no finite dt_max the data term is inert and a unit
    step is returned.
    """
    rho = power_iteration(c_uu, model.precision_hessian, config.power_tol, config.power_max_iter)
    if rho < 1e-14:
        return float(config.dt_max) if np.isfinite(config.dt_max) else 1.0
    return float(min(config.dt_max, config.dt_safety / rho))


def solve_multiplier(u_explicit, c_uu, constraint: QuadraticConstraint, dt: float,
                     lambda_init=0.0, config: SolverConfig = SolverConfig()):
    """Multiplier and new control for one member.

    Solves A(u) = 0 for u = (I + dt lambda C A)^{-1} (u_explicit - dt lambda C b).
    Returns (lambda, u_next). Raises MultiplierError when no root is found.
    """
    lam, u, _ = solve_scaled(dt * np.asarray(c_uu), u_explicit, constraint,
                             s_init=np.atleast_1d(lambda_init), tol=config.newton_tol,
                             max_iter=config.newton_max_iter, s_max=config.lambda_max)
    return float(lam[0]), u[0]


def _explicit_part(members, c, model, y, dt):
    grad = model.least_squares_gradient(members, y)
    with np.errstate(invalid="ignore", over="ignore"):
        u_e = members - dt * grad @ c
    if not np.all(np.isfinite(u_e)):
        raise StepError(f"non-finite explicit update (dt={dt:g}); "
                        "the ensemble has probably collapsed to rounding level")
    return u_e


def imex_step(state: FilterState, model: LinearForwardModel, y, constraint: EqualityConstraint | None,
              config: SolverConfig = SolverConfig(), shared_multiplier=None,
              dt: float | None = None) -> FilterState:
    """Advance every member by one IMEX step with an adaptive time step.

    Parameters
    ----------
    shared_multiplier : float or callable, optional
        Test hook: every member uses the same multiplier Lambda(t) >= 0 and
        the constraint is not enforced.
    dt : float, optional
        Fixed step; skips the spectral step-size rule.

    Raises
    ------
    StepError
        If the multiplier solve still fails after ``max_halvings`` halvings.
    """
    u = state.ensemble.members
    c = covariance(u)
    if dt is None:
        dt = adaptive_dt(c, model, config)
    if constraint is None:
        u_next = _explicit_part(u, c, model, y, dt)
        return FilterState(state.t + dt, Ensemble(u_next), state.multipliers, dt)

    if shared_multiplier is not None:
        lam = shared_multiplier(state.t) if callable(shared_multiplier) else shared_multiplier
        u_e = _explicit_part(u, c, model, y, dt)
        system = MultiplierSystem(dt * c, constraint)
        u_next = system.controls(u_e, lam)
        return FilterState(state.t + dt, Ensemble(u_next), np.full(state.ensemble.J, float(lam)), dt)

    lam_init = None
    if not isinstance(constraint, LinearConstraint):
        lam_init = np.asarray(state.multipliers, dtype=float).ravel()
    last_error = None
    for attempt in range(config.max_halvings + 1):
        u_e = _explicit_part(u, c, model, y, dt)
        try:
            lam, u_next, _ = solve_scaled(
                dt * c, u_e, constraint, s_init=lam_init,
                tol=config.newton_tol, max_iter=config.newton_max_iter,
                s_max=config.lambda_max)
        except MultiplierError as exc:
            last_error = exc
            log.debug("multiplier solve failed at t=%g dt=%g: %s", state.t, dt, exc)
            dt *= 0.5
            continue
        return FilterState(state.t + dt, Ensemble(u_next), lam, dt)
    raise StepError(f"IMEX step failed after {config.max_halvings} halvings: {last_error}")


def initial_multipliers(J: int, constraint: EqualityConstraint | None) -> np.ndarray:
    m = 1 if constraint is None else constraint.m
    return np.zeros((J, m)) if m > 1 else np.zeros(J)


def run_filter(initial: Ensemble, model: LinearForwardModel, y, eta_norm_sq: float,
               constraint: EqualityConstraint | None, config: SolverConfig = SolverConfig(),
               truth=None, metadata: dict | None = None, shared_multiplier=None,
               dt: float | None = None) -> RunRecord:
    """Integrate until the discrepancy principle holds or ``max_steps`` is reached.

    One diagnostics row is recorded for the initial state and one per
    accepted step. A failing step ends the run with termination "error" and
    keeps the rows recorded so far.
    """
    if eta_norm_sq < 0:
        raise ValueError("eta_norm_sq must be non-negative")
    if constraint is not None and shared_multiplier is None:
        feas = np.abs(constraint.evaluate_many(initial.members)).max()
        if feas > max(config.newton_tol, 1e-12):
            raise ValueError(f"initial ensemble is infeasible (max |A(u)| = {feas:.3e})")
    state = FilterState(0.0, initial, initial_multipliers(initial.J, constraint))
    meta = {"solver": config.to_dict()}
    if config.dt_cap_initial:
        rho0 = power_iteration(covariance(initial.members), model.precision_hessian,
                               config.power_tol, config.power_max_iter)
        if rho0 > 1e-14:
            config = replace(config, dt_max=min(config.dt_max, 2.0 / rho0))
        meta["dt_max_effective"] = config.dt_max
    meta.update(metadata or {})
    record = RunRecord(metadata=meta)
    record.append(diagnostics_row(0.0, 0.0, initial, state.multipliers, model, y, constraint, truth))
    check_discrepancy = config.stop_rule in ("discrepancy", "both")
    record.termination = "max_steps"
    for n in range(config.max_steps + 1):
        if check_discrepancy and record.rows[-1].misfit <= eta_norm_sq:
            record.termination = "discrepancy"
            break
        if n == config.max_steps:
            break
        try:
            state = imex_step(state, model, y, constraint, config, shared_multiplier, dt)
        except StepError as exc:
            record.termination = "error"
            record.error = str(exc)
            break
        record.append(diagnostics_row(state.t, state.dt_last, state.ensemble, state.multipliers,
                                      model, y, constraint, truth))
    record.final_ensemble = state.ensemble
    record.final_multipliers = state.multipliers
    record.metadata["steps"] = len(record.rows) - 1
    return record


def with_overrides(config: SolverConfig, **kwargs) -> SolverConfig:
    return replace(config, **{k: v for k, v in kwargs.items() if v is not None})
