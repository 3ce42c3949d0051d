"""Scalar two-member system, its equilibria, the epsilon-regularised flow and 1D moment relations.

The two-member system (d = 1, J = 2) with A(u) = 1/2 h1 u^2 + h2 u reads

    u' = -C (b1 u + b2 + lambda (h1 u + h2)),     A(u) = 0
    v' = -C (b1 v + b2 + mu (h1 v + h2)),         A(v) = 0
    m1' = -C (b1 m1 + b2 + h1/2 (lambda u + mu v) + h2/2 (lambda + mu))
    m2' = -2 C (b1 m2 + b2 m1 + h1/2 (lambda u^2 + mu v^2) + h2/2 (lambda u + mu v))

with b1 = g gamma g, b2 = -g gamma y and C = m2 - m1^2.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .constraints import QuadraticConstraint, closest_quadratic_root
from .ensemble import Ensemble, covariance
from .forward import LinearForwardModel
from .multiplier import MultiplierError, MultiplierSystem

TRAJECTORY_COLUMNS = ("t", "u", "v", "lambda", "mu", "m1", "m2", "c_uv")


@dataclass(frozen=True)
class ScalarSystemParams:
    g: float = 1.0
    gamma: float = 1.0
    y: float = 3.0
    h1: float = 1.0
    h2: float = -1.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    @property
    def b1(self) -> float:
        return self.g * self.gamma * self.g

    @property
    def b2(self) -> float:
        return -self.g * self.gamma * self.y

    def constraint_value(self, u):
        return 0.5 * self.h1 * u * u + self.h2 * u

    def model(self) -> LinearForwardModel:
        return LinearForwardModel([[self.g]], [[1.0 / self.gamma]])

    def constraint(self) -> QuadraticConstraint:
        return QuadraticConstraint([[self.h1]], [self.h2])


@dataclass(frozen=True)
class CounterexampleState:
    u: float
    v: float
    lam: float = 0.0
    mu: float = 0.0
    m1: float | None = None
    m2: float | None = None

    def __post_init__(self):
        if self.m1 is None:
            object.__setattr__(self, "m1", 0.5 * (self.u + self.v))
        if self.m2 is None:
            object.__setattr__(self, "m2", 0.5 * (self.u**2 + self.v**2))

    @property
    def c_uv(self) -> float:
        return self.m2 - self.m1**2


@dataclass
class Trajectory:
    t: np.ndarray
    u: np.ndarray
    v: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    m1: np.ndarray
    m2: np.ndarray

    @property
    def c_uv(self) -> np.ndarray:
        return self.m2 - self.m1**2

    def state(self, i: int) -> CounterexampleState:
        return CounterexampleState(self.u[i], self.v[i], self.lam[i], self.mu[i], self.m1[i], self.m2[i])

    def rows(self):
        return zip(self.t, self.u, self.v, self.lam, self.mu, self.m1, self.m2, self.c_uv)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRAJECTORY_COLUMNS)
            for row in self.rows():
                writer.writerow([format(float(x), ".17g") for x in row])


def counterexample_rhs(params: ScalarSystemParams, state: CounterexampleState):
    """Right-hand sides (u', v', A(u), A(v), m1', m2') in moment form."""
    p = params
    c = state.c_uv
    u, v, lam, mu, m1, m2 = state.u, state.v, state.lam, state.mu, state.m1, state.m2
    du = -c * (p.b1 * u + p.b2 + lam * (p.h1 * u + p.h2))
    dv = -c * (p.b1 * v + p.b2 + mu * (p.h1 * v + p.h2))
    dm1 = -c * (p.b1 * m1 + p.b2 + 0.5 * p.h1 * (lam * u + mu * v) + 0.5 * p.h2 * (lam + mu))
    dm2 = -2 * c * (p.b1 * m2 + p.b2 * m1 + 0.5 * p.h1 * (lam * u**2 + mu * v**2)
                    + 0.5 * p.h2 * (lam * u + mu * v))
    return np.array([du, dv, p.constraint_value(u), p.constraint_value(v), dm1, dm2])


def integrate_counterexample(params: ScalarSystemParams, initial: CounterexampleState,
                             T: float, dt: float, tol: float = 1e-12,
                             max_iter: int = 50) -> Trajectory:
    """IMEX integration of the two-member system with a fixed step.

    The members use the same scheme as the ensemble solver. The redundant
    moments are advanced by their own equations with the multiplier terms
    taken at the new level; for m2 the factor 2u is discretised as
    u^n + u^{n+1}, which keeps m1, m2 equal to the member averages up to
    rounding.
    """
    p = params
    con = p.constraint()
    for w in (initial.u, initial.v):
        if abs(p.constraint_value(w)) > 1e-10:
            raise ValueError("initial members must be feasible")
    n_steps = int(round(T / dt))
    out = np.empty((n_steps + 1, 7))
    s = initial
    out[0] = (0.0, s.u, s.v, s.lam, s.mu, s.m1, s.m2)
    for n in range(1, n_steps + 1):
        c = s.m2 - s.m1**2
        x = np.array([s.u, s.v])
        x_e = x - dt * c * (p.b1 * x + p.b2)
        system = MultiplierSystem([[dt * max(c, 0.0)]], con)
        lam, x_new, _, ok = system.solve(x_e[:, None], np.array([s.lam, s.mu]), tol, max_iter)
        if not np.all(ok):
            raise MultiplierError(f"multiplier solve failed at t={n * dt:g}", np.flatnonzero(~ok))
        x_new = x_new[:, 0]
        incr = x_new - x  # = -dt c (b1 x + b2 + lam (h1 x_new + h2))
        m1 = s.m1 - dt * c * (p.b1 * s.m1 + p.b2 + 0.5 * p.h1 * (lam @ x_new) + 0.5 * p.h2 * lam.sum())
        m2 = s.m2 + 0.5 * np.sum((x + x_new) * incr)
        s = CounterexampleState(x_new[0], x_new[1], lam[0], lam[1], m1, m2)
        out[n] = (n * dt, s.u, s.v, s.lam, s.mu, s.m1, s.m2)
    return Trajectory(*out.T)


@dataclass(frozen=True)
class Equilibrium:
    u: float
    v: float
    lam: float
    mu: float
    m1: float
    m2: float
    c_uv: float
    branch: str  # "kkt" (both members at KKT points) or "collapsed" (C = 0)

    @property
    def state(self) -> CounterexampleState:
        return CounterexampleState(self.u, self.v, self.lam, self.mu, self.m1, self.m2)


def _quadratic_roots(a2, a1, a0):
    """Real roots of a2 x^2 + a1 x + a0, degree may drop."""
    if a2 == 0:
        if a1 == 0:
            return []
        return [-a0 / a1]
    disc = a1 * a1 - 4 * a2 * a0
    if disc < 0:
        return []
    sq = np.sqrt(disc)
    q = -0.5 * (a1 + np.copysign(sq, a1))
    roots = {q / a2}
    if q != 0:
        roots.add(a0 / q)
    return sorted(roots)


def member_kkt_points(params: ScalarSystemParams, notes: list | None = None):
    """All (u, lambda) with u = (b1 + h1 lambda)^{-1} (g gamma y - h2 lambda) and A(u) = 0.

    A(u(lambda)) (b1 + h1 lambda)^2 = (c - h2 lambda)(1/2 h1 c + h2 b1 + 1/2 h1 h2 lambda)
    with c = g gamma y, a quadratic in lambda.
    """
    p = params
    c = -p.b2
    # (c - h2 x)(k0 + k1 x)
    k0 = 0.5 * p.h1 * c + p.h2 * p.b1
    k1 = 0.5 * p.h1 * p.h2
    a2, a1, a0 = -p.h2 * k1, c * k1 - p.h2 * k0, c * k0
    if a2 == 0 and a1 == 0 and a0 == 0:
        if notes is not None:
            notes.append("constraint value vanishes for every multiplier; degenerate instance skipped")
        return []
    points = []
    for lam in _quadratic_roots(a2, a1, a0):
        den = p.b1 + p.h1 * lam
        if den == 0:
            if notes is not None:
                notes.append(f"lambda={lam:g}: b1 + h1 lambda = 0, branch skipped")
            continue
        points.append(((c - p.h2 * lam) / den, lam))
    return points


def equilibria(params: ScalarSystemParams, notes: list | None = None) -> list[Equilibrium]:
    """Equilibria of the two-member system.

    Every pair of member KKT points is an equilibrium; pairs with different
    multipliers have C = m2 - m1^2 > 0. The collapsed branch u = v at a
    feasible point is stationary for any multiplier and is reported with
    lambda = mu = 0.
    """
    p = params
    pts = member_kkt_points(p, notes)
    out = []
    for u, lam in pts:
        for v, mu in pts:
            m1 = 0.5 * (u + v)
            m2 = 0.5 * (u * u + v * v)
            out.append(Equilibrium(u, v, lam, mu, m1, m2, m2 - m1 * m1, "kkt"))
    feasible = {0.0}
    if p.h1 != 0:
        feasible.add(-2.0 * p.h2 / p.h1)
    for w in sorted(feasible):
        out.append(Equilibrium(w, w, 0.0, 0.0, w, w * w, 0.0, "collapsed"))
    return out


@dataclass
class PerturbedTrajectory:
    t: np.ndarray
    members: list = field(default_factory=list)
    multipliers: list = field(default_factory=list)


def singularly_perturbed_integrate(model: LinearForwardModel, y, constraint: QuadraticConstraint,
                                   initial: Ensemble, eps: float, T: float, dt: float,
                                   lam0=None) -> PerturbedTrajectory:
    """Integrate u' = -C (grad Phi + lambda grad A), eps lambda' = A(u).

    u is explicit (C, grad Phi and grad A at level n) and lambda implicit
    Euler: eps (lambda^{n+1} - lambda^n) = dt A(u^{n+1}(lambda^{n+1})). Since
    u^{n+1} is affine in lambda^{n+1}, this is a scalar quadratic per member;
    the root closest to lambda^n is taken.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    u = np.array(initial.members, dtype=float)
    lam = np.zeros(u.shape[0]) if lam0 is None else np.array(lam0, dtype=float)
    n_steps = int(round(T / dt))
    traj = PerturbedTrajectory(t=np.arange(n_steps + 1) * dt)
    traj.members.append(u.copy())
    traj.multipliers.append(lam.copy())
    for n in range(n_steps):
        c = covariance(u)
        p = u - dt * model.least_squares_gradient(u, y) @ c
        q = dt * (constraint._apply(u) + constraint.b_vector) @ c
        a_p = constraint.evaluate_many(p)[:, 0]
        grad_p = constraint._apply(p) + constraint.b_vector
        qaq = np.sum(q * constraint._apply(q), axis=1)
        a2 = -0.5 * dt * qaq
        a1 = eps + dt * np.sum(grad_p * q, axis=1)
        a0 = -eps * lam - dt * a_p
        lam_new = closest_quadratic_root(a2, a1, a0, lam)
        if np.any(np.isnan(lam_new)):
            raise MultiplierError(
                f"implicit multiplier update has no real root at t={n * dt:g}; "
                f"reduce dt (dt <= eps = {eps:g} is a safe choice)",
                np.flatnonzero(np.isnan(lam_new)))
        u = p - lam_new[:, None] * q
        lam = lam_new
        traj.members.append(u.copy())
        traj.multipliers.append(lam.copy())
    return traj


def moment_relation_residual(members, h1: float, h2: float) -> float:
    """|1/2 h1 m2 + h2 m1| for empirical moments of a 1D ensemble."""
    if h1 == 0:
        raise ValueError("h1 must be non-zero")
    u = np.asarray(members, dtype=float).ravel()
    return float(abs(0.5 * h1 * np.mean(u * u) + h2 * np.mean(u)))


def m1_bound(params: ScalarSystemParams, lambda1: float, lambda2: float, eps: float) -> float:
    """|K_eps / L_eps| with L_eps = eps h2 - b1 and K_eps = -b2 - h1/(2 eps) Lambda2 - h2 Lambda1."""
    p = params
    if eps <= 0:
        raise ValueError("eps must be positive")
    L = eps * p.h2 - p.b1
    if L >= 0:
        raise ValueError(f"need eps h2 - b1 < 0, got {L:g}")
    K = -p.b2 - p.h1 / (2.0 * eps) * lambda2 - p.h2 * lambda1
    return abs(K / L)
