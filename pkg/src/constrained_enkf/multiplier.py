"""Scalar multiplier solve shared by the discrete update and the IMEX scheme.

Both updates have the form

    (I + s P A) u = u_e - s P b,      1/2 u^T A u + b^T u = 0,

with P symmetric positive semidefinite (the posterior covariance in the
discrete filter, dt * C_uu in the IMEX scheme) and s the scaled multiplier.
Factoring P = W W^T with W^T A W = diag(theta) gives

    u(s) = u_e - W z(s),   z_i(s) = s g_i / (1 + s theta_i),   g = W^T (A u_e + b)

    F(s) = A(u(s)) = A(u_e) - sum g_i^2 s / (1 + s theta_i)
                            + 1/2 sum theta_i g_i^2 s^2 / (1 + s theta_i)^2
    F'(s) = -sum g_i^2 / (1 + s theta_i)^3

so F is strictly decreasing on the pole-free interval around s = 0 and the
root there is unique.
"""

from __future__ import annotations

import numpy as np

from .constraints import LinearConstraint, QuadraticConstraint

EIG_RTOL = 1e-14


class MultiplierError(RuntimeError):
    """Multiplier root not found; the caller may retry with a smaller step."""

    def __init__(self, message, members=()):
        super().__init__(message)
        self.members = tuple(int(j) for j in members)


class MultiplierSystem:
    """Spectral form of (I + s P A)^{-1} for one preconditioner and one constraint."""

    def __init__(self, preconditioner, constraint: QuadraticConstraint):
        p = np.asarray(preconditioner, dtype=float)
        p = 0.5 * (p + p.T)
        self.constraint = constraint
        c, q = np.linalg.eigh(p)
        cmax = c.max(initial=0.0)
        keep = c > EIG_RTOL * cmax if cmax > 0 else np.zeros_like(c, dtype=bool)
        factor = q[:, keep] * np.sqrt(c[keep])
        if factor.shape[1]:
            k = factor.T @ constraint._apply(factor.T).T
            theta, v = np.linalg.eigh(0.5 * (k + k.T))
            self.W = factor @ v
        else:
            theta = np.zeros(0)
            self.W = factor
        self.theta = theta

    @property
    def rank(self) -> int:
        return self.theta.size

    def projections(self, u_explicit) -> np.ndarray:
        """g = W^T grad A(u_e), one row per point."""
        u = np.atleast_2d(u_explicit)
        grad = self.constraint._apply(u) + self.constraint.b_vector
        return grad @ self.W

    def residual(self, s, a0, g):
        """F(s) and F'(s) for arrays s (n,), a0 (n,), g (n, r)."""
        s = np.asarray(s, dtype=float)[:, None]
        den = 1.0 + s * self.theta
        g2 = g * g
        f = a0 - np.sum(g2 * s / den, axis=1) + 0.5 * np.sum(self.theta * g2 * s * s / den**2, axis=1)
        df = -np.sum(g2 / den**3, axis=1)
        return f, df

    def controls(self, u_explicit, s, g=None) -> np.ndarray:
        """u(s) for each point (rows) and scaled multiplier."""
        u = np.atleast_2d(np.asarray(u_explicit, dtype=float))
        if g is None:
            g = self.projections(u)
        s = np.broadcast_to(np.asarray(s, dtype=float), (u.shape[0],))[:, None]
        z = s * g / (1.0 + s * self.theta)
        return u - z @ self.W.T

    def pole_interval(self, g, s_max):
        """Open interval around 0 free of poles that matter for each point."""
        n = g.shape[0]
        lo = np.full(n, -s_max)
        hi = np.full(n, s_max)
        active = g * g > 0
        with np.errstate(divide="ignore"):
            poles = -1.0 / self.theta
        pos = (self.theta > 0) & active
        neg = (self.theta < 0) & active
        lo = np.maximum(lo, np.max(np.where(pos, poles, -np.inf), axis=1, initial=-np.inf))
        hi = np.minimum(hi, np.min(np.where(neg, poles, np.inf), axis=1, initial=np.inf))
        return lo, hi

    def solve(self, u_explicit, s_init=None, tol=1e-10, max_iter=50, s_max=1e6):
        """Find s with |A(u(s))| <= tol for every point.

        Safeguarded Newton inside a shrinking bracket, bisection whenever the
        Newton iterate leaves it. Returns (s, u, residuals, converged).
        """
        u_e = np.atleast_2d(np.asarray(u_explicit, dtype=float))
        n = u_e.shape[0]
        g = self.projections(u_e)
        a0 = self.constraint.evaluate_many(u_e)[:, 0]
        lo, hi = self.pole_interval(g, s_max)
        lo_open = lo > -s_max
        hi_open = hi < s_max

        # a closed end must already bracket the root, since F is monotone
        f_lo = np.where(lo_open, np.inf, self.residual(np.where(lo_open, 0.0, lo), a0, g)[0])
        f_hi = np.where(hi_open, -np.inf, self.residual(np.where(hi_open, 0.0, hi), a0, g)[0])
        bracketed = (f_lo >= -tol) & (f_hi <= tol)

        s = np.zeros(n) if s_init is None else np.array(np.broadcast_to(s_init, (n,)), dtype=float)
        outside = ~((s > lo) & (s < hi))
        s[outside] = np.where((lo[outside] < 0) & (hi[outside] > 0), 0.0, 0.5 * (lo[outside] + hi[outside]))

        done = np.abs(a0) <= tol
        s[done] = 0.0
        active = ~done & bracketed
        for _ in range(max_iter):
            if not np.any(active):
                break
            idx = np.flatnonzero(active)
            f, df = self.residual(s[idx], a0[idx], g[idx])
            ok = np.abs(f) <= tol
            done[idx[ok]] = True
            pos = f > 0
            lo[idx] = np.where(pos, s[idx], lo[idx])
            hi[idx] = np.where(pos, hi[idx], s[idx])
            with np.errstate(divide="ignore", invalid="ignore"):
                step = s[idx] - f / df
            inside = np.isfinite(step) & (step > lo[idx]) & (step < hi[idx])
            s_new = np.where(inside, step, 0.5 * (lo[idx] + hi[idx]))
            s[idx] = np.where(ok, s[idx], s_new)
            stalled = (hi[idx] - lo[idx]) <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(s[idx]))
            active[idx] = ~ok & ~stalled

        u = self.controls(u_e, s, g)
        res = self.constraint.evaluate_many(u)[:, 0]
        # polish against direct evaluation, which is what callers check
        for _ in range(3):
            bad = np.abs(res) > tol
            if not np.any(bad):
                break
            _, df = self.residual(s[bad], a0[bad], g[bad])
            with np.errstate(divide="ignore", invalid="ignore"):
                s_new = s[bad] - res[bad] / df
            s[bad] = np.where(np.isfinite(s_new), s_new, s[bad])
            u[bad] = self.controls(u_e[bad], s[bad], g[bad])
            res[bad] = self.constraint.evaluate_many(u[bad])[:, 0]
        converged = np.abs(res) <= tol
        return s, u, res, converged


def solve_scaled(preconditioner, u_explicit, constraint, s_init=None, tol=1e-10,
                 max_iter=50, s_max=1e6):
    """Solve the multiplier system for a batch of points; raise if any fails.

    Linear constraints take the closed-form least-squares multiplier
    (A P A^T) s = A u_e, which is zero for a feasible ensemble.
    Returns (s, u, residuals) with s of shape (n,) for scalar constraints
    and (n, m) for linear ones.
    """
    u_e = np.atleast_2d(np.asarray(u_explicit, dtype=float))
    if isinstance(constraint, LinearConstraint):
        p = np.asarray(preconditioner, dtype=float)
        a = constraint.a_matrix
        lhs = a @ p @ a.T
        rhs = u_e @ a.T
        s = np.linalg.lstsq(lhs, rhs.T, rcond=1e-12)[0].T
        u = u_e - s @ (a @ p)
        res = np.linalg.norm(constraint.evaluate_many(u), axis=1)
        return s, u, res
    if not isinstance(constraint, QuadraticConstraint):
        raise TypeError("multiplier solve supports linear and scalar quadratic constraints")
    system = MultiplierSystem(preconditioner, constraint)
    s, u, res, ok = system.solve(u_e, s_init, tol, max_iter, s_max)
    if not np.all(ok):
        bad = np.flatnonzero(~ok)
        raise MultiplierError(
            f"multiplier solve failed for members {bad.tolist()} "
            f"(max residual {np.abs(res[bad]).max():.3e})", bad)
    return s, u, res
