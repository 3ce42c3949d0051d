"""Equality constraints A(u) = 0 on the control."""

from __future__ import annotations

import numpy as np

RANK_RTOL = 1e-10


class RepairError(ValueError):
    """A pairwise repair hit a pair with no real root."""


class EqualityConstraint:
    """Base class: m constraint values and an (m, d) Jacobian."""

    m: int
    d: int

    def evaluate(self, u) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, u) -> np.ndarray:
        raise NotImplementedError

    def evaluate_many(self, members) -> np.ndarray:
        """Constraint values for each row of a (J, d) array, shape (J, m)."""
        return np.array([self.evaluate(u) for u in np.atleast_2d(members)])

    def _check(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.d:
            raise ValueError(f"expected control of dimension {self.d}, got {u.shape[-1]}")
        return u


class LinearConstraint(EqualityConstraint):
    """A(u) = A u with a full-row-rank (m, d) matrix."""

    def __init__(self, a_matrix):
        a = np.atleast_2d(np.asarray(a_matrix, dtype=float))
        self.m, self.d = a.shape
        if self.m > self.d:
            raise ValueError("need m <= d")
        sv = np.linalg.svd(a, compute_uv=False)
        if sv[-1] <= RANK_RTOL * sv[0]:
            raise ValueError("constraint matrix is not of full row rank")
        a.setflags(write=False)
        self.a_matrix = a

    def evaluate(self, u):
        return self.a_matrix @ self._check(u)

    def evaluate_many(self, members):
        return np.atleast_2d(members) @ self.a_matrix.T

    def jacobian(self, u):
        self._check(u)
        return self.a_matrix.copy()


class QuadraticConstraint(EqualityConstraint):
    """Scalar constraint A(u) = 1/2 u^T A u + u^T b with symmetric A."""

    m = 1

    def __init__(self, a_matrix, b_vector):
        a = np.asarray(a_matrix, dtype=float)
        b = np.asarray(b_vector, dtype=float).ravel()
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] != b.size:
            raise ValueError("a_matrix must be (d, d) and b_vector of length d")
        if not np.allclose(a, a.T, rtol=0, atol=1e-14 * max(1.0, np.abs(a).max())):
            raise ValueError("a_matrix must be symmetric")
        a = 0.5 * (a + a.T)
        a.setflags(write=False)
        b.setflags(write=False)
        self.a_matrix = a
        self.b_vector = b
        self.d = b.size
        diag = np.diag(a)
        self._diagonal = diag.copy() if np.count_nonzero(a - np.diag(diag)) == 0 else None

    def _apply(self, u):
        if self._diagonal is not None:
            return u * self._diagonal
        return u @ self.a_matrix

    def evaluate(self, u):
        u = self._check(u)
        return np.array([0.5 * u @ self._apply(u) + u @ self.b_vector])

    def evaluate_many(self, members):
        u = self._check(np.atleast_2d(members))
        return (0.5 * np.sum(u * self._apply(u), axis=1) + u @ self.b_vector)[:, None]

    def gradient(self, u) -> np.ndarray:
        """A u + b."""
        return self._apply(self._check(u)) + self.b_vector

    def jacobian(self, u):
        return self.gradient(u)[None, :]


def symmetry_constraint(d: int) -> LinearConstraint:
    """u_(k) - u_(d-k+1) = 0 for k = 1..d/2: mirror symmetry about the midpoint."""
    if d % 2:
        raise ValueError("symmetry pairing needs even d")
    half = d // 2
    a = np.zeros((half, d))
    idx = np.arange(half)
    a[idx, idx] = 1.0
    a[idx, d - 1 - idx] = -1.0
    return LinearConstraint(a)


def pairing_diagonal(d: int, convex: bool) -> np.ndarray:
    """Diagonal of I (convex) or diag(I, -I) (non-convex)."""
    diag = np.ones(d)
    if not convex:
        diag[d // 2:] = -1.0
    return diag


def quadratic_pairing_constraint(b_vector, convex: bool = True) -> QuadraticConstraint:
    b = np.asarray(b_vector, dtype=float)
    return QuadraticConstraint(np.diag(pairing_diagonal(b.size, convex)), b)


def licq_check(constraint: EqualityConstraint, u) -> bool:
    """True iff the Jacobian at u has full row rank m."""
    jac = np.atleast_2d(constraint.jacobian(u))
    sv = np.linalg.svd(jac, compute_uv=False)
    if sv.size < constraint.m or sv[0] == 0.0:
        return False
    return bool(sv[constraint.m - 1] > RANK_RTOL * sv[0])


def closest_quadratic_root(a, b, c, near):
    """Real root of a x^2 + b x + c = 0 closest to ``near`` (ties go to the larger root).

    Works elementwise on arrays; entries with a negative discriminant are NaN.
    """
    a, b, c, near = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, b, c, near)))
    disc = b * b - 4.0 * a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        sq = np.sqrt(disc)
        # numerically stable pair of roots
        q = -0.5 * (b + np.copysign(sq, b))
        r1 = q / a
        r2 = c / q
        linear = a == 0
        r1 = np.where(linear, -c / b, r1)
        r2 = np.where(linear, -c / b, r2)
        r2 = np.where(q == 0, r1, r2)
    hi = np.maximum(r1, r2)
    lo = np.minimum(r1, r2)
    pick = np.where(np.abs(hi - near) <= np.abs(lo - near), hi, lo)
    pick = np.where(disc < 0, np.nan, pick)
    return pick if pick.ndim else float(pick)


def repair_pairwise(u, constraint: QuadraticConstraint, adjust_partner: bool = False) -> np.ndarray:
    """Make u feasible for a pairing constraint by re-solving its first half.

    Component k <= d/2 is paired with d - k + 1 and solved from
    1/2 u_k^2 + b_k u_k = -(1/2 s_l u_l^2 + b_l u_l), s = diag(a_matrix), so
    every pair contributes zero. The root closest to the input is kept.

    With ``adjust_partner`` a pair without a real root has its partner
    component moved to the nearest value where a (double) root exists;
    otherwise a RepairError is raised.
    """
    u = np.array(constraint._check(u), dtype=float)
    d = constraint.d
    diag = np.diag(constraint.a_matrix)
    if d % 2 or constraint._diagonal is None:
        raise ValueError("pairwise repair needs even d and a diagonal a_matrix")
    half = d // 2
    if not (np.all(diag[:half] == 1.0) and np.all(np.abs(diag[half:]) == 1.0)):
        raise ValueError("pairwise repair expects a_matrix = I or diag(I, -I)")
    b = constraint.b_vector
    k = np.arange(half)
    ell = d - 1 - k
    s_l, b_k, b_l = diag[ell], b[k], b[ell]

    const = 0.5 * s_l * u[ell] ** 2 + b_l * u[ell]
    disc = b_k ** 2 - 2.0 * const
    bad = disc < 0
    if np.any(bad):
        if not adjust_partner:
            raise RepairError(f"no real root for pairs {np.flatnonzero(bad) + 1}")
        u_l = closest_quadratic_root(0.5 * s_l[bad], b_l[bad], -0.5 * b_k[bad] ** 2, u[ell][bad])
        if np.any(np.isnan(u_l)):
            raise RepairError("partner adjustment failed")
        u[ell[bad]] = u_l
        const = 0.5 * s_l * u[ell] ** 2 + b_l * u[ell]
        disc = b_k ** 2 - 2.0 * const
    disc = np.maximum(disc, 0.0)
    sq = np.sqrt(disc)
    hi, lo = -b_k + sq, -b_k - sq
    u[k] = np.where(np.abs(hi - u[k]) <= np.abs(lo - u[k]), hi, lo)

    # rounding polish on the steepest pair
    for _ in range(3):
        res = constraint.evaluate(u)[0]
        if abs(res) <= 1e-14:
            break
        slope = u[k] + b_k
        j = int(np.argmax(np.abs(slope)))
        if slope[j] == 0.0:
            break
        u[k[j]] -= res / slope[j]
    return u


def repair_ensemble(members, constraint: QuadraticConstraint, adjust_partner: bool = False) -> np.ndarray:
    return np.array([repair_pairwise(u, constraint, adjust_partner) for u in np.atleast_2d(members)])
