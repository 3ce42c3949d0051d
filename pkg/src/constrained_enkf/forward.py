"""Linear forward model: discretised -p'' + p = u on [0, pi] with p(0) = p(pi) = 0."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla


@dataclass(frozen=True)
class LinearForwardModel:
    """Observation map w = G u with data noise covariance gamma_inv.

    ``gamma`` is the precision (inverse noise covariance), used in the
    least-squares functional Phi(u, y) = 1/2 |gamma^(1/2) (y - G u)|^2.
    """

    g_matrix: np.ndarray
    gamma_inv: np.ndarray
    gamma: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.g_matrix, dtype=float))
        cov = np.atleast_2d(np.asarray(self.gamma_inv, dtype=float))
        if cov.shape != (g.shape[0], g.shape[0]):
            raise ValueError("gamma_inv must be (K, K) with K the number of rows of G")
        chol = sla.cho_factor(cov, lower=True)  # raises LinAlgError unless PD
        prec = sla.cho_solve(chol, np.eye(cov.shape[0]))
        prec = 0.5 * (prec + prec.T)
        for arr in (g, cov, prec):
            arr.setflags(write=False)
        object.__setattr__(self, "g_matrix", g)
        object.__setattr__(self, "gamma_inv", cov)
        object.__setattr__(self, "gamma", prec)

    @property
    def K(self) -> int:
        return self.g_matrix.shape[0]

    @property
    def d(self) -> int:
        return self.g_matrix.shape[1]

    @cached_property
    def precision_hessian(self) -> np.ndarray:
        """G^T Gamma G, the Hessian of Phi."""
        h = self.g_matrix.T @ self.gamma @ self.g_matrix
        return 0.5 * (h + h.T)

    def with_noise_covariance(self, gamma_inv) -> "LinearForwardModel":
        return LinearForwardModel(self.g_matrix, gamma_inv)

    def _check(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.d:
            raise ValueError(f"expected control of dimension {self.d}, got {u.shape[-1]}")
        return u

    def apply(self, u) -> np.ndarray:
        """G u; rows of a (J, d) array are mapped independently."""
        return self._check(u) @ self.g_matrix.T

    def phi(self, u, y) -> float | np.ndarray:
        r = np.asarray(y, dtype=float) - self.apply(u)
        return 0.5 * np.sum((r @ self.gamma) * r, axis=-1)

    def least_squares_gradient(self, u, y) -> np.ndarray:
        """-G^T Gamma (y - G u), row-wise for a (J, d) array."""
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.K:
            raise ValueError(f"expected observation of dimension {self.K}, got {y.shape[-1]}")
        r = y - self.apply(u)
        return -(r @ self.gamma) @ self.g_matrix


@dataclass(frozen=True)
class ObservationData:
    y: np.ndarray
    eta: np.ndarray
    noise_level: float
    model: LinearForwardModel

    @property
    def eta_norm_sq(self) -> float:
        return float(self.eta @ self.eta)


def grid(d: int) -> np.ndarray:
    """Interior nodes x_i = i pi / (d + 1), i = 1..d."""
    return np.arange(1, d + 1) * np.pi / (d + 1)


def elliptic_matrix(d: int) -> np.ndarray:
    """Central-difference matrix of -d^2/dx^2 + 1 with homogeneous Dirichlet ends."""
    h = np.pi / (d + 1)
    main = np.full(d, 2.0 / h**2 + 1.0)
    off = np.full(d - 1, -1.0 / h**2)
    return np.diag(main) + np.diag(off, 1) + np.diag(off, -1)


def assemble_elliptic_operator(d: int, gamma_inv=None) -> LinearForwardModel:
    """Dense G = L^{-1} for the elliptic operator on d interior nodes (K = d).

    ``gamma_inv`` defaults to the identity; observation synthesis replaces it.
    """
    if d < 2:
        raise ValueError("need at least two interior nodes")
    h = np.pi / (d + 1)
    # banded LU of the tridiagonal system, one solve per unit vector
    ab = np.zeros((3, d))
    ab[0, 1:] = -1.0 / h**2
    ab[1, :] = 2.0 / h**2 + 1.0
    ab[2, :-1] = -1.0 / h**2
    g = sla.solve_banded((1, 1), ab, np.eye(d))
    g = 0.5 * (g + g.T)
    if gamma_inv is None:
        gamma_inv = np.eye(d)
    return LinearForwardModel(g, gamma_inv)


def white_noise_covariance(K: int, gamma: float) -> np.ndarray:
    return gamma**2 * np.eye(K)


def synthesize_observation(model: LinearForwardModel, u_true, gamma: float,
                           seed: int | np.random.Generator) -> ObservationData:
    """y = G u_true + eta with eta ~ N(0, gamma^2 I).

    The returned ``model`` carries gamma_inv = gamma^2 I; for gamma = 0 the
    input model is kept, since a zero covariance has no precision.
    """
    if gamma < 0:
        raise ValueError("noise level must be non-negative")
    rng = np.random.default_rng(seed)
    eta = gamma * rng.standard_normal(model.K)
    y = model.apply(u_true) + eta
    noisy_model = model.with_noise_covariance(white_noise_covariance(model.K, gamma)) if gamma > 0 else model
    return ObservationData(y=y, eta=eta, noise_level=float(gamma), model=noisy_model)
