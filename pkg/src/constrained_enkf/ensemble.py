"""Ensemble container, empirical moments and covariance blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Ensemble:
    """J control vectors of dimension d, stored row-wise as a (J, d) array."""

    members: np.ndarray

    def __post_init__(self):
        members = np.array(self.members, dtype=float)
        if members.ndim == 1:
            members = members[:, None]
        if members.ndim != 2:
            raise ValueError(f"members must be a (J, d) array, got shape {members.shape}")
        if members.shape[0] < 2:
            raise ValueError("an ensemble needs at least two members")
        if members.shape[1] < 1:
            raise ValueError("control dimension must be at least one")
        if not np.all(np.isfinite(members)):
            raise ValueError("ensemble contains non-finite entries")
        members.setflags(write=False)
        object.__setattr__(self, "members", members)

    @property
    def J(self) -> int:
        return self.members.shape[0]

    @property
    def d(self) -> int:
        return self.members.shape[1]

    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    def deviations(self) -> np.ndarray:
        """Rows u^j - mean."""
        return self.members - self.mean()

    def __len__(self):
        return self.J


@dataclass(frozen=True)
class EnsembleStats:
    mean: np.ndarray
    energy: np.ndarray

    @property
    def covariance(self) -> np.ndarray:
        return self.energy - np.outer(self.mean, self.mean)


@dataclass(frozen=True)
class CovarianceBlocks:
    c_uu: np.ndarray
    c_uw: np.ndarray
    c_ww: np.ndarray


def compute_stats(ensemble: Ensemble) -> EnsembleStats:
    """Empirical mean (1/J) sum u^j and energy (1/J) sum u^j u^j^T."""
    u = ensemble.members
    mean = u.mean(axis=0)
    energy = u.T @ u / ensemble.J
    energy = 0.5 * (energy + energy.T)
    return EnsembleStats(mean=mean, energy=energy)


def _cross_covariance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    da = a - a.mean(axis=0)
    db = b - b.mean(axis=0)
    return da.T @ db / a.shape[0]


def covariance(members: np.ndarray) -> np.ndarray:
    """Symmetric empirical covariance with divisor J of a (J, d) array."""
    c = _cross_covariance(members, members)
    return 0.5 * (c + c.T)


def compute_covariance_blocks(ensemble: Ensemble, images) -> CovarianceBlocks:
    """Covariance blocks of the augmented state (u, G(u)).

    Parameters
    ----------
    ensemble : Ensemble
        Current members u^j.
    images : array_like, shape (J, K)
        Forward images G(u^j), one row per member.

    Returns
    -------
    CovarianceBlocks
        ``c_uu`` (d, d), ``c_uw`` (d, K) and ``c_ww`` (K, K), all with divisor J.
    """
    w = np.asarray(images, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    if w.shape[0] != ensemble.J:
        raise ValueError(f"got {w.shape[0]} images for {ensemble.J} members")
    u = ensemble.members
    return CovarianceBlocks(
        c_uu=covariance(u),
        c_uw=_cross_covariance(u, w),
        c_ww=covariance(w),
    )


def brownian_bridge_paths(d: int, J: int, rng: np.random.Generator) -> np.ndarray:
    """(J, d + 2) bridge paths on s_i = i / (d + 1), i = 0..d+1, both ends pinned at 0.

    Increments are N(0, h) with h = 1 / (d + 1); the random walk becomes a
    bridge by subtracting the linear interpolant of its terminal value.
    """
    h = 1.0 / (d + 1)
    increments = rng.standard_normal((J, d + 1)) * np.sqrt(h)
    walk = np.concatenate([np.zeros((J, 1)), np.cumsum(increments, axis=1)], axis=1)
    s = np.arange(d + 2) * h
    paths = walk - s[None, :] * walk[:, -1:]
    paths[:, 0] = 0.0
    paths[:, -1] = 0.0
    return paths


def sample_brownian_bridge(d: int, J: int, seed: int | np.random.Generator) -> Ensemble:
    """Draw J discrete Brownian bridges restricted to the d interior grid nodes.

    Same seed gives the same ensemble. The variance at relative position s
    is s(1 - s).
    """
    if d < 2 or J < 2:
        raise ValueError("need d >= 2 and J >= 2")
    rng = np.random.default_rng(seed)
    return Ensemble(brownian_bridge_paths(d, J, rng)[:, 1:-1])
