import numpy as np
import pytest

from constrained_enkf.constraints import QuadraticConstraint, repair_ensemble, symmetry_constraint
from constrained_enkf.discrete import (_kalman_pieces, constrained_step, posterior_covariance, run_discrete,
                                      unconstrained_step)
from constrained_enkf.ensemble import Ensemble, sample_brownian_bridge
from constrained_enkf.forward import LinearForwardModel, assemble_elliptic_operator, grid, synthesize_observation
from constrained_enkf.multiplier import MultiplierError

from oracles import bisect_multiplier


def scalar_model():
    return LinearForwardModel([[1.0]], [[1.0]])


def symmetric_start(d, J, seed):
    u = sample_brownian_bridge(d, J, seed).members
    return Ensemble(0.5 * (u + u[:, ::-1]))


class TestUnconstrainedStep:
    def test_collapsed_unchanged(self):
        u = np.tile([0.3, -1.0, 2.0], (4, 1))
        m = assemble_elliptic_operator(3)
        out = unconstrained_step(Ensemble(u), m, np.ones(3))
        np.testing.assert_array_equal(out.members, u)

    def test_scalar_hand(self):
        out = unconstrained_step(Ensemble([[0.0], [2.0]]), scalar_model(), np.array([2.0]))
        np.testing.assert_allclose(out.members[:, 0], [1.0, 2.0])

    def test_matches_explicit_gain(self):
        rng = np.random.default_rng(0)
        g = rng.standard_normal((3, 4))
        m = LinearForwardModel(g, 0.5 * np.eye(3))
        u = rng.standard_normal((6, 4))
        y = rng.standard_normal(3)
        e = u - u.mean(0)
        w = e @ g.T
        gain = (e.T @ w / 6) @ np.linalg.inv(w.T @ w / 6 + 0.5 * np.eye(3))
        want = u + (y - u @ g.T) @ gain.T
        np.testing.assert_allclose(unconstrained_step(Ensemble(u), m, y).members, want, rtol=1e-10)

    def test_linear_constraint_preserved(self):
        d = 32
        m = assemble_elliptic_operator(d)
        obs = synthesize_observation(m, np.sin(3 * grid(d)), 0.01, seed=1)
        con = symmetry_constraint(d)
        ens = symmetric_start(d, 20, seed=2)
        for _ in range(20):
            ens = unconstrained_step(ens, obs.model, obs.y)
            assert np.abs(con.evaluate_many(ens.members)).max() <= 1e-8


class TestConstrainedStep:
    def test_linear_feasible_reduces_to_unconstrained(self):
        d = 16
        m = assemble_elliptic_operator(d)
        obs = synthesize_observation(m, np.sin(3 * grid(d)), 0.01, seed=1)
        ens = symmetric_start(d, 10, seed=3)
        step = constrained_step(ens, obs.model, obs.y, symmetry_constraint(d))
        np.testing.assert_allclose(step.multipliers, 0.0, atol=1e-8)
        np.testing.assert_allclose(step.ensemble_next.members, unconstrained_step(ens, obs.model, obs.y).members,
                                   atol=1e-10)

    def test_already_feasible_update(self):
        # A(u) = 1/2 u_2^2 - u_2 only sees the second component, which the update leaves at 2
        c = QuadraticConstraint(np.diag([0.0, 1.0]), [0.0, -1.0])
        ens = Ensemble([[0.0, 2.0], [2.0, 2.0]])
        step = constrained_step(ens, LinearForwardModel(np.eye(2), np.eye(2)), np.array([2.0, 2.0]), c)
        np.testing.assert_array_equal(step.multipliers, 0.0)
        np.testing.assert_allclose(step.ensemble_next.members, [[1.0, 2.0], [2.0, 2.0]])

    def test_scalar_quadratic_bisection(self):
        c = QuadraticConstraint([[1.0]], [-1.0])
        ens = Ensemble([[0.0], [2.0], [1.9]])
        y = np.array([3.0])
        step = constrained_step(ens, scalar_model(), y, c, tol=1e-13)
        blocks, chol, u_enkf = _kalman_pieces(ens, scalar_model(), y)
        p = posterior_covariance(blocks, chol)
        for j in range(3):
            want = bisect_multiplier(u_enkf[j], p, c.a_matrix, c.b_vector)
            np.testing.assert_allclose(step.multipliers[j], want, atol=1e-10)
        assert step.feasibility_residuals.max() <= 1e-13

    def test_stationarity_substitution(self):
        rng = np.random.default_rng(4)
        d = 6
        g = rng.standard_normal((4, d))
        m = LinearForwardModel(g, 0.3 * np.eye(4))
        a = np.diag([1.0, 1.0, 1.0, -1.0, -1.0, -1.0])
        c = QuadraticConstraint(a, rng.normal(0, 0.5, d))
        u = repair_ensemble(rng.standard_normal((9, d)), c, adjust_partner=True)
        y = rng.standard_normal(4)
        step = constrained_step(Ensemble(u), m, y, c)
        # u = u_EnKF + (D - C_uu) grad A(u) lambda with D = C_uw (C_ww + Gamma^-1)^-1 C_uw^T
        e = u - u.mean(0)
        w = e @ g.T
        cuu, cuw, cww = e.T @ e / 9, e.T @ w / 9, w.T @ w / 9
        k = cuw @ np.linalg.inv(cww + m.gamma_inv)
        u_enkf = u + (y - u @ g.T) @ k.T
        dmat = k @ cuw.T
        un = step.ensemble_next.members
        for j in range(9):
            grad = a @ un[j] + c.b_vector
            r = un[j] - u_enkf[j] - (dmat - cuu) @ grad * step.multipliers[j]
            assert np.linalg.norm(r) <= 1e-8
        assert step.feasibility_residuals.max() <= 1e-10

    def test_nonconvergence_identifies_member(self):
        c = QuadraticConstraint(np.eye(2), [0.0, 0.0])
        ens = Ensemble([[0.1, 0.0], [-0.1, 0.0], [0.0, 0.2]])
        with pytest.raises(MultiplierError) as info:
            constrained_step(ens, LinearForwardModel(np.eye(2), np.eye(2)), np.array([1.0, 1.0]), c,
                             lambda_max=1e3)
        assert len(info.value.members) > 0


class TestRunDiscrete:
    def test_symmetry_experiment_small(self):
        d = 64
        m = assemble_elliptic_operator(d)
        truth = np.sin(3 * grid(d))
        obs = synthesize_observation(m, truth, 0.01, seed=5)
        con = symmetry_constraint(d)
        rec = run_discrete(symmetric_start(d, 30, seed=6), obs.model, obs.y, obs.eta_norm_sq, con, truth=truth)
        assert rec.termination == "discrepancy"
        assert rec.column("kkt_feasibility").max() <= 1e-8
        assert rec.column("R")[-1] < rec.column("R")[0]

    def test_zero_steps(self):
        rec = run_discrete(Ensemble([[0.0], [2.0]]), scalar_model(), np.array([2.0]), 0.0, max_steps=0)
        assert len(rec) == 1 and rec.termination == "max_steps"
