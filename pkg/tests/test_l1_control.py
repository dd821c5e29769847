"""Adaptive augmentation pieces: projection, predictor, estimator, filter."""

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import solve_ivp

from ccml1.l1_control import (L1Config, L1State, adaptation_step,
                              filter_step, predictor_rate, projection_map)

unit = st.floats(min_value=-1.0, max_value=1.0,
                 allow_nan=False, allow_infinity=False)


def _cfg(**kw):
    base = dict(state_dim=2, input_dim=1, bandwidth=40.0,
                adaptation_gain=1e5, unc_bound=0.5)
    base.update(kw)
    return L1Config(**base)


class TestConfig:
    def test_default_lyapunov_solution(self):
        cfg = _cfg()
        # pred_matrix defaults to -10 I and lyap_q to I, so P = I/20
        np.testing.assert_allclose(cfg.lyap_p, np.eye(2) / 20.0, atol=1e-12)
        resid = cfg.pred_matrix.T @ cfg.lyap_p \
            + cfg.lyap_p @ cfg.pred_matrix + cfg.lyap_q
        np.testing.assert_allclose(resid, 0.0, atol=1e-12)

    def test_custom_pred_matrix_lyapunov_residual(self):
        a = np.array([[-3.0, 1.0], [0.0, -5.0]])
        cfg = _cfg(pred_matrix=a)
        resid = a.T @ cfg.lyap_p + cfg.lyap_p @ a + cfg.lyap_q
        np.testing.assert_allclose(resid, 0.0, atol=1e-10)
        eigs = np.linalg.eigvalsh(0.5 * (cfg.lyap_p + cfg.lyap_p.T))
        assert eigs[0] > 0.0

    def test_non_hurwitz_predictor_rejected(self):
        with pytest.raises(ValueError):
            _cfg(pred_matrix=np.array([[1.0, 0.0], [0.0, -1.0]]))

    @pytest.mark.parametrize("field,value", [
        ("bandwidth", -1.0), ("adaptation_gain", 0.0), ("unc_bound", -0.1)])
    def test_positive_parameters_enforced(self, field, value):
        with pytest.raises(ValueError):
            _cfg(**{field: value})

    def test_clamp_radius_slightly_inflates_the_ball(self):
        cfg = _cfg(unc_bound=0.2, eps_proj=0.1)
        assert cfg.clamp_radius == pytest.approx(0.2 * np.sqrt(1.1))
        # stays below the 1.1x envelope the simulations are audited against
        assert cfg.clamp_radius <= 1.1 * 0.2


class TestProjection:
    def test_identity_inside_ball(self):
        theta = np.array([0.1, 0.0])
        raw = np.array([5.0, -3.0])
        np.testing.assert_array_equal(
            projection_map(theta, raw, radius=1.0, eps=0.1), raw)

    def test_identity_when_pointing_inward(self):
        theta = np.array([1.04, 0.0])  # inside the boundary layer
        raw = np.array([-2.0, 0.7])    # inward
        np.testing.assert_array_equal(
            projection_map(theta, raw, 1.0, 0.1), raw)

    def test_outward_component_removed_at_layer_edge(self):
        eps = 0.1
        radius = 1.0
        theta = np.array([np.sqrt(1.0 + eps), 0.0])  # f = 1 exactly
        raw = np.array([3.0, 1.5])
        out = projection_map(theta, raw, radius, eps)
        # radial part fully cancelled, tangential part untouched
        assert float(out @ theta) == pytest.approx(0.0, abs=1e-12)
        assert out[1] == pytest.approx(raw[1])

    @given(st.tuples(unit, unit), st.tuples(unit, unit),
           st.tuples(unit, unit))
    def test_defining_inequality(self, th, y, target):
        # for any target inside the ball, the deflected drive never points
        # farther from it than the raw drive does
        radius, eps = 0.8, 0.1
        theta = np.asarray(th) * 1.2   # may lie outside the layer
        raw = np.asarray(y) * 10.0
        t_in = np.asarray(target) * radius / np.sqrt(2.0)  # inside ball
        out = projection_map(theta, raw, radius, eps)
        lhs = float((theta - t_in) @ (out - raw))
        assert lhs <= 1e-12


class TestPredictor:
    def test_rate_formula(self):
        cfg = _cfg()
        drift = np.array([0.3, -0.1])
        b = np.array([[1.0], [2.0]])
        u = np.array([0.5])
        sig = np.array([-0.2])
        x_hat = np.array([1.0, 1.0])
        x = np.array([0.9, 1.2])
        rate = predictor_rate(cfg, drift, b, u, sig, x_hat, x)
        expect = drift + b @ (u + sig) + cfg.pred_matrix @ (x_hat - x)
        np.testing.assert_allclose(rate, expect, atol=1e-14)

    def test_state_start_and_error(self):
        st8 = L1State.start(np.array([1.0, -2.0]), input_dim=1)
        np.testing.assert_array_equal(st8.x_hat, [1.0, -2.0])
        np.testing.assert_array_equal(st8.sigma_hat, [0.0])
        np.testing.assert_array_equal(st8.u_adaptive, [0.0])
        np.testing.assert_array_equal(
            st8.prediction_error(np.array([0.5, -2.0])), [0.5, 0.0])


class TestAdaptation:
    def test_euler_step_direction_and_size(self):
        cfg = _cfg(adaptation_gain=100.0)
        state = L1State.start(np.zeros(2), 1)
        state.x_hat = np.array([0.01, 0.0])
        b = np.array([[1.0], [0.0]])
        adaptation_step(cfg, state, x=np.zeros(2), input_mat=b, dt=1e-3)
        # raw = -B^T P x_tilde = -(1/20)*0.01; estimate = dt*gain*raw
        assert state.sigma_hat[0] == pytest.approx(
            1e-3 * 100.0 * (-0.01 / 20.0))

    def test_estimate_never_leaves_clamp_ball(self):
        cfg = _cfg(adaptation_gain=1e8, unc_bound=0.3)
        state = L1State.start(np.zeros(2), 1)
        rng = np.random.default_rng(0)
        b = np.array([[1.0], [-2.0]])
        for _ in range(500):
            state.x_hat = rng.normal(scale=0.1, size=2)
            adaptation_step(cfg, state, x=np.zeros(2), input_mat=b, dt=1e-3)
            assert np.linalg.norm(state.sigma_hat) <= cfg.clamp_radius + 1e-12


class TestFilter:
    def test_matches_dense_ode_integration(self):
        # the step claims to be the exact hold discretization of
        # du/dt = -bandwidth * (u + sigma); check against an adaptive ODE
        # solve with tight tolerances
        cfg = _cfg(bandwidth=37.0)
        state = L1State.start(np.zeros(2), 1)
        state.sigma_hat = np.array([0.05])
        state.u_adaptive = np.array([0.02])
        sol = solve_ivp(lambda t, u: -37.0 * (u + 0.05), (0.0, 0.1),
                        [0.02], rtol=1e-12, atol=1e-14)
        filter_step(cfg, state, dt=0.1)
        assert state.u_adaptive[0] == pytest.approx(sol.y[0, -1], abs=1e-10)

    def test_steady_state_cancels_estimate(self):
        cfg = _cfg(bandwidth=50.0)
        state = L1State.start(np.zeros(2), 1)
        state.sigma_hat = np.array([0.3])
        for _ in range(200):
            filter_step(cfg, state, dt=0.01)
        assert state.u_adaptive[0] == pytest.approx(-0.3, abs=1e-9)

    @given(st.floats(min_value=1e-4, max_value=10.0))
    def test_unconditionally_stable(self, dt):
        # arbitrary step sizes keep the filter bounded (exact discretization)
        cfg = _cfg(bandwidth=200.0)
        state = L1State.start(np.zeros(2), 1)
        state.sigma_hat = np.array([1.0])
        for _ in range(50):
            filter_step(cfg, state, dt=dt)
            assert abs(state.u_adaptive[0]) <= 1.0 + 1e-12
