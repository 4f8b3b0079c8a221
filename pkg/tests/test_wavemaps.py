import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrscat.errors import FixedPointDiverged, LimitNotConverged
from lrscat.model import eval_p, eval_p0
from lrscat.wavemaps import (EikonalPhase, asymptotic_momentum, interaction_flow,
                             interaction_flow_q, inverse_wave_map, invert_wave_map_full, psi_pm,
                             psi_t, wave_map)

from oracles import IsotropicQuadratic, brute_wave_map

X0 = np.array([10.0, 0.0])
XI0 = np.array([-1.0, 0.2])


@settings(max_examples=15, deadline=None)
@given(x=st.tuples(st.floats(-50, 50), st.floats(-50, 50)),
       xi=st.tuples(st.floats(-1, 1), st.floats(-1, 1)), t=st.floats(-1e3, 1e3))
def test_free_interaction_picture_is_static(free, x, xi, t):
    s = interaction_flow(free, x, xi, t)
    np.testing.assert_array_equal(s.y, x)
    np.testing.assert_array_equal(s.xi, xi)
    assert s.action == pytest.approx(np.dot(x, xi))
    w = wave_map(free, x, xi, 1)
    np.testing.assert_array_equal(w.x_pm, x)
    assert w.t_stop == 0.0


def test_zero_time_is_identity(ref):
    s = interaction_flow(ref, X0, XI0, 0.0)
    np.testing.assert_array_equal(s.y, X0)
    np.testing.assert_array_equal(s.xi, XI0)


def test_subtraction_matches_q_flow(ref):
    a = interaction_flow(ref, X0, XI0, 200.0)
    b = interaction_flow_q(ref, X0, XI0, 200.0)
    assert np.linalg.norm(a.y - b.y) < 1e-7
    assert np.linalg.norm(a.xi - b.xi) < 1e-7
    assert abs(a.action - b.action) < 1e-7


def test_wave_map_against_long_horizon_oracle(ref):
    o = IsotropicQuadratic(c=ref.coupling, mu=ref.mu, R=ref.R)
    Ts = (2e6, 4e6)
    ys = [brute_wave_map(o, X0, XI0, T) for T in Ts]
    # both tails decay like T^-mu; one Richardson step removes the leading term
    q = (Ts[1] / Ts[0]) ** -ref.mu
    x_ref = (ys[1][0] - q * ys[0][0]) / (1 - q)
    xi_ref = (ys[1][1] - q * ys[0][1]) / (1 - q)
    w = wave_map(ref, X0, XI0, 1)
    assert np.max(np.abs(w.x_pm - x_ref)) < 1e-6
    assert np.max(np.abs(w.xi_pm - xi_ref)) < 1e-6
    assert w.tail_bound < 1e-9


def test_asymptotic_energy_is_conserved(ref):
    w = wave_map(ref, X0, XI0, 1)
    assert eval_p0(ref, w.xi_pm) == pytest.approx(eval_p(ref, X0, XI0), abs=1e-10)
    np.testing.assert_allclose(asymptotic_momentum(ref, X0, XI0, 1), w.xi_pm, atol=1e-10)


def test_momentum_jacobian_of_limit(ref):
    xi, J = asymptotic_momentum(ref, X0, XI0, 1, jacobian=True)
    h = 1e-6
    for k in range(4):
        e = np.zeros(4)
        e[k] = h
        up = asymptotic_momentum(ref, X0 + e[:2], XI0 + e[2:], 1)
        dn = asymptotic_momentum(ref, X0 - e[:2], XI0 - e[2:], 1)
        np.testing.assert_allclose(J[:, k], (up - dn) / (2 * h), atol=1e-5)


def test_free_inverse_one_step(free):
    x, xi0 = inverse_wave_map(free, [3.0, 1.0], [0.2, 0.9], 1)
    np.testing.assert_array_equal(xi0, [0.2, 0.9])


def test_inverse_round_trip(ref):
    x, xi = np.array([100.0, 0.0]), np.array([1.0, 0.05])
    _, xi0 = inverse_wave_map(ref, x, xi, 1)
    np.testing.assert_allclose(asymptotic_momentum(ref, x, xi0, 1), xi, atol=1e-10)
    x0, xi0 = invert_wave_map_full(ref, x, xi, 1)
    w = wave_map(ref, x0, xi0, 1)
    np.testing.assert_allclose(w.x_pm, x, atol=1e-8)
    np.testing.assert_allclose(w.xi_pm, xi, atol=1e-9)


def test_inverse_reports_failure_near_caustic(ref):
    # a nearly resting particle at the origin is trapped; the limit does not exist
    with pytest.raises((FixedPointDiverged, LimitNotConverged)):
        inverse_wave_map(ref, [0.0, 0.0], [1e-4, 0.0], 1)


def test_psi_t_base_cases(ref, free):
    x, xi = np.array([20.0, 3.0]), np.array([1.0, 0.1])
    assert psi_t(ref, 0.0, x, xi) == pytest.approx(x @ xi)
    assert psi_t(free, 50.0, x, xi) == pytest.approx(x @ xi)


def test_psi_pm_free(free):
    assert psi_pm(free, [4.0, -2.0], [0.5, 0.5], 1) == pytest.approx(1.0)
    assert psi_pm(free, [4.0, -2.0], [0.5, 0.5], -1) == pytest.approx(1.0)


@pytest.mark.parametrize("sign", [1, -1])
def test_eikonal_residual(ref, sign):
    x, xi = np.array([sign * 50.0, 0.0]), np.array([1.0, 0.05])
    ph = EikonalPhase(ref, sign)
    g = ph.fd_grad_x(x, xi)
    assert abs(eval_p(ref, x, g) - eval_p0(ref, xi)) < 1e-6
    # FD and characteristic gradients agree
    np.testing.assert_allclose(g, ph.grad_x(x, xi), atol=1e-7)
    np.testing.assert_allclose(ph.fd_grad_xi(x, xi), ph.grad_xi(x, xi), atol=1e-5)


def test_invalid_sign(ref):
    with pytest.raises(ValueError):
        wave_map(ref, X0, XI0, 0)
    with pytest.raises(ValueError):
        EikonalPhase(ref, 2)
