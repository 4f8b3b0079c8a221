import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrscat.errors import CalibrationFailed, InvalidModel
from lrscat.model import (HamiltonianModel, PhasePoint, bracket, calibrate_R, eval_p, eval_p0,
                          eval_v, eval_VR, grad_x_p, grad_xi_p, poisson_double_bracket,
                          smooth_step)

from oracles import IsotropicQuadratic, fd_jacobian

finite = st.floats(-3.0, 3.0, allow_nan=False)


def family(name):
    # relativistic p0 >= 1, so its shell has to sit above 1
    band = (1.45, 1.55) if name == "relativistic" else (0.45, 0.55)
    return HamiltonianModel(p0_family=name, energy_interval=band)


def test_p0_families():
    assert eval_p0(HamiltonianModel(), [1.0, 0.0]) == pytest.approx(0.5, abs=1e-15)
    assert eval_p0(family("relativistic"), [0.0, 0.0]) == pytest.approx(1.0)
    assert eval_p0(family("cosine"), [math.pi, math.pi]) == pytest.approx(4.0)


def test_velocity_families():
    np.testing.assert_allclose(eval_v(HamiltonianModel(), [1.0, 2.0]), [1.0, 2.0])
    s = math.sqrt(26.0)
    np.testing.assert_allclose(eval_v(family("relativistic"), [3.0, 4.0]),
                               [3 / s, 4 / s], rtol=1e-14)
    np.testing.assert_allclose(eval_v(family("cosine"), [math.pi / 2, 0.0]),
                               [1.0, 0.0], atol=1e-15)


@pytest.mark.parametrize("fam", ["quadratic", "relativistic", "cosine"])
@settings(max_examples=40, deadline=None)
@given(xi=st.tuples(finite, finite))
def test_velocity_is_gradient_of_p0(fam, xi):
    m = family(fam)
    xi = np.array(xi)
    fd = fd_jacobian(lambda z: np.array([eval_p0(m, z)]), xi, 1e-6)[0]
    np.testing.assert_allclose(eval_v(m, xi), fd, atol=1e-8)


def test_cutoff_potential():
    m = HamiltonianModel(cutoff_radius=10.0)
    assert eval_VR(m, [5.0, 0.0]) == 0.0
    assert eval_VR(m, [30.0, 0.0]) == pytest.approx(0.1 * 901 ** -0.25, rel=1e-14)
    z = HamiltonianModel(potential_family="zero")
    assert eval_VR(z, [1.5, 0.3]) == 0.0


@settings(max_examples=60, deadline=None)
@given(r=st.floats(0.0, 50.0), ang=st.floats(0.0, 2 * math.pi), R=st.floats(0.5, 10.0))
def test_cutoff_support_and_monotone_step(r, ang, R):
    m = HamiltonianModel(cutoff_radius=R)
    x = r * np.array([math.cos(ang), math.sin(ang)])
    v = eval_VR(m, x)
    if r <= R:
        assert v == 0.0
    full = 0.1 * (1 + r * r) ** -0.25
    assert 0.0 <= v <= full + 1e-15
    if r >= 2 * R:
        assert v == pytest.approx(full, rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(0.0, 3.0), b=st.floats(0.0, 3.0))
def test_smooth_step_monotone(a, b):
    lo, hi = sorted((a, b))
    assert 0.0 <= smooth_step(lo) <= smooth_step(hi) <= 1.0


def test_symbol_plugin(ref):
    p = eval_p(ref, [30.0, 0.0], [1.0, 0.0])
    assert p == pytest.approx(0.5 + 0.1 * 901 ** -0.25, rel=1e-14)
    free = ref.with_(potential_family="zero")
    np.testing.assert_array_equal(grad_x_p(free, [3.0, 1.0], [1.0, 0.0]), 0.0)


@settings(max_examples=40, deadline=None)
@given(x=st.tuples(st.floats(-6, 6), st.floats(-6, 6)), xi=st.tuples(finite, finite))
def test_gradients_match_independent_oracle(ref, x, xi):
    x, xi = np.array(x), np.array(xi)
    o = IsotropicQuadratic(R=ref.R)
    np.testing.assert_allclose(grad_x_p(ref, x, xi), o.grad_V(x), atol=1e-13)
    np.testing.assert_allclose(grad_xi_p(ref, x, xi), xi, atol=1e-15)
    assert eval_p(ref, x, xi) == pytest.approx(o.p(x, xi), abs=1e-14)


def test_double_bracket_free():
    m = HamiltonianModel(potential_family="zero")
    xi = np.array([0.7, -0.4])
    assert poisson_double_bracket(m, [3.0, 2.0], xi) == pytest.approx(2 * xi @ xi, abs=1e-6)
    assert poisson_double_bracket(m, [3.0, 2.0], [0.0, 0.0]) == pytest.approx(0.0, abs=1e-6)


def test_double_bracket_reference_nested_fd(ref):
    # {{|x|^2, p}, p} = 2|xi|^2 - 2 x.grad V for p = |xi|^2/2 + V: the radial
    # bracket {|x|^2, p} = 2 x.xi, and {2 x.xi, p} = 2|xi|^2 - 2 x.grad V.
    o = IsotropicQuadratic(R=ref.R)
    x, xi = np.array([50.0, 0.0]), np.array([1.0, 0.0])
    h = 1e-4
    gx = np.array([(o.V(x + h * e) - o.V(x - h * e)) / (2 * h) for e in np.eye(2)])
    oracle = 2 * xi @ xi - 2 * x @ gx
    assert poisson_double_bracket(ref, x, xi) == pytest.approx(oracle, rel=1e-4)


def test_calibration_reference(ref):
    assert math.isfinite(ref.R) and ref.c5 > 0
    assert ref.c5 >= 0.5 * ref.c4 ** 2


def test_calibration_free_accepts_initial_radius():
    m = HamiltonianModel(potential_family="zero")
    res = calibrate_R(m, R_init=3.0)
    assert res.R == 3.0 and res.doublings == 0
    # the bracket is exactly 2|v|^2 on the shell; its minimum sits at the bottom of I5
    lo = m.interval(5)[0]
    assert res.c5 == pytest.approx(4 * lo, rel=1e-2)
    assert res.c5 >= 4 * lo * (1 - 1e-9)


def test_calibration_fails_for_huge_coupling():
    m = HamiltonianModel(coupling=1e6, mu=0.1)
    with pytest.raises(CalibrationFailed):
        calibrate_R(m, sample_count=512, max_doublings=3)


@pytest.mark.parametrize("kw", [dict(mu=1.2), dict(mu=0.0), dict(p0_family="bogus"),
                                dict(cutoff_radius=-1.0), dict(energy_interval=(1.0, 0.0))])
def test_invalid_models(kw):
    with pytest.raises(InvalidModel):
        HamiltonianModel(**kw)


def test_phase_point_and_bracket():
    p = PhasePoint([1.0, 2.0], [0.0, 1.0])
    np.testing.assert_array_equal(p.as_array(), [1, 2, 0, 1])
    with pytest.raises(ValueError):
        PhasePoint([1.0], [0.0, 1.0])
    assert bracket([3.0, 4.0]) == pytest.approx(math.sqrt(26.0))
