import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrscat.modifiers import (CutoffSpec, chi1, chi2, chi3, chi_pm, g_principal,
                              mixed_hessian_pm, theta_pm, transport_residual)


def rot(a):
    return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])


@pytest.fixture(scope="module")
def spec(ref):
    return CutoffSpec.for_model(ref)


def test_cutoff_spec_validation(ref):
    assert CutoffSpec.for_model(ref).R0 == pytest.approx(4.0 * ref.R)
    with pytest.raises(ValueError):
        CutoffSpec(-1.0)
    with pytest.raises(ValueError):
        CutoffSpec(1.0, beta1=-0.2, beta2=-0.5)


def test_free_volume_factor(free):
    x, xi = np.array([40.0, 3.0]), np.array([1.0, 0.05])
    assert theta_pm(free, x, xi, 1) == 1.0
    np.testing.assert_array_equal(mixed_hessian_pm(free, x, xi, -1), np.eye(2))
    assert transport_residual(free, x, xi, 1) == 0.0


def test_theta_plus_decay_along_ray(ref):
    xi = np.array([1.0, 0.05])
    s = np.geomspace(1e2, 1e4, 5)
    vals = [abs(theta_pm(ref, np.array([r, 0.0]), xi, 1) - 1.0) for r in s]
    slope = np.polyfit(np.log(s), np.log(vals), 1)[0]
    assert abs(slope + ref.mu) <= 0.1


@pytest.mark.parametrize("a", [0.4, 2.0, -1.3])
def test_theta_rotation_invariance(ref, a):
    x, xi = np.array([100.0, 0.0]), np.array([1.0, 0.05])
    R = rot(a)
    base = theta_pm(ref, x, xi, 1)
    assert theta_pm(ref, R @ x, R @ xi, 1) == pytest.approx(base, rel=1e-6)


def test_transport_residual_reference(ref):
    pts = [(np.array([30.0, 5.0]), np.array([1.0, 0.1])),
           (np.array([-20.0, 80.0]), np.array([-0.3, 0.95])),
           (np.array([150.0, -40.0]), np.array([0.9, -0.2]))]
    for x, xi in pts:
        assert transport_residual(ref, x, xi, 1) < 1e-3


@settings(max_examples=40, deadline=None)
@given(s=st.floats(-2.0, 2.0))
def test_angular_step_is_monotone_and_bounded(spec, s):
    v = chi3(spec, s)
    assert 0.0 <= v <= 1.0
    if s <= spec.beta1:
        assert v == 0.0
    if s >= spec.beta2:
        assert v == 1.0


def test_cutoff_supports(ref, spec):
    xi = np.array([1.0, 0.0])
    assert chi1(spec, [0.5 * spec.R0, 0.0]) == 0.0
    assert chi_pm(ref, spec, [0.5 * spec.R0, 0.0], xi, 1) == 0.0
    lo4 = ref.interval(4)[0]
    slow = np.array([np.sqrt(2 * (lo4 - 0.01)), 0.0])
    assert chi2(ref, 0.5 * slow @ slow) == 0.0
    assert chi_pm(ref, spec, [10 * spec.R0, 0.0], slow, 1) == 0.0
    assert chi_pm(ref, spec, [3 * spec.R0, 0.0], xi, 1) == pytest.approx(1.0)
    assert chi2(ref, 0.5) == 1.0


def test_g_principal_flat_regions(ref, spec):
    xi = np.array([1.0, 0.0])
    assert g_principal(ref, spec, [10 * spec.R0, 0.0], xi, 1) == 0
    assert g_principal(ref, spec, [0.5 * spec.R0, 0.0], xi, 1) == 0


def test_g_principal_in_angular_shell(ref, spec):
    # cos(x, v) near -1/2 lies between beta1 and beta2
    xi = np.array([np.cos(2.0), np.sin(2.0)])
    r = np.array([1e2, 1e3, 1e4])
    g = np.array([abs(g_principal(ref, spec, [s, 0.0], xi, 1)) for s in r])
    assert np.all(g > 0)
    scaled = g * r
    assert scaled.max() / scaled.min() < 2.0
