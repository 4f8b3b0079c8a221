import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrscat.errors import PreconditionError, SurfaceDegenerate, TruncationWarning
from lrscat.model import HamiltonianModel
from lrscat.modifiers import CutoffSpec
from lrscat.smatrix import (build_smatrix, build_surface, restrict_phase, rotation_deviation,
                            surface_invariance_check, surface_measure_oracle, unitarity_defect,
                            wrap_angle, y_grid, z_integral_check)


@settings(max_examples=100)
@given(a=st.floats(-1e3, 1e3))
def test_wrap_angle(a):
    w = float(wrap_angle(a))
    assert -math.pi <= w < math.pi
    k = (a - w) / (2 * math.pi)
    assert abs(k - round(k)) < 1e-9


@settings(max_examples=25, deadline=None)
@given(lam=st.floats(0.45, 0.55), N=st.integers(16, 200))
def test_quadratic_surface_measure(ref, lam, N):
    g = build_surface(ref, lam, N)
    assert abs(g.total_measure - 2 * math.pi) <= 1e-12
    np.testing.assert_allclose(np.linalg.norm(g.xi, axis=1), math.sqrt(2 * lam), rtol=1e-14)


def test_cosine_surface_against_quadrature():
    m = HamiltonianModel(p0_family="cosine")
    g = build_surface(m, 0.5, 64)
    assert np.all(g.weights > 0)
    ref = surface_measure_oracle(m, 0.5)
    assert abs(g.total_measure - ref) / ref < 1e-8


def test_cosine_band_edge_is_degenerate():
    m = HamiltonianModel(p0_family="cosine")
    with pytest.raises(SurfaceDegenerate):
        build_surface(m, 1e-3, 32)


def test_three_dimensional_quadratic_surface():
    m = HamiltonianModel(dimension=3)
    g = build_surface(m, 0.5, 12)
    # |v|^-1 dS over the sphere of radius 1 is 4 pi
    assert g.total_measure == pytest.approx(4 * math.pi, rel=1e-12)
    with pytest.raises(PreconditionError):
        build_surface(HamiltonianModel(dimension=3, p0_family="cosine"), 0.5, 8)


def test_free_restricted_phase(free_phase, free):
    grid = build_surface(free, 0.5, 16)
    r = restrict_phase(free_phase, grid, 7.5, 0.8)
    assert r.theta == 1.0
    assert r.eta_local == pytest.approx(0.8)
    assert r.psi == pytest.approx(7.5 * 0.8, abs=1e-12)
    assert r.deviation == pytest.approx(0.0, abs=1e-12)


def test_surface_invariance(ref_phase, ref):
    grid = build_surface(ref, 0.5, 8)
    dev = surface_invariance_check(ref_phase, grid, 12.0, 1.1, [-10.0, -1.0, 1.0, 10.0])
    assert dev < 1e-6


def test_restricted_deviation_decay(ref):
    # pre-asymptotic curvature below L ~ 1e2 biases the fit upward
    L = np.geomspace(1e2, 1e4, 5)
    dev = np.abs([rotation_deviation(ref, 0.5, l)[0] for l in L])
    slope = np.polyfit(np.log(L), np.log(dev), 1)[0]
    assert abs(slope - (1 - ref.mu)) <= 0.1


def test_chart_fast_path_matches_stationary_solve(ref_phase, ref):
    grid = build_surface(ref, 0.5, 8)
    r = restrict_phase(ref_phase, grid, 15.0, 0.3, with_theta=False)
    dev, _, Lc = rotation_deviation(ref, 0.5, r.L)
    assert Lc == pytest.approx(r.L, abs=1e-7)
    assert dev == pytest.approx(r.deviation, abs=1e-7)


def test_y_grid_taper():
    yp, L, tau = y_grid(32, 40.0, 256)
    assert yp[0] == -40.0 and yp.size == 256
    np.testing.assert_allclose(L, 32 / 80.0 * yp)
    assert np.all((tau >= 0) & (tau <= 1))
    assert np.all(tau[np.abs(yp) <= 36.0] == 1.0)


def test_unitarity_defect_of_unitary():
    Q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(6, 6)))
    assert unitarity_defect(Q) < 1e-14


def test_free_smatrix_small(free_phase, free):
    S = build_smatrix(free_phase, build_surface(free, 0.5, 32), 40.0, 512)
    assert np.max(np.abs(S.matrix - np.eye(32))) < 1e-8
    assert S.metadata["method"] == "rotation"


def test_reference_smatrix_structure(ref_phase, ref):
    grid = build_surface(ref, 0.5, 32)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        S = build_smatrix(ref_phase, grid, 30.0, 256)
    M = S.matrix
    # rotation invariance makes S circulant
    for k in range(1, 4):
        np.testing.assert_allclose(np.diag(M, k)[:-1], np.diag(M, k)[1:], atol=1e-12)
    assert S.unitarity_defect() < 0.5
    assert S.metadata["kappa"] == pytest.approx(32 / 60.0)


def test_truncation_warning(ref_phase, ref):
    with pytest.warns(TruncationWarning):
        build_smatrix(ref_phase, build_surface(ref, 0.5, 16), 5.0, 64)


def test_assembly_errors(ref_phase, ref):
    grid = build_surface(ref, 0.5, 16)
    with pytest.raises(ValueError):
        build_smatrix(ref_phase, grid, -1.0, 64)
    with pytest.raises(ValueError):
        build_smatrix(ref_phase, grid, 10.0, 64, method="bogus")


@pytest.mark.slow
def test_generic_path_agrees_with_rotation(ref_phase, ref):
    grid = build_surface(ref, 0.5, 8)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        a = build_smatrix(ref_phase, grid, 20.0, 128, method="rotation")
        b = build_smatrix(ref_phase, grid, 20.0, 128, method="generic", generic_samples=16)
    assert np.max(np.abs(a.matrix - b.matrix)) < 1e-2


def test_z_integral_reference(ref_phase, ref):
    spec = CutoffSpec.for_model(ref)
    z = z_integral_check(ref, spec, ref_phase, np.array([0.0, 30.0]), np.array([1.0, 0.0]))
    assert abs(z - 1j) < 1e-3


def test_z_integral_free_line(free_phase, free):
    spec = CutoffSpec(4.0)
    z = z_integral_check(free, spec, free_phase, np.array([0.0, 30.0]), np.array([1.0, 0.0]))
    assert abs(z - 1j) < 1e-3


def test_z_line_missing_the_shell(ref_phase, ref):
    spec = CutoffSpec.for_model(ref)
    with pytest.raises(PreconditionError):
        z_integral_check(ref, spec, ref_phase, np.array([0.0, 30.0]), np.array([1.0, 0.0]),
                         t_span=(-1.0, 1.0))
