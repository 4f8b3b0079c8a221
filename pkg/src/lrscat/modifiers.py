"""Principal-order modifier ingredients: volume factors, cutoffs and the symbol g_+/-."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import SingularHessian
from .flow import BETA1, BETA2
from .model import eval_p0, eval_v
from .wavemaps import DEFAULT_LIMITS, inverse_momentum


@dataclass(frozen=True)
class CutoffSpec:
    """Outer radius R0 and angular thresholds beta1 < beta2 of the cutoffs chi_+/-."""

    R0: float
    beta1: float = BETA1
    beta2: float = BETA2

    def __post_init__(self):
        if not self.R0 > 0:
            raise ValueError("R0 must be positive")
        if not -1.0 < self.beta1 < self.beta2 < 0.0:
            raise ValueError("need -1 < beta1 < beta2 < 0")

    @classmethod
    def for_model(cls, model, factor=4.0, **kw):
        return cls(factor * model.R, **kw)


def _step(s):
    return K.step01(float(s))[0]


def chi1(spec, x):
    """0 for |x| <= R0, 1 for |x| >= 2 R0."""
    return _step(np.linalg.norm(x) / spec.R0)


def chi2(model, energy):
    """1 on I3, 0 outside I4."""
    lo4, hi4 = model.interval(4)
    lo3, hi3 = model.interval(3)
    up = _step(1.0 + (energy - lo4) / (lo3 - lo4))
    down = _step(1.0 + (hi4 - energy) / (hi4 - hi3))
    return up * down


def chi3(spec, s):
    """0 for s <= beta1, 1 for s >= beta2."""
    return _step(1.0 + (s - spec.beta1) / (spec.beta2 - spec.beta1))


def _grad_x_psi(model, x, xi, sign, opts, guess=None):
    return inverse_momentum(model, x, xi, sign, opts, guess)


def _fd_step(v, base):
    return base * max(1.0, float(np.linalg.norm(v)))


def mixed_hessian_pm(model, x, xi, sign, opts=DEFAULT_LIMITS, h_scale=1.0):
    """d_x d_xi psi_+/- by Richardson-combined central differences of d_x psi in xi."""
    x = np.asarray(x, float)
    xi = np.asarray(xi, float)
    d = model.dimension
    if model.is_free:
        return np.eye(d)
    base = _grad_x_psi(model, x, xi, sign, opts)
    h = _fd_step(xi, 1e-4) * h_scale
    H = np.empty((d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = h

        def g(s):
            return _grad_x_psi(model, x, xi + s * e, sign, opts, base)

        d1 = (g(1.0) - g(-1.0)) / (2 * h)
        d2 = (g(0.5) - g(-0.5)) / h
        H[:, k] = (4.0 * d2 - d1) / 3.0
    return H


def theta_pm(model, x, xi, sign, opts=DEFAULT_LIMITS, h_scale=1.0):
    """det(d_x d_xi psi_+/-)^(1/2); the determinant must be positive."""
    det = float(np.linalg.det(mixed_hessian_pm(model, x, xi, sign, opts, h_scale)))
    if not np.isfinite(det) or det < 1e-12:
        raise SingularHessian(f"mixed Hessian of psi_{'+' if sign > 0 else '-'} has det {det:.3e}")
    return float(np.sqrt(det))


def transport_residual(model, x, xi, sign, opts=DEFAULT_LIMITS, h_scale=1.0):
    """|1/2 div_x[v(d_x psi)] Theta + v(d_x psi).grad_x Theta| by nested central FD.

    ``h_scale`` multiplies every FD step (inner Hessian and outer derivatives).
    """
    x = np.asarray(x, float)
    xi = np.asarray(xi, float)
    d = model.dimension
    zeta = _grad_x_psi(model, x, xi, sign, opts)
    v0 = eval_v(model, zeta)
    if model.is_free and model.p0_family == "quadratic":
        return 0.0
    h = _fd_step(x, 1e-3) * h_scale
    div = 0.0
    grad_theta = np.empty(d)
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        zp = _grad_x_psi(model, x + e, xi, sign, opts, zeta)
        zm = _grad_x_psi(model, x - e, xi, sign, opts, zeta)
        div += (eval_v(model, zp)[k] - eval_v(model, zm)[k]) / (2 * h)
        grad_theta[k] = (theta_pm(model, x + e, xi, sign, opts, h_scale)
                         - theta_pm(model, x - e, xi, sign, opts, h_scale)) / (2 * h)
    th = theta_pm(model, x, xi, sign, opts, h_scale)
    return float(abs(0.5 * div * th + v0 @ grad_theta))


def chi_pm(model, spec, x, xi, sign, opts=DEFAULT_LIMITS, zeta=None, guess=None):
    """chi_1(x/R0) chi_2(p0(xi)) chi_3(+/- cos(x, v(d_x psi_+/-(x, xi)))).

    ``zeta`` short-circuits the momentum inversion when d_x psi is already known;
    ``guess`` only warm-starts it.
    """
    x = np.asarray(x, float)
    xi = np.asarray(xi, float)
    a = chi1(spec, x)
    if a == 0.0:
        return 0.0
    b = chi2(model, eval_p0(model, xi))
    if b == 0.0:
        return 0.0
    if zeta is None:
        zeta = _grad_x_psi(model, x, xi, sign, opts, guess)
    v = eval_v(model, zeta)
    c = float(x @ v) / (np.linalg.norm(x) * np.linalg.norm(v))
    return a * b * chi3(spec, sign * c)


def grad_chi_pm(model, spec, x, xi, sign, opts=DEFAULT_LIMITS, guess=None):
    """Central FD gradient of chi_+/- in x (step 1e-5 max(1, |x|))."""
    x = np.asarray(x, float)
    d = model.dimension
    h = _fd_step(x, 1e-5)
    g = np.empty(d)
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        g[k] = (chi_pm(model, spec, x + e, xi, sign, opts, guess=guess)
                - chi_pm(model, spec, x - e, xi, sign, opts, guess=guess)) / (2 * h)
    return g


def g_principal(model, spec, x, xi, sign, opts=DEFAULT_LIMITS):
    """-i v(d_x psi_+/-(x, xi)) . d_x chi_+/-(x, xi)."""
    x = np.asarray(x, float)
    xi = np.asarray(xi, float)
    zeta = _grad_x_psi(model, x, xi, sign, opts)
    g = grad_chi_pm(model, spec, x, xi, sign, opts, guess=zeta)
    return complex(0.0, -float(eval_v(model, zeta) @ g))
