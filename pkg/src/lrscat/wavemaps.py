"""Interaction-picture dynamics, classical wave maps and the eikonal phases psi_+/-.

Limits t -> +/-inf are taken in compactified time t = s (e^sigma - 1). Position
limits are computed against a reference characteristic from the origin whose
asymptotic momentum matches the trajectory's (``C_JOINT`` kernel): the state
carries the position offset Y = x - X - N delta and the phase offset, so no
large numbers are ever subtracted.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from . import _kernels as K
from .errors import (FixedPointDiverged, LimitNotConverged, NewtonDiverged,
                     StepSizeUnderflow)
from .flow import initial_state, run_kernel
from .hj import solver_for
from .model import eval_VR, grad_x_p

@dataclass(frozen=True)
class LimitOptions:
    rel_tol: float = 1e-12
    abs_tol: float = 1e-14
    tail_tol: float = 1e-12
    stop_tol: float = 1e-5
    max_doublings: int = 60
    sigma_max: float = 300.0
    max_steps: int = 200_000
    newton_tol: float = 1e-14
    fixed_point_tol: float = 1e-11
    fixed_point_max_iter: int = 200


DEFAULT_LIMITS = LimitOptions()


@dataclass(frozen=True)
class InteractionState:
    y: np.ndarray
    xi: np.ndarray
    t: float
    action: float


@dataclass(frozen=True)
class WaveMapResult:
    x_pm: np.ndarray
    xi_pm: np.ndarray
    sign: int
    t_stop: float
    tail_bound: float
    action: float = 0.0
    eta_ref: np.ndarray | None = field(default=None, repr=False)


# ---------------------------------------------------------------- kernel drivers

def _richardson(Q, r1, r2):
    """Two-level extrapolation from values at T, 2T, 4T with tail exponents r1 < r2."""
    f1 = 2.0 ** r1 - 1.0
    f2 = 2.0 ** r2 - 1.0
    R0 = Q[1] + (Q[1] - Q[0]) / f1
    R1 = Q[2] + (Q[2] - Q[1]) / f1
    return R1 + (R1 - R0) / f2, R1


def _limit(model, kind, y0, sign, mask, opts, fast=(), t_min=1e2):
    """Limit of a compactified-time integration.

    Components listed in ``fast`` have tails ~ t^(-1-mu) instead of t^(-mu).
    The kernel stops once the raw tail is below ``opts.stop_tol``; the state is
    then sampled at successive doublings of t and extrapolated until two
    consecutive extrapolants agree to ``opts.tail_tol``. Both tests are relative
    to max(1, |component|).  Stopping early keeps
    N ~ t small enough that roundoff in N delta stays negligible.
    """
    mask = np.asarray(mask, dtype=np.int64)
    mu = model.mu
    isfast = np.isin(mask, np.asarray(fast, dtype=np.int64))
    r1 = np.where(isfast, 1.0 + mu, mu)
    r2 = np.where(isfast, min(1.0 + 2.0 * mu, 2.0), min(2.0 * mu, 1.0))
    r2 = np.where(r2 <= r1, r1 + 0.5, r2)
    atol = np.full(y0.size, opts.abs_tol)
    aux = np.array([float(sign)])
    P = model.params
    # tolerances are relative to each component's size (positions scale with |x0|)
    scale = np.maximum(1.0, np.abs(np.asarray(y0, float)[mask]))
    y, _, sig, tail, status, _ = K.integrate_limit(
        kind, P, aux, np.ascontiguousarray(y0), opts.rel_tol, atol, mask, r1 * scale,
        max(opts.stop_tol, opts.tail_tol), opts.sigma_max, opts.max_steps)
    if status == K.UNDERFLOW or status == K.NONFINITE:
        raise StepSizeUnderflow(f"limit integration failed (status {status})")
    if status != K.OK:
        why = "step budget exhausted" if status == K.MAX_STEPS else f"status {status}"
        raise LimitNotConverged(f"limit integration stopped ({why}) with tail estimate "
                                f"{tail:.3e}, target {opts.stop_tol:.1e}")
    h = 1e-2
    if np.expm1(sig) < t_min:
        s_min = float(np.log1p(t_min))
        status, h, _ = K.integrate_to(kind, P, aux, y, sig, s_min, opts.rel_tol, atol,
                                      h, opts.max_steps)
        if status != K.OK:
            raise StepSizeUnderflow(f"limit integration failed (status {status})")
        sig = s_min
    scale = np.maximum(scale, np.abs(y[mask]))
    hist = [y.copy()]
    prev = None
    est = np.inf
    for _ in range(opts.max_doublings):
        s_next = float(np.log1p(2.0 * np.expm1(sig)))
        status, h, _ = K.integrate_to(kind, P, aux, y, sig, s_next, opts.rel_tol, atol,
                                      h, opts.max_steps)
        if status != K.OK:
            raise StepSizeUnderflow(f"limit integration failed (status {status})")
        sig = s_next
        hist.append(y.copy())
        if len(hist) < 3:
            continue
        Q = np.array(hist[-3:])[:, mask]
        R2, _ = _richardson(Q, r1, r2)
        if prev is not None:
            est = float(np.max(np.abs(R2 - prev) / scale))
            if est < opts.tail_tol:
                out = y.copy()
                out[mask] = R2
                return out, float(np.expm1(sig)), est
        prev = R2
    raise LimitNotConverged(f"extrapolated limit still moving by {est:.3e}")


def _t_min(x0):
    return 1e2 * float(np.sqrt(1.0 + np.dot(x0, x0)))


def asymptotic_momentum(model, x0, xi0, sign, opts=DEFAULT_LIMITS, jacobian=False):
    """xi_+/-(x0, xi0); with ``jacobian`` also d xi_+/- / d(x0, xi0) (d x 2d)."""
    d = model.dimension
    x0 = np.asarray(x0, float)
    xi0 = np.asarray(xi0, float)
    if model.is_free:
        return (xi0.copy(), np.hstack([np.zeros((d, d)), np.eye(d)])) if jacobian else xi0.copy()
    if jacobian:
        y0 = initial_state(d, x0, xi0, True, False)
        m = 2 * d
        rows = [m + r * m + c for r in range(d, m) for c in range(m)]
        yinf, _, _ = _limit(model, K.C_FLOW_JAC, y0, sign, list(range(d, m)) + rows, opts,
                            t_min=_t_min(x0))
        J = yinf[m:].reshape(m, m)
        return yinf[d:m].copy(), J[d:, :].copy()
    y0 = initial_state(d, x0, xi0)
    yinf, _, _ = _limit(model, K.C_FLOW, y0, sign, list(range(d, 2 * d)), opts,
                        t_min=_t_min(x0))
    return yinf[d:2 * d].copy()


class _RefCache:
    def __init__(self):
        self.data = {}
        self.lock = threading.Lock()


_REF = _RefCache()


def reference_momentum(model, xi_inf, sign, opts=DEFAULT_LIMITS, guess=None):
    """eta with Lambda_{+/-inf}(eta) = xi_inf for the characteristic from the origin."""
    d = model.dimension
    xi_inf = np.asarray(xi_inf, float)
    if model.is_free:
        return xi_inf.copy()
    key = (hash(model), sign, tuple(np.round(xi_inf, 5)))
    if guess is None:
        guess = _REF.data.get(key)
    eta = xi_inf.copy() if guess is None else np.array(guess, float)
    mask = list(range(d, 2 * d)) + list(range(2 * d + d * d, 2 * d + 2 * d * d))
    path = []
    for _ in range(30):
        y0 = np.concatenate([np.zeros(d), eta, np.zeros(d * d), np.eye(d).ravel()])
        yinf, _, _ = _limit(model, K.C_REF, y0, sign, mask, opts)
        F = yinf[d:2 * d] - xi_inf
        res = float(np.linalg.norm(F))
        path.append(res)
        if res < opts.newton_tol * max(1.0, float(np.linalg.norm(xi_inf))):
            break
        if len(path) > 3 and res >= path[-2]:
            # no further progress: integration noise floor reached
            break
        Dm = yinf[2 * d + d * d:].reshape(d, d)
        eta = eta - np.linalg.solve(Dm, F)
    else:
        raise NewtonDiverged("reference momentum did not converge", path[-1], path)
    if path[-1] > 1e-10:
        raise NewtonDiverged("reference momentum residual too large", path[-1], path)
    with _REF.lock:
        if len(_REF.data) > 200_000:
            _REF.data.clear()
        _REF.data.setdefault(key, eta.copy())
    return eta


def wave_map(model, x0, xi0, sign, opts=DEFAULT_LIMITS):
    """(x_+/-, xi_+/-) = lim y(t), xi(t) and the limiting interaction action offset."""
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    x0 = np.asarray(x0, float)
    xi0 = np.asarray(xi0, float)
    d = model.dimension
    if model.is_free:
        return WaveMapResult(x0.copy(), xi0.copy(), sign, 0.0, 0.0, 0.0, xi0.copy())
    xi_inf = asymptotic_momentum(model, x0, xi0, sign, opts)
    eta = reference_momentum(model, xi_inf, sign, opts)
    o = 2 * d + 2 * d * d
    y0 = np.concatenate([np.zeros(d), eta, np.zeros(d * d), np.eye(d).ravel(),
                         x0, xi0 - eta, [0.0]])
    mask = list(range(d, 2 * d)) + list(range(2 * d + d * d, o + 2 * d + 1))
    yinf, t_stop, tail = _limit(model, K.C_JOINT, y0, sign, mask, opts,
                                fast=list(range(o + d, o + 2 * d + 1)), t_min=_t_min(x0))
    x_pm = yinf[o:o + d].copy()
    xi_pm = yinf[d:2 * d] + yinf[o + d:o + 2 * d]
    return WaveMapResult(x_pm, xi_pm, sign, t_stop, tail, float(yinf[o + 2 * d]), eta)


def inverse_momentum(model, x, xi, sign, opts=DEFAULT_LIMITS, guess=None, history=None):
    """Fixed point of eta -> xi - (xi_+/-(x, eta) - eta); returns xi0."""
    x = np.asarray(x, float)
    xi = np.asarray(xi, float)
    if model.is_free:
        return xi.copy()
    eta = xi.copy() if guess is None else np.array(guess, float)
    steps = []
    for _ in range(opts.fixed_point_max_iter):
        new = xi - (asymptotic_momentum(model, x, eta, sign, opts) - eta)
        step = float(np.linalg.norm(new - eta))
        steps.append(step)
        eta = new
        if step < opts.fixed_point_tol:
            break
        if len(steps) > 8 and step > steps[-5] and step > 1e-8:
            raise FixedPointDiverged(f"fixed-point steps grow (last {step:.3e})")
        if not np.all(np.isfinite(eta)):
            raise FixedPointDiverged("fixed-point iterate left the finite range")
    else:
        raise FixedPointDiverged(f"no convergence after {len(steps)} iterations")
    if history is not None:
        history.extend(steps)
    return eta


def inverse_wave_map(model, x, xi, sign, opts=DEFAULT_LIMITS):
    """Returns (x, xi0) with xi_+/-(x, xi0) = xi."""
    return np.asarray(x, float).copy(), inverse_momentum(model, x, xi, sign, opts)


def invert_wave_map_full(model, x_pm, xi_pm, sign, opts=DEFAULT_LIMITS, tol=1e-10, max_iter=100):
    """(x0, xi0) with w_+/-(x0, xi0) = (x_pm, xi_pm).

    Position fixed point x <- x - (x_+/-(x, xi0(x)) - x_pm) wrapped around the
    momentum inversion at fixed x.
    """
    x_pm = np.asarray(x_pm, float)
    xi_pm = np.asarray(xi_pm, float)
    if model.is_free:
        return x_pm.copy(), xi_pm.copy()
    x = x_pm.copy()
    xi0 = None
    path = []
    for _ in range(max_iter):
        xi0 = inverse_momentum(model, x, xi_pm, sign, opts, guess=xi0)
        r = wave_map(model, x, xi0, sign, opts).x_pm - x_pm
        res = float(np.linalg.norm(r))
        path.append(res)
        if res < tol * max(1.0, float(np.linalg.norm(x_pm))):
            return x, xi0
        if len(path) > 8 and res > path[-5]:
            break
        x = x - r
    raise FixedPointDiverged(f"wave-map inversion stalled at residual {path[-1]:.3e}")


# ---------------------------------------------------------------- finite-time picture

def _direct(model, x0, xi0, t, rtol=1e-13):
    d = model.dimension
    y0 = initial_state(d, x0, xi0, False, True)
    s = run_kernel(model, K.FLOW_ACT, y0, [0.0, float(t)], rtol, rtol)[-1]
    return s[:d], s[d:2 * d], s[2 * d + 1]


def interaction_flow(model, x0, xi0, t):
    """y(t) = x(t) - d_xi phi(t, xi(t)) by subtraction from the direct flow.

    The action is the interaction-picture phase S_t(x0, xi(t)) - phi(t, xi(t)),
    where S_t = x0.xi0 + int (p - x.grad V_R) ds generates the full flow. Both
    terms are reduced by t p0(xi(t)) analytically (energy conservation), leaving
    t V_R - int x.grad V_R on each side.
    """
    x0 = np.asarray(x0, float)
    xi0 = np.asarray(xi0, float)
    if t == 0.0 or model.is_free:
        return InteractionState(x0.copy(), xi0.copy(), float(t), float(x0 @ xi0))
    x, xi, b = _direct(model, x0, xi0, t)
    c = solver_for(model).solve(t, xi, tol=1e-13, check_domain=False)
    own = t * eval_VR(model, x) + b
    ref = t * eval_VR(model, c.x) + c.virial
    return InteractionState(x - c.x, xi, float(t), float(x0 @ xi0 + own - ref))


def interaction_flow_q(model, x0, xi0, t, rtol=1e-12, atol=1e-12):
    """Secondary path: integrate the Hamilton equations of q(t, y, xi) directly."""
    x0 = np.asarray(x0, float)
    xi0 = np.asarray(xi0, float)
    d = model.dimension
    if t == 0.0 or model.is_free:
        return InteractionState(x0.copy(), xi0.copy(), float(t), float(x0 @ xi0))
    hj = solver_for(model)
    last = {"eta": None}

    def rhs(s, z):
        y, xi = z[:d], z[d:2 * d]
        if s == 0.0:
            D = np.zeros(d)
            H = np.zeros((d, d))
        else:
            c = hj.solve(s, xi, guess=last["eta"], tol=1e-13, check_domain=False)
            last["eta"] = c.eta
            D = c.x
            H = c.jacobian[:d, d:] @ np.linalg.inv(c.jacobian[d:, d:])
        gy = grad_x_p(model, y + D)
        gD = grad_x_p(model, D)
        q = eval_VR(model, y + D) - eval_VR(model, D)
        dy = H.T @ (gy - gD)
        return np.concatenate([dy, -gy, [q - y @ gy]])

    sol = solve_ivp(rhs, (0.0, float(t)), np.concatenate([x0, xi0, [x0 @ xi0]]),
                    method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise StepSizeUnderflow(sol.message)
    z = sol.y[:, -1]
    return InteractionState(z[:d], z[d:2 * d], float(t), float(z[2 * d]))


def psi_t(model, t, x, xi, guess=None):
    """Interaction generating function psi(t, x, xi): invert xi0 -> xi(t; x, xi0) by Newton."""
    x = np.asarray(x, float)
    xi = np.asarray(xi, float)
    if t == 0.0 or model.is_free:
        return float(x @ xi)
    xi0 = invert_final_momentum(model, t, x, xi, guess)
    return interaction_flow(model, x, xi0, t).action


def invert_final_momentum(model, t, x, xi, guess=None, tol=1e-13, max_iter=50):
    """xi0 with xi(t; x, xi0) = xi (inverse of L_t^x)."""
    d = model.dimension
    xi0 = np.array(xi if guess is None else guess, float)
    path = []
    for _ in range(max_iter):
        y0 = initial_state(d, x, xi0, True, False)
        s = run_kernel(model, K.FLOW_JAC, y0, [0.0, float(t)], 1e-13, 1e-13)[-1]
        F = s[d:2 * d] - xi
        res = float(np.linalg.norm(F))
        path.append(res)
        if res < tol:
            return xi0
        J = s[2 * d:].reshape(2 * d, 2 * d)
        xi0 = xi0 - np.linalg.solve(J[d:, d:], F)
    raise NewtonDiverged("L_t^x inversion did not converge", path[-1], path)


# ---------------------------------------------------------------- eikonal phases

def fd_step(x):
    return 1e-5 * max(1.0, float(np.linalg.norm(x)))


class EikonalPhase:
    """Evaluator for psi_+ (sign=+1) or psi_- (sign=-1)."""

    def __init__(self, model, sign, opts=DEFAULT_LIMITS):
        if sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")
        self.model = model
        self.sign = sign
        self.opts = opts

    def evaluate(self, x, xi, guess=None):
        """Returns (psi, xi0, wave map result) at (x, xi)."""
        x = np.asarray(x, float)
        xi = np.asarray(xi, float)
        xi0 = inverse_momentum(self.model, x, xi, self.sign, self.opts, guess)
        wm = wave_map(self.model, x, xi0, self.sign, self.opts)
        # first-order correction for the residual of the momentum inversion:
        # d/dxi psi = x_pm, so psi(x, xi) = psi(x, xi_pm) - x_pm.(xi_pm - xi)
        val = x @ xi0 + wm.action - wm.x_pm @ (wm.xi_pm - xi)
        return float(val), xi0, wm

    def value(self, x, xi):
        return self.evaluate(x, xi)[0]

    def grad_x(self, x, xi):
        """Characteristic gradient d_x psi = xi0."""
        return self.evaluate(x, xi)[1]

    def grad_xi(self, x, xi):
        """Characteristic gradient d_xi psi = x_+/-."""
        return self.evaluate(x, xi)[2].x_pm

    def fd_grad_x(self, x, xi):
        x = np.asarray(x, float)
        h = fd_step(x)
        return np.array([(self.value(x + h * e, xi) - self.value(x - h * e, xi)) / (2 * h)
                         for e in np.eye(x.size)])

    def fd_grad_xi(self, x, xi):
        x = np.asarray(x, float)
        xi = np.asarray(xi, float)
        h = fd_step(xi)
        return np.array([(self.value(x, xi + h * e) - self.value(x, xi - h * e)) / (2 * h)
                         for e in np.eye(xi.size)])


def psi_pm(model, x, xi, sign, opts=DEFAULT_LIMITS):
    return EikonalPhase(model, sign, opts).value(x, xi)


def grad_x_psi_pm(model, x, xi, sign, opts=DEFAULT_LIMITS):
    return EikonalPhase(model, sign, opts).fd_grad_x(x, xi)


def grad_xi_psi_pm(model, x, xi, sign, opts=DEFAULT_LIMITS):
    return EikonalPhase(model, sign, opts).fd_grad_xi(x, xi)
