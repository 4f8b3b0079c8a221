"""Scattering-map generating function psi(y, xi), volume factor Theta and checks.

The stationary system is solved in trajectory form. Unknowns are an interior
phase point (x, zeta). Its outgoing momentum must equal xi and its incoming
asymptotic position must equal y. Then eta = xi_-(x, zeta), and because both
eikonal phases equal x.zeta plus the limiting interaction action, psi reduces
to a_+ - a_- + y.eta.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .errors import NewtonDiverged, PreconditionError, SingularHessian
from .flow import integrate_flow
from .model import eval_p0, eval_v
from .wavemaps import DEFAULT_LIMITS, EikonalPhase, wave_map

SINGULAR_DET = 1e-12


@dataclass(frozen=True)
class StationaryOptions:
    tol: float = 1e-10
    max_iter: int = 40
    jac_rel_step: float = 1e-6
    homotopy_steps: int = 10
    accept: float = 1e-8


@dataclass(frozen=True)
class StationaryPoint:
    y: np.ndarray
    xi: np.ndarray
    x: np.ndarray
    eta: np.ndarray
    zeta: np.ndarray
    x_plus: np.ndarray
    a_plus: float
    a_minus: float
    residual_momentum: float
    residual_position: float
    iterations: int

    @property
    def residual(self):
        return max(self.residual_momentum, self.residual_position)


def _hstep(v, base=1e-4):
    return base * max(1.0, float(np.linalg.norm(v)))


def _richardson_jacobian(fun, z, h):
    """Central FD Jacobian with steps h and h/2 combined by Richardson.

    ``h`` is a scalar or one step per component; column k is d fun / d z_k.
    """
    z = np.asarray(z, float)
    h = np.broadcast_to(np.asarray(h, float), z.shape)
    cols = []
    for k in range(z.size):
        e = np.zeros(z.size)
        e[k] = h[k]
        d1 = (fun(z + e) - fun(z - e)) / (2 * h[k])
        d2 = (fun(z + 0.5 * e) - fun(z - 0.5 * e)) / h[k]
        cols.append((4.0 * d2 - d1) / 3.0)
    return np.column_stack(cols)


def _det_checked(A, what):
    det = float(np.linalg.det(A))
    if not np.isfinite(det) or abs(det) < SINGULAR_DET:
        raise SingularHessian(f"{what} is singular (det = {det:.3e})")
    return det


class ScatteringPhase:
    """psi(y, xi) evaluator with a warm-start cache of stationary points."""

    def __init__(self, model, opts=DEFAULT_LIMITS, solver=None):
        self.model = model
        self.opts = opts
        self.solver = solver or StationaryOptions()
        self.plus = EikonalPhase(model, 1, opts)
        self.minus = EikonalPhase(model, -1, opts)
        self._cache = {}
        self._lock = threading.Lock()

    # -- stationary system --------------------------------------------------
    def _system(self, model, z, y, xi):
        d = model.dimension
        x, zeta = z[:d], z[d:]
        wp = wave_map(model, x, zeta, 1, self.opts)
        wm = wave_map(model, x, zeta, -1, self.opts)
        return np.concatenate([wp.xi_pm - xi, wm.x_pm - y]), wp, wm

    def _jacobian(self, model, z, y, xi):
        d = model.dimension
        n = 2 * d
        J = np.empty((n, n))
        hx = self.solver.jac_rel_step * max(1.0, float(np.linalg.norm(z[:d])))
        hz = self.solver.jac_rel_step * max(1.0, float(np.linalg.norm(z[d:])))
        for k in range(n):
            h = hx if k < d else hz
            e = np.zeros(n)
            e[k] = h
            J[:, k] = (self._system(model, z + e, y, xi)[0]
                       - self._system(model, z - e, y, xi)[0]) / (2 * h)
        return J

    def _newton(self, model, z, y, xi, J=None):
        F, wp, wm = self._system(model, z, y, xi)
        res = float(np.linalg.norm(F))
        path = [res]
        scale = max(1.0, float(np.linalg.norm(y)))
        tol = self.solver.tol * scale
        accept = self.solver.accept * scale
        it = 0
        while res >= tol:
            if it >= self.solver.max_iter:
                break
            if J is None:
                J = self._jacobian(model, z, y, xi)
            try:
                step = np.linalg.solve(J, F)
            except np.linalg.LinAlgError as exc:
                raise NewtonDiverged("singular stationary-system Jacobian", res, path) from exc
            lam = 1.0
            for _ in range(20):
                cand = z - lam * step
                Fc, wpc, wmc = self._system(model, cand, y, xi)
                rc = float(np.linalg.norm(Fc))
                if np.isfinite(rc) and rc < res:
                    break
                lam *= 0.5
            else:
                if res < accept:
                    break
                raise NewtonDiverged("stationary Newton failed to reduce the residual", res, path)
            # refresh the Jacobian when the chord iteration slows down
            if lam < 1.0 or rc > 0.25 * res:
                J = None
            z, F, wp, wm, res = cand, Fc, wpc, wmc, rc
            path.append(res)
            it += 1
        if res >= accept:
            raise NewtonDiverged(f"stationary residual {res:.3e} above acceptance", res, path)
        return z, F, wp, wm, it, J

    def _key(self, y, xi):
        return tuple(np.round(np.concatenate([y, xi]), 6))

    def stationary_point(self, y, xi, guess=None, jacobian=None):
        """Solve for (x, eta, zeta) given (y, xi); see the module docstring."""
        m = self.model
        d = m.dimension
        y = np.asarray(y, float)
        xi = np.asarray(xi, float)
        if y.shape != (d,) or xi.shape != (d,):
            raise ValueError("y and xi must have the model dimension")
        lo, hi = m.interval(0)
        e = eval_p0(m, xi)
        if not lo <= e <= hi:
            raise PreconditionError(f"p0(xi) = {e:.6g} lies outside I = [{lo:.6g}, {hi:.6g}]")
        if m.is_free:
            return StationaryPoint(y.copy(), xi.copy(), y.copy(), xi.copy(), xi.copy(), y.copy(),
                                   0.0, 0.0, 0.0, 0.0, 0)
        if guess is None:
            guess = self._cache.get(self._key(y, xi))
        z0 = np.concatenate([y, xi]) if guess is None else np.asarray(guess, float)
        try:
            z, F, wp, wm, it, _ = self._newton(m, z0, y, xi, jacobian)
        except NewtonDiverged as first:
            if guess is not None:
                raise
            z, F, wp, wm, it = self._homotopy(y, xi, first)
        with self._lock:
            self._cache.setdefault(self._key(y, xi), z.copy())
        return StationaryPoint(y.copy(), xi.copy(), z[:d].copy(), wm.xi_pm.copy(), z[d:].copy(),
                               wp.x_pm.copy(), wp.action, wm.action,
                               float(np.linalg.norm(F[:d])), float(np.linalg.norm(F[d:])), it)

    def _homotopy(self, y, xi, first):
        """Continuation in the coupling constant from the free problem."""
        m = self.model
        z = np.concatenate([y, xi])
        n = self.solver.homotopy_steps
        total = 0
        try:
            for k in range(1, n + 1):
                mk = m if k == n else m.with_(coupling=m.coupling * k / n)
                z, F, wp, wm, it, _ = self._newton(mk, z, y, xi)
                total += it
        except NewtonDiverged as exc:
            raise NewtonDiverged(f"stationary solve failed directly ({first}) and under "
                                 f"coupling continuation ({exc})", exc.residual,
                                 first.path + exc.path) from exc
        return z, F, wp, wm, total

    # -- phase and derived quantities ------------------------------------------
    def psi(self, y, xi):
        sp = self.stationary_point(y, xi)
        return self.psi_from(sp)

    @staticmethod
    def psi_from(sp):
        return float(sp.a_plus - sp.a_minus + sp.y @ sp.eta)

    def _warm(self, y, xi):
        """Base stationary point plus a chord Jacobian for nearby solves."""
        sp = self.stationary_point(y, xi)
        z0 = np.concatenate([sp.x, sp.zeta])
        if self.model.is_free:
            return sp, z0, None
        return sp, z0, self._jacobian(self.model, z0, sp.y, sp.xi)

    def grad_y(self, y, xi):
        """Central FD of psi in y (step 1e-5 max(1, |y|))."""
        y = np.asarray(y, float)
        xi = np.asarray(xi, float)
        _, z0, J = self._warm(y, xi)
        h = 1e-5 * max(1.0, float(np.linalg.norm(y)))

        def f(q):
            return self.psi_from(self.stationary_point(q, xi, guess=z0, jacobian=J))

        return np.array([(f(y + h * e) - f(y - h * e)) / (2 * h) for e in np.eye(y.size)])

    def grad_xi(self, y, xi):
        """Central FD of psi in xi (step 1e-5 max(1, |xi|))."""
        y = np.asarray(y, float)
        xi = np.asarray(xi, float)
        _, z0, J = self._warm(y, xi)
        h = 1e-5 * max(1.0, float(np.linalg.norm(xi)))

        def f(q):
            return self.psi_from(self.stationary_point(y, q, guess=z0, jacobian=J))

        return np.array([(f(xi + h * e) - f(xi - h * e)) / (2 * h) for e in np.eye(xi.size)])

    def mixed_hessian(self, y, xi, sp=None):
        """d^2 psi / dy dxi (rows y, columns xi) as the FD xi-derivative of eta(y, xi)."""
        y = np.asarray(y, float)
        xi = np.asarray(xi, float)
        d = self.model.dimension
        if self.model.is_free:
            return np.eye(d)
        if sp is None:
            sp, z0, J = self._warm(y, xi)
        else:
            z0 = np.concatenate([sp.x, sp.zeta])
            J = self._jacobian(self.model, z0, y, xi)

        def eta_of(q):
            return self.stationary_point(y, q, guess=z0, jacobian=J).eta

        return _richardson_jacobian(eta_of, xi, _hstep(xi))

    def theta(self, y, xi):
        H = self.mixed_hessian(y, xi)
        return float(np.sqrt(abs(_det_checked(H, "mixed Hessian d_y d_xi psi"))))

    # -- checks -----------------------------------------------------------------
    def hessian_identity_check(self, y, xi):
        """Compare det of the (x, eta)-Hessian of -psi_+(x,xi) + psi_-(x,eta) - y.eta
        with (-1)^d det(dx dxi psi_-) det(dx dxi psi_+) / det(dy dxi psi)."""
        m = self.model
        d = m.dimension
        y = np.asarray(y, float)
        xi = np.asarray(xi, float)
        sp = self.stationary_point(y, xi)
        x, eta = sp.x, sp.eta
        guess_p, guess_m = sp.zeta, sp.zeta

        def grad_plus_x(q):
            return self.plus.evaluate(q, xi, guess=guess_p)[1]

        def grad_minus(q):
            # gradient of psi_- in (x, eta): (zeta_-, x_-)
            _, z0, wm = self.minus.evaluate(q[:d], q[d:], guess=guess_m)
            return np.concatenate([z0, wm.x_pm])

        def grad_plus_x_in_xi(q):
            return self.plus.evaluate(x, q, guess=guess_p)[1]

        q0 = np.concatenate([x, eta])
        hq = np.concatenate([np.full(d, _hstep(x)), np.full(d, _hstep(eta))])
        Hm = _richardson_jacobian(grad_minus, q0, hq)
        Hp_xx = _richardson_jacobian(grad_plus_x, x, _hstep(x))
        mixed_plus = _richardson_jacobian(grad_plus_x_in_xi, xi, _hstep(xi))
        # Hessian of Phi(x, eta) = -psi_+(x, xi) + psi_-(x, eta) - y.eta
        full = Hm.copy()
        full[:d, :d] -= Hp_xx
        full = 0.5 * (full + full.T)
        lhs = float(np.linalg.det(full))
        mixed_minus = Hm[d:, :d]
        Hy = self.mixed_hessian(y, xi, sp)
        det_y = _det_checked(Hy, "mixed Hessian d_y d_xi psi")
        rhs = (-1.0) ** d * float(np.linalg.det(mixed_minus)) * float(np.linalg.det(mixed_plus)) / det_y
        if abs(lhs) < SINGULAR_DET and abs(rhs) < SINGULAR_DET:
            raise SingularHessian("both sides of the Hessian identity vanish")
        rel = abs(lhs - rhs) / max(abs(lhs), abs(rhs))
        return lhs, rhs, float(rel)

    def shifted_points(self, y, xi, t_list):
        """Stationary points along y + t v(eta), warm-started by flowing (x, zeta)."""
        sp = self.stationary_point(y, xi)
        v = eval_v(self.model, sp.eta)
        out = []
        for t in t_list:
            t = float(t)
            if t == 0.0:
                out.append((0.0, sp))
                continue
            tr = integrate_flow(self.model, (sp.x, sp.zeta), t)
            guess = np.concatenate([tr.x[-1], tr.xi[-1]])
            out.append((t, self.stationary_point(sp.y + t * v, xi, guess=guess)))
        return sp, v, out

    def invariance_check(self, y, xi, t_list, adapted=True):
        """max_t |psi(y + t v(eta), xi) - psi(y, xi)|.

        With ``adapted`` the longitudinal term t v(eta).eta is removed, which is
        the same quantity measured in coordinates whose first axis follows v(eta)
        on the energy surface. The ambient difference equals that term exactly.
        """
        sp, v, pts = self.shifted_points(y, xi, t_list)
        base = self.psi_from(sp)
        dev = 0.0
        for t, q in pts:
            diff = self.psi_from(q) - base
            if adapted:
                diff -= t * float(v @ sp.eta)
            dev = max(dev, abs(diff))
        return dev


def stationary_point(phase, y, xi):
    return phase.stationary_point(y, xi)


def psi(phase, y, xi):
    return phase.psi(y, xi)


def theta(phase, y, xi):
    return phase.theta(y, xi)


def hessian_identity_check(phase, y, xi):
    return phase.hessian_identity_check(y, xi)


def invariance_check(phase, y, xi, t_list, adapted=True):
    return phase.invariance_check(y, xi, t_list, adapted)
