"""Free-frame Hamilton-Jacobi solution phi(t, xi) built by characteristics from the origin."""

from __future__ import annotations

import functools
import threading
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import NewtonDiverged, PreconditionError
from .flow import initial_state, run_kernel
from .model import eval_p0, eval_VR


@dataclass(frozen=True)
class NewtonOptions:
    tol: float = 1e-10
    max_iter: int = 50
    rel_tol: float = 1e-12
    abs_tol: float = 1e-12


@dataclass(frozen=True)
class CharacteristicPoint:
    """Characteristic from (0, eta) evaluated at time t."""

    t: float
    eta: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    jacobian: np.ndarray
    action: float
    virial: float
    residual: float
    iterations: int


class HJSolution:
    """phi(t, xi) = u(t, Lambda_t^{-1} xi) with a warm-start cache.

    The cache only stores Newton starting points on a quantized (t, xi) lattice,
    so results never depend on whether a lookup hit.
    """

    def __init__(self, model, options=None, quantum=1e-6):
        self.model = model
        self.options = options or NewtonOptions()
        self.quantum = quantum
        self._guess = {}
        self._lock = threading.Lock()

    # -- characteristics -------------------------------------------------
    def _shoot(self, t, eta, jac=True):
        d = self.model.dimension
        y0 = initial_state(d, np.zeros(d), eta, jac, True)
        kind = K.FLOW_JAC_ACT if jac else K.FLOW_ACT
        o = self.options
        s = run_kernel(self.model, kind, y0, [0.0, float(t)], o.rel_tol, o.abs_tol)[-1]
        x, xi = s[:d], s[d:2 * d]
        off = 2 * d
        J = None
        if jac:
            J = s[off:off + 4 * d * d].reshape(2 * d, 2 * d)
            off += 4 * d * d
        return x, xi, J, s[off], s[off + 1]

    def _key(self, t, xi):
        q = self.quantum
        return (round(t / q), tuple(np.round(np.asarray(xi) / q).astype(np.int64)))

    def solve(self, t, xi, guess=None, tol=None, check_domain=True):
        """Newton solve of Lambda_t(eta) = xi; returns a CharacteristicPoint."""
        xi = np.asarray(xi, dtype=float)
        m = self.model
        if check_domain:
            lo, hi = m.interval(4)
            e = eval_p0(m, xi)
            if not lo <= e <= hi:
                raise PreconditionError(f"p0(xi) = {e:.6g} lies outside I4 = [{lo:.6g}, {hi:.6g}]")
        tol = self.options.tol if tol is None else tol
        key = self._key(t, xi)
        if guess is None:
            guess = self._guess.get(key)
        eta = xi.copy() if guess is None else np.array(guess, dtype=float)
        d = m.dimension
        x, xt, J, u, b = self._shoot(t, eta)
        F = xt - xi
        res = float(np.linalg.norm(F))
        path = [res]
        it = 0
        while res >= tol:
            if it >= self.options.max_iter:
                raise NewtonDiverged(f"Lambda_t inversion stalled at residual {res:.3e}", res, path)
            try:
                step = np.linalg.solve(J[d:, d:], F)
            except np.linalg.LinAlgError as exc:
                raise NewtonDiverged("singular momentum Jacobian", res, path) from exc
            lam = 1.0
            for _ in range(30):
                cand = eta - lam * step
                xc, xtc, Jc, uc, bc = self._shoot(t, cand)
                rc = float(np.linalg.norm(xtc - xi))
                if rc < res or rc < tol:
                    break
                lam *= 0.5
            else:
                raise NewtonDiverged("damped Newton step failed to reduce the residual", res, path)
            eta, x, xt, J, u, b = cand, xc, xtc, Jc, uc, bc
            F = xt - xi
            res = rc
            path.append(res)
            it += 1
        with self._lock:
            self._guess.setdefault(key, eta.copy())
        return CharacteristicPoint(float(t), eta, x, xt, J, float(u), float(b), res, it)

    # -- public evaluators -----------------------------------------------
    def phi(self, t, xi):
        if t == 0.0:
            return 0.0
        return t * eval_p0(self.model, xi) + self.phi_minus_free(t, xi)

    def phi_minus_free(self, t, xi):
        """phi(t, xi) - t p0(xi) = t V_R(x(t)) - int_0^t x.grad V_R ds (no cancellation)."""
        if t == 0.0:
            return 0.0
        c = self.solve(t, xi, tol=1e-13)
        return t * eval_VR(self.model, c.x) + c.virial

    def grad_phi(self, t, xi):
        if t == 0.0:
            return np.zeros(self.model.dimension)
        return self.solve(t, xi, tol=1e-13).x.copy()

    def hess_phi(self, t, xi):
        """d^2 phi / d xi^2 = (dx/deta)(dxi/deta)^{-1} along the characteristic."""
        d = self.model.dimension
        if t == 0.0:
            return np.zeros((d, d))
        J = self.solve(t, xi, tol=1e-13).jacobian
        return J[:d, d:] @ np.linalg.inv(J[d:, d:])


@functools.lru_cache(maxsize=32)
def solver_for(model):
    return HJSolution(model)


def action_u(model, t, eta):
    """u(t, eta): integral of p - x.grad V_R along the characteristic from (0, eta)."""
    if t == 0.0:
        return 0.0
    return solver_for(model)._shoot(t, np.asarray(eta, float), jac=False)[3]


def lambda_map(model, t, eta):
    if t == 0.0:
        return np.array(eta, dtype=float)
    return solver_for(model)._shoot(t, np.asarray(eta, float), jac=False)[1]


def invert_lambda(model, t, xi, guess=None, tol=1e-10):
    if t == 0.0:
        return np.array(xi, dtype=float)
    return solver_for(model).solve(t, xi, guess=guess, tol=tol).eta


def phi(model, t, xi):
    return solver_for(model).phi(t, xi)


def phi_minus_free(model, t, xi):
    return solver_for(model).phi_minus_free(t, xi)


def grad_phi(model, t, xi):
    return solver_for(model).grad_phi(t, xi)


def hess_phi(model, t, xi):
    return solver_for(model).hess_phi(t, xi)
