"""Independent reference implementations used only by the tests.

Nothing here imports lrscat: the symbol, cutoff and Hamilton equations are
re-derived from their closed forms and integrated with scipy's DOP853.
"""

import math

import numpy as np
from scipy.integrate import solve_ivp


def _f(u):
    if u <= 0.0:
        return 0.0, 0.0
    e = math.exp(-1.0 / u)
    return e, e / (u * u)


def step(s):
    """Value and derivative of the smooth 0 -> 1 step on [1, 2]."""
    if s <= 1.0:
        return 0.0, 0.0
    if s >= 2.0:
        return 1.0, 0.0
    a, da = _f(s - 1.0)
    b, db = _f(2.0 - s)
    S = a + b
    return a / S, (da * b + a * db) / (S * S)


class IsotropicQuadratic:
    """p = |xi|^2/2 + chi(|x|/R) c <x>^-mu."""

    def __init__(self, c=0.1, mu=0.5, R=1.0):
        self.c, self.mu, self.R = c, mu, R

    def V(self, x):
        r = float(np.linalg.norm(x))
        return step(r / self.R)[0] * self.c * (1.0 + r * r) ** (-0.5 * self.mu)

    def grad_V(self, x):
        r = float(np.linalg.norm(x))
        if r == 0.0:
            return np.zeros_like(x)
        chi, dchi = step(r / self.R)
        b = 1.0 + r * r
        return self.c * (dchi / (r * self.R) * b ** (-0.5 * self.mu)
                         - chi * self.mu * b ** (-0.5 * self.mu - 1.0)) * x

    def p(self, x, xi):
        return 0.5 * float(xi @ xi) + self.V(x)

    def rhs(self, t, z):
        d = z.size // 2
        x, xi = z[:d], z[d:]
        return np.concatenate([xi, -self.grad_V(x)])

    def rhs_action(self, t, z):
        """Hamilton equations plus d/dt of the action integral p - x.grad V."""
        d = (z.size - 1) // 2
        x, xi = z[:d], z[d:2 * d]
        g = self.grad_V(x)
        return np.concatenate([xi, -g, [self.p(x, xi) - float(x @ g)]])

    def flow(self, x0, xi0, t, rtol=1e-13, atol=1e-13):
        z0 = np.concatenate([x0, xi0]).astype(float)
        sol = solve_ivp(self.rhs, (0.0, t), z0, method="DOP853", rtol=rtol, atol=atol)
        return sol.y[:, -1]

    def flow_action(self, x0, xi0, t, rtol=1e-13, atol=1e-13):
        z0 = np.concatenate([x0, xi0, [0.0]]).astype(float)
        sol = solve_ivp(self.rhs_action, (0.0, t), z0, method="DOP853", rtol=rtol, atol=atol)
        return sol.y[:, -1]


def fd_jacobian(fun, z, h):
    z = np.asarray(z, float)
    cols = []
    for k in range(z.size):
        e = np.zeros_like(z)
        e[k] = h
        cols.append((fun(z + e) - fun(z - e)) / (2.0 * h))
    return np.column_stack(cols)


def brute_wave_map(o, x0, xi0, T):
    """Interaction-picture position and momentum at finite T by direct subtraction.

    The reference characteristic starts at the origin with the momentum that
    lands on xi(T) at time T (secant-free Newton with FD Jacobian).
    """
    z = o.flow(np.asarray(x0, float), np.asarray(xi0, float), T)
    d = z.size // 2
    x, xi = z[:d], z[d:]
    eta = xi.copy()

    def land(e):
        return o.flow(np.zeros(d), e, T)

    for _ in range(20):
        r = land(eta)
        F = r[d:] - xi
        if np.linalg.norm(F) < 1e-14:
            break
        J = fd_jacobian(lambda e: land(e)[d:], eta, 1e-7)
        eta = eta - np.linalg.solve(J, F)
    return x - land(eta)[:d], xi
