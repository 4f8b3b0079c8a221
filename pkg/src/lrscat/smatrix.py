"""Energy-surface grids, surface-restricted phase and the discretized S-matrix.

Surface chart (d = 2): the curve p0 = lam is parametrized by the polar angle
theta of xi. The position coordinate dual to theta is L = y . d xi / d theta,
so that y . d xi = L d theta. In this chart the scattering phase is

    psi~(L, theta_out) = A + L theta_in,    A = a_+ - a_-,

with L the incoming chart coordinate, since dA = L_+ d theta_out - L_- d theta_in.
Only the deviation dev = psi~ - L theta_out = A - L (theta_out - theta_in)
enters the kernel.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize
from scipy.interpolate import CubicSpline

from .errors import (PreconditionError, QuadratureFailure, SurfaceDegenerate,
                     TruncationWarning)
from .flow import integrate_flow
from .model import eval_p0, eval_v, eval_VR, ray_radius
from .modifiers import chi_pm, grad_chi_pm
from .wavemaps import wave_map

TAPER_FRACTION = 0.1
TRUNCATION_RATIO = 1e-4


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


# ---------------------------------------------------------------- surface grids

@dataclass(frozen=True)
class EnergySurfaceGrid:
    lam: float
    dimension: int
    angles: np.ndarray          # (N,) for d=2, (N, 2) polar/azimuth pairs for d=3
    xi: np.ndarray              # (N, d)
    weights: np.ndarray         # (N,) trace-measure weights
    tangents: np.ndarray        # (N, d, d-1) d xi / d(surface coordinates)
    velocity: np.ndarray        # (N, d)

    @property
    def size(self):
        return self.xi.shape[0]

    @property
    def total_measure(self):
        return float(np.sum(self.weights))


def _polish_radius(model, u, lam, r):
    """1-d Newton for p0(r u) = lam along the unit direction u."""
    for _ in range(50):
        g = eval_p0(model, r * u) - lam
        dg = float(eval_v(model, r * u) @ u)
        if dg == 0.0:
            break
        step = g / dg
        r -= step
        if abs(step) <= 1e-16 * max(1.0, abs(r)):
            break
    return r


def surface_point(model, lam, theta, r0=None):
    """(xi, d xi / d theta, v(xi)) on the d = 2 curve p0 = lam at polar angle theta."""
    u = np.array([math.cos(theta), math.sin(theta)])
    up = np.array([-u[1], u[0]])
    if r0 is None:
        r0 = float(ray_radius(model, u[None, :], lam)[0])
        if not np.isfinite(r0):
            raise PreconditionError(f"the ray at angle {theta:.6g} does not reach p0 = {lam:.6g}")
    r = _polish_radius(model, u, lam, r0)
    xi = r * u
    v = eval_v(model, xi)
    vu = float(v @ u)
    if vu == 0.0:
        raise SurfaceDegenerate("the energy curve is tangent to a ray")
    dr = -r * float(v @ up) / vu
    return xi, dr * u + r * up, v


def build_surface(model, lam, N):
    """N-node grid on p0 = lam with weights approximating the measure |v|^-1 dS."""
    d = model.dimension
    if N < 3:
        raise ValueError("need at least 3 nodes")
    if d == 2:
        th = 2.0 * np.pi * np.arange(N) / N
        dirs = np.column_stack([np.cos(th), np.sin(th)])
        r0 = ray_radius(model, dirs, lam)
        if not np.all(np.isfinite(r0)):
            raise PreconditionError(f"p0 = {lam:.6g} is not a closed curve around the origin")
        xi = np.empty((N, 2))
        tan = np.empty((N, 2, 1))
        vel = np.empty((N, 2))
        for j in range(N):
            xi[j], tan[j, :, 0], vel[j] = surface_point(model, lam, th[j], r0[j])
        speed = np.linalg.norm(vel, axis=1)
        w = (2.0 * np.pi / N) * np.linalg.norm(tan[:, :, 0], axis=1) / np.maximum(speed, 1e-300)
        angles = th
    elif d == 3:
        if model.p0_family != "quadratic":
            raise PreconditionError("d = 3 surfaces are supported for quadratic p0 only")
        if lam <= 0:
            raise PreconditionError("quadratic energy surfaces need lam > 0")
        r = math.sqrt(2.0 * lam)
        ct, wt = np.polynomial.legendre.leggauss(N)
        phi = 2.0 * np.pi * np.arange(2 * N) / (2 * N)
        T, F = np.meshgrid(np.arccos(ct), phi, indexing="ij")
        W = np.outer(wt, np.full(2 * N, 2.0 * np.pi / (2 * N)))
        u = np.stack([np.sin(T) * np.cos(F), np.sin(T) * np.sin(F), np.cos(T)], axis=-1).reshape(-1, 3)
        et = np.stack([np.cos(T) * np.cos(F), np.cos(T) * np.sin(F), -np.sin(T)], axis=-1).reshape(-1, 3)
        ef = np.stack([-np.sin(F), np.cos(F), np.zeros_like(F)], axis=-1).reshape(-1, 3)
        xi = r * u
        vel = xi.copy()
        speed = np.full(xi.shape[0], r)
        tan = np.stack([r * et, r * ef], axis=-1)
        # dS = r^2 dOmega and |v| = r
        w = r * W.ravel()
        angles = np.column_stack([T.ravel(), F.ravel()])
    else:
        raise PreconditionError("energy-surface grids exist for d = 2 and d = 3 only")
    if np.any(speed < 0.5 * model.c4):
        raise SurfaceDegenerate(
            f"|v| = {speed.min():.3e} on the surface is below c4/2 = {0.5 * model.c4:.3e}")
    return EnergySurfaceGrid(float(lam), d, angles, xi, w, tan, vel)


def surface_measure_oracle(model, lam):
    """Adaptive quadrature of the d = 2 trace measure over the whole curve."""
    def dens(t):
        _, dxi, v = surface_point(model, lam, t)
        return np.linalg.norm(dxi) / np.linalg.norm(v)

    val, err = integrate.quad(dens, 0.0, 2.0 * np.pi, epsabs=0.0, epsrel=1e-12, limit=400)
    return val


# ---------------------------------------------------------------- restricted phase

@dataclass(frozen=True)
class RestrictedPhase:
    psi: float              # psi~ = A + L theta_in
    theta: float | None     # Theta~ (None when not requested)
    eta_local: float        # theta_in (unwrapped next to theta_out)
    L: float                # incoming chart coordinate
    deviation: float        # psi~ - L theta_out
    y: np.ndarray           # ambient lift


def _need_d2(model):
    if model.dimension != 2:
        raise PreconditionError("surface-restricted phases are implemented for d = 2")


def lift(model, lam, y_local, theta_out):
    """Ambient y in T Sigma with chart coordinate y . d xi/d theta equal to y_local."""
    xi, dxi, _ = surface_point(model, lam, theta_out)
    return xi, dxi, y_local * dxi / float(dxi @ dxi)


def _chart_data(phase, lam, y, xi, theta_out, guess=None):
    model = phase.model
    sp = phase.stationary_point(y, xi, guess=guess)
    th_in = theta_out + float(wrap_angle(math.atan2(sp.eta[1], sp.eta[0]) - theta_out))
    _, deta, _ = surface_point(model, lam, th_in)
    L = float(y @ deta)
    A = sp.a_plus - sp.a_minus
    return sp, th_in, L, A


def restrict_phase(phase, grid, y_local, theta_out, with_theta=True):
    """Surface-restricted phase at chart position y_local and outgoing angle theta_out."""
    model = phase.model
    _need_d2(model)
    lam = grid.lam
    xi, dxi, y = lift(model, lam, y_local, theta_out)
    sp, th_in, L, A = _chart_data(phase, lam, y, xi, theta_out)
    psi_t = A + L * th_in
    dev = psi_t - L * theta_out
    th = None
    if with_theta:
        th = 1.0 if model.is_free else _theta_tilde(phase, lam, y_local, theta_out, sp)
    return RestrictedPhase(float(psi_t), th, float(th_in), float(L), float(dev), y)


def _theta_tilde(phase, lam, y_local, theta_out, sp):
    """|d theta_in / d theta_out at fixed L|^(1/2) by central differences."""
    model = phase.model
    guess = np.concatenate([sp.x, sp.zeta])
    hb = 1e-4 * max(1.0, abs(y_local))
    ht = 1e-4

    def at(b, t):
        xi, _, y = lift(model, lam, b, t)
        _, th_in, L, _ = _chart_data(phase, lam, y, xi, t, guess)
        return th_in, L

    ip, Lp = at(y_local + hb, theta_out)
    im, Lm = at(y_local - hb, theta_out)
    jp, Mp = at(y_local, theta_out + ht)
    jm, Mm = at(y_local, theta_out - ht)
    ti_b, L_b = (ip - im) / (2 * hb), (Lp - Lm) / (2 * hb)
    ti_t, L_t = (jp - jm) / (2 * ht), (Mp - Mm) / (2 * ht)
    return float(math.sqrt(abs(ti_t - ti_b * L_t / L_b)))


def surface_invariance_check(phase, grid, y_local, theta_out, t_list):
    """max_t |psi~(shifted lift) - psi~| for shifts of the ambient lift along v(d_y psi)."""
    model = phase.model
    _need_d2(model)
    lam = grid.lam
    xi, _, y = lift(model, lam, y_local, theta_out)
    sp, v, pts = phase.shifted_points(y, xi, t_list)
    _, th0, L0, A0 = _chart_data(phase, lam, y, xi, theta_out, np.concatenate([sp.x, sp.zeta]))
    base = A0 + L0 * th0
    dev = 0.0
    for _, q in pts:
        th_in = theta_out + float(wrap_angle(math.atan2(q.eta[1], q.eta[0]) - theta_out))
        _, deta, _ = surface_point(model, lam, th_in)
        val = (q.a_plus - q.a_minus) + float(q.y @ deta) * th_in
        dev = max(dev, abs(val - base))
    return dev


# ---------------------------------------------------------------- rotation fast path

def _radial_p0(model, q):
    return eval_p0(model, np.array([q, 0.0]))


def _asymptotic_speed(model, lam):
    return optimize.brentq(lambda q: _radial_p0(model, q) - lam, 0.0, 1e3 + 10 * lam, xtol=1e-15)


def perihelion_point(model, lam, ell):
    """Phase point (x, zeta) with x perpendicular to zeta, x ^ zeta = ell, energy lam.

    The outermost turning point is used so that the trajectory comes from infinity.
    """
    if ell == 0.0:
        q0sq = lam - eval_VR(model, np.zeros(2))
        q0 = optimize.brentq(lambda q: _radial_p0(model, q) - q0sq, 0.0, 1e3 + 10 * lam, xtol=1e-15)
        return np.zeros(2), np.array([q0, 0.0])
    a = abs(ell)

    def g(r):
        return _radial_p0(model, a / r) + eval_VR(model, np.array([r, 0.0])) - lam

    kinf = _asymptotic_speed(model, lam)
    rs = np.geomspace(4.0 * (a / kinf) + 4.0 * model.R, 1e-8 * max(a, 1e-8), 4000)
    vals = np.array([g(r) for r in rs])
    idx = np.nonzero(vals > 0.0)[0]
    if idx.size == 0 or idx[0] == 0:
        raise PreconditionError(f"no turning point for angular momentum {ell:.6g}")
    k = idx[0]
    r = optimize.brentq(g, rs[k], rs[k - 1], xtol=1e-15, rtol=1e-15)
    x = np.array([0.0, -r])
    return x, np.array([ell / r, 0.0])


def rotation_deviation(model, lam, L, opts=None):
    """(dev, chi, L_check) for chart coordinate L of a rotation-invariant model.

    The chart coordinate is minus the angular momentum x ^ xi.
    """
    kw = {} if opts is None else {"opts": opts}
    if model.is_free:
        return 0.0, 0.0, float(L)
    x, zeta = perihelion_point(model, lam, -float(L))
    wp = wave_map(model, x, zeta, 1, **kw)
    wm = wave_map(model, x, zeta, -1, **kw)
    th_out = math.atan2(wp.xi_pm[1], wp.xi_pm[0])
    th_in = th_out + float(wrap_angle(math.atan2(wm.xi_pm[1], wm.xi_pm[0]) - th_out))
    _, deta, _ = surface_point(model, lam, th_in)
    Lc = float(wm.x_pm @ deta)
    chi = th_out - th_in
    A = wp.action - wm.action
    return float(A - Lc * chi), float(chi), Lc


# ---------------------------------------------------------------- S-matrix

@dataclass
class SMatrix:
    lam: float
    N: int
    matrix: np.ndarray
    Y: float
    Ny: int
    metadata: dict = field(default_factory=dict)

    def unitarity_defect(self):
        return unitarity_defect(self)


def unitarity_defect(S):
    M = S.matrix if isinstance(S, SMatrix) else np.asarray(S)
    return float(np.linalg.norm(M.conj().T @ M - np.eye(M.shape[0]), 2))


def y_grid(N, Y, Ny):
    """Window nodes y', chart coordinates L = kappa y' and the cosine taper."""
    h = 2.0 * Y / Ny
    yp = -Y + h * np.arange(Ny)
    kappa = N / (2.0 * Y)
    a = np.abs(yp) / Y
    z = np.clip((a - (1.0 - TAPER_FRACTION)) / TAPER_FRACTION, 0.0, 1.0)
    tau = np.where(a <= 1.0 - TAPER_FRACTION, 1.0, 0.5 * (1.0 + np.cos(np.pi * z)))
    return yp, kappa * yp, tau


def _assemble(angles, L, tau, dev, theta_t):
    """S_jk = Ny^-1 sum_n Theta~_jn exp(-i tau_n dev_jn) exp(i L_n wrap(theta_k - theta_j))."""
    N = angles.size
    Ny = L.size
    amp = theta_t * np.exp(-1j * tau[None, :] * dev)          # (N, Ny)
    S = np.empty((N, N), dtype=complex)
    for j in range(N):
        dth = wrap_angle(angles - angles[j])                 # theta_k - theta_j
        S[j] = np.exp(1j * np.outer(dth, L)) @ amp[j] / Ny
    return S


def _truncation_ratio(dev_edge, dev):
    dev_edge = np.atleast_1d(dev_edge)
    top = float(np.max(np.abs(1.0 - np.exp(-1j * dev))))
    if top == 0.0:
        return 0.0
    return float(np.max(np.abs(1.0 - np.exp(-1j * dev_edge)))) / top


def _map(fn, items, jobs):
    if jobs and jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


def build_smatrix(phase, grid, Y, Ny, method="auto", generic_samples=32, jobs=1):
    """Discretized S(lam) on the nodes of ``grid`` (d = 2).

    ``method`` is "rotation" (uses rotation invariance: the deviation depends
    on L only and Theta~ = 1), "generic" (stationary solves on a coarse L-grid
    per node, spline-interpolated) or "auto".
    """
    model = phase.model
    if grid.dimension != 2:
        raise PreconditionError("S-matrix assembly is implemented for d = 2")
    if Y <= 0 or Ny < 2:
        raise ValueError("need Y > 0 and Ny >= 2")
    N = grid.size
    lam = grid.lam
    angles = np.asarray(grid.angles, float)
    yp, L, tau = y_grid(N, Y, Ny)
    if method == "auto":
        method = "rotation" if (model.rotation_invariant or model.is_free) else "generic"
    if method == "rotation":
        if not (model.rotation_invariant or model.is_free):
            raise PreconditionError("the rotation fast path needs a rotation-invariant model")
        if model.is_free:
            g = np.zeros(Ny)
        else:
            # even in L for reflection-symmetric models: evaluate |L| once
            uniq, inv = np.unique(np.abs(L), return_inverse=True)
            vals = _map(lambda l: rotation_deviation(model, lam, l, phase.opts)[0], uniq, jobs)
            g = np.asarray(vals)[inv]
        dev = np.broadcast_to(g, (N, Ny))
        theta_t = np.ones((N, Ny))
        edge = g[[0, -1]]
    elif method == "generic":
        dev, theta_t, edge = _generic_tables(phase, grid, L, generic_samples, jobs)
    else:
        raise ValueError(f"unknown method {method!r}")
    S = _assemble(angles, L, tau, dev, theta_t)
    ratio = 0.0 if model.is_free else _truncation_ratio(edge, dev)
    if ratio > TRUNCATION_RATIO:
        warnings.warn(f"phase deviation at the window edge is {ratio:.2e} of its maximum; "
                      "the y-window truncates a long-range tail", TruncationWarning, stacklevel=2)
    meta = {"method": method, "kappa": N / (2.0 * Y), "taper_fraction": TAPER_FRACTION,
            "truncation_ratio": ratio, "weights_total": grid.total_measure,
            "unitarity_defect": unitarity_defect(S)}
    return SMatrix(lam, N, S, float(Y), int(Ny), meta)


def _generic_tables(phase, grid, L, samples, jobs):
    N = grid.size
    angles = np.asarray(grid.angles, float)
    Lmax = float(np.max(np.abs(L)))
    ys = np.linspace(-1.05 * Lmax, 1.05 * Lmax, samples)

    def node(j):
        rows = [restrict_phase(phase, grid, b, angles[j], with_theta=False) for b in ys]
        Lc = np.array([r.L for r in rows])
        order = np.argsort(Lc)
        Lc = Lc[order]
        dv = np.array([r.deviation for r in rows])[order]
        ti = np.array([r.eta_local - angles[j] for r in rows])[order]
        return CubicSpline(Lc, dv)(L), CubicSpline(Lc, ti)(L)

    out = _map(node, range(N), jobs)
    dev = np.array([o[0] for o in out])
    rel = np.array([o[1] for o in out])          # theta_in - theta_out at fixed L
    # d theta_in / d theta_out = 1 + d(rel)/d theta_out, periodic central differences
    h = 2.0 * np.pi / N
    drel = (np.roll(rel, -1, axis=0) - np.roll(rel, 1, axis=0)) / (2.0 * h)
    theta_t = np.sqrt(np.abs(1.0 + drel))
    edge = dev[:, [0, -1]].ravel()
    return dev, theta_t, edge


# ---------------------------------------------------------------- Z-integral

def z_integral_check(model, spec, phase, y, xi, t_span=None, samples=801):
    """Quadrature of Z00 = -i v(zeta).grad_x chi_-(x, eta) along y + t v(eta).

    x(t), zeta(t) follow the flow from the stationary point (the stationary data
    of shifted y are flowed data); grad_x chi_- is a central FD at each node.
    Returns the complex integral.
    """
    y = np.asarray(y, float)
    xi = np.asarray(xi, float)
    sp = phase.stationary_point(y, xi)
    eta = sp.eta
    speed = float(np.linalg.norm(eval_v(model, eta)))
    if t_span is None:
        T = 20.0 * (np.linalg.norm(y) + 2.0 * spec.R0) / speed + 50.0
        t_span = (-T, T)
    ts = np.linspace(t_span[0], t_span[1], samples)
    t0 = int(np.searchsorted(ts, 0.0))
    fwd = integrate_flow(model, (sp.x, sp.zeta), ts[-1], sample_times=ts[t0:]) if ts[-1] > 0 else None
    bwd = integrate_flow(model, (sp.x, sp.zeta), ts[0], sample_times=ts[:t0][::-1]) if ts[0] < 0 else None
    X = np.empty((ts.size, model.dimension))
    Z = np.empty_like(X)
    if fwd is not None:
        X[t0:], Z[t0:] = fwd.x[-(ts.size - t0):], fwd.xi[-(ts.size - t0):]
    if bwd is not None:
        X[:t0], Z[:t0] = bwd.x[1:][::-1], bwd.xi[1:][::-1]
    chi = np.array([chi_pm(model, spec, X[k], eta, -1, phase.opts, zeta=Z[k]) for k in range(ts.size)])
    if chi[0] < 1.0 - 1e-12 or chi[-1] > 1e-12:
        raise PreconditionError("the line does not cross the incoming angular shell inside the span")
    active = np.nonzero((chi > 1e-15) & (chi < 1.0 - 1e-15))[0]
    if active.size == 0:
        return 0j
    lo = ts[max(active[0] - 1, 0)]
    hi = ts[min(active[-1] + 1, ts.size - 1)]
    base = (sp.x, sp.zeta)

    def integrand(t):
        if t == 0.0:
            x, zeta = base
        else:
            tr = integrate_flow(model, base, t)
            x, zeta = tr.x[-1], tr.xi[-1]
        g = grad_chi_pm(model, spec, x, eta, -1, phase.opts, guess=zeta)
        return float(eval_v(model, zeta) @ g)

    val, err = integrate.quad(integrand, lo, hi, epsabs=1e-9, epsrel=1e-9, limit=200)
    if err > 1e-5:
        raise QuadratureFailure(f"Z-integral quadrature error estimate {err:.2e}")
    return complex(0.0, -val)
