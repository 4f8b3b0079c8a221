"""Hamilton flow, variational equations, accumulated action, outgoing/incoming geometry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import (DegenerateDirection, EnergyDriftExceeded, PreconditionError,
                     StepSizeUnderflow)
from .model import PhasePoint, bracket, eval_p, eval_v

BETA1 = -0.75
BETA2 = -0.25


@dataclass(frozen=True)
class FlowOptions:
    abs_tol: float = 1e-10
    rel_tol: float = 1e-10
    t_max: float = 1e6
    with_jacobian: bool = False
    with_action: bool = False
    max_steps: int = 2_000_000

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0 and self.t_max > 0):
            raise ValueError("tolerances and t_max must be positive")


@dataclass
class Trajectory:
    times: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    jacobian: np.ndarray | None
    action: np.ndarray | None
    virial: np.ndarray | None
    energy_drift: np.ndarray

    @property
    def end(self):
        return PhasePoint(self.x[-1], self.xi[-1])


def _kind(jac, act):
    if jac and act:
        return K.FLOW_JAC_ACT
    if jac:
        return K.FLOW_JAC
    if act:
        return K.FLOW_ACT
    return K.FLOW


def initial_state(d, x0, xi0, jac=False, act=False):
    parts = [np.asarray(x0, float), np.asarray(xi0, float)]
    if jac:
        parts.append(np.eye(2 * d).ravel())
    if act:
        parts.append(np.zeros(2))
    return np.ascontiguousarray(np.concatenate(parts))


def run_kernel(model, kind, y0, times, rtol, atol, max_steps=2_000_000):
    """Integrate a kernel state to each time in ``times`` (monotone from 0)."""
    times = np.ascontiguousarray(times, dtype=float)
    atol_v = np.full(y0.shape[0], float(atol))
    out, status, _ = K.integrate_samples(kind, model.params, np.zeros(1), y0, times,
                                         float(rtol), atol_v, int(max_steps))
    if status == K.UNDERFLOW or status == K.NONFINITE:
        raise StepSizeUnderflow("integrator step size underflow")
    if status != K.OK:
        raise StepSizeUnderflow(f"integrator stopped with status {status}")
    return out


def _sample_grid(t, sample_times):
    if sample_times is None:
        ts = np.array([0.0, float(t)])
    else:
        ts = np.asarray(sample_times, dtype=float)
        if ts.size == 0 or ts[0] != 0.0:
            ts = np.concatenate([[0.0], ts])
    diffs = np.diff(ts)
    if not (np.all(diffs >= 0) or np.all(diffs <= 0)):
        raise ValueError("sample times must be monotone in one direction")
    return ts


def integrate_flow(model, p0, t, opts=None, sample_times=None):
    """Solve the Hamilton equations from ``p0``; states at 0 and every sample time."""
    opts = opts or FlowOptions()
    if not isinstance(p0, PhasePoint):
        p0 = PhasePoint(*p0)
    ts = _sample_grid(t, sample_times)
    d = model.dimension
    E0 = eval_p(model, p0.x, p0.xi)
    if not np.isfinite(E0):
        raise ValueError("initial energy is not finite")
    kind = _kind(opts.with_jacobian, opts.with_action)
    rtol, atol = opts.rel_tol, opts.abs_tol
    bound = 10.0 * rtol * abs(E0) + 10.0 * atol
    for attempt in range(2):
        y0 = initial_state(d, p0.x, p0.xi, opts.with_jacobian, opts.with_action)
        out = run_kernel(model, kind, y0, ts, rtol, atol, opts.max_steps)
        x = out[:, :d]
        xi = out[:, d:2 * d]
        drift = np.array([eval_p(model, a, b) - E0 for a, b in zip(x, xi)])
        if np.all(np.abs(drift) <= bound):
            break
        # retry once with tighter internal tolerances; the contract is on the output
        rtol, atol = rtol * 1e-2, atol * 1e-2
    else:
        raise EnergyDriftExceeded(
            f"energy drift {np.max(np.abs(drift)):.3e} exceeds {bound:.3e}")
    jac = None
    off = 2 * d
    if opts.with_jacobian:
        jac = out[:, off:off + 4 * d * d].reshape(-1, 2 * d, 2 * d)
        off += 4 * d * d
    act = vir = None
    if opts.with_action:
        act = out[:, off]
        vir = out[:, off + 1]
    return Trajectory(ts, x.copy(), xi.copy(), jac, act, vir, drift)


def flow_jacobian(model, p0, t, opts=None):
    """Full 2d x 2d Jacobian d(x, xi)/d(x0, xi0) at time t."""
    opts = opts or FlowOptions()
    o = FlowOptions(opts.abs_tol, opts.rel_tol, opts.t_max, True, False, opts.max_steps)
    return integrate_flow(model, p0, t, o).jacobian[-1]


def symplectic_defect(J):
    n = J.shape[0] // 2
    Om = np.block([[np.zeros((n, n)), np.eye(n)], [-np.eye(n), np.zeros((n, n))]])
    return float(np.max(np.abs(J.T @ Om @ J - Om)))


def cos_angle(model, p):
    if not isinstance(p, PhasePoint):
        p = PhasePoint(*p)
    v = eval_v(model, p.xi)
    nx = np.linalg.norm(p.x)
    nv = np.linalg.norm(v)
    if nx == 0.0 or nv == 0.0:
        raise DegenerateDirection("cos(x, v) undefined for x = 0 or v = 0")
    return float(np.clip(np.dot(p.x, v) / (nx * nv), -1.0, 1.0))


def is_admissible(model, p, sign, beta=BETA1):
    """Out-going (sign=+1) or in-coming (sign=-1) condition sign*cos(x, v) >= beta."""
    return sign * cos_angle(model, p) >= beta


def min_radius_estimate(model, p0, sign, t_max, beta=BETA1, n_samples=400):
    """Lower-bound constant for |x(t)| against <x0> + <t> along the half-trajectory.

    Returns ``(c_fit, ratio_min)``: ``c_fit`` is the infimum over samples with
    |t| >= 1 (the asymptotic constant), ``ratio_min`` the infimum over all samples.
    """
    if not isinstance(p0, PhasePoint):
        p0 = PhasePoint(*p0)
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    if not is_admissible(model, p0, sign, beta):
        raise PreconditionError(
            f"datum violates the {'out' if sign > 0 else 'in'}-going condition with beta={beta}")
    ts = np.concatenate([np.linspace(0.0, 1.0, 11)[1:],
                         np.geomspace(1.0, float(t_max), n_samples)[1:]])
    tr = integrate_flow(model, p0, sign * t_max, sample_times=sign * ts)
    r = np.linalg.norm(tr.x, axis=1)
    scale = bracket(p0.x) + np.sqrt(1.0 + tr.times ** 2)
    ratio = r / scale
    late = np.abs(tr.times) >= 1.0
    return float(np.min(ratio[late])), float(np.min(ratio))


def momentum_jacobian_det(model, p0, t_max, n_samples=200):
    """det(d xi / d xi0) sampled on [-t_max, t_max]; returns the minimum."""
    best = np.inf
    for sgn in (1.0, -1.0):
        ts = sgn * np.concatenate([np.linspace(0, 1, 5)[1:], np.geomspace(1.0, t_max, n_samples)])
        tr = integrate_flow(model, p0, sgn * t_max, FlowOptions(with_jacobian=True), ts)
        d = model.dimension
        dets = np.linalg.det(tr.jacobian[:, d:, d:])
        best = min(best, float(np.min(dets)))
    return best
