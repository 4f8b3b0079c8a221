"""Hamiltonian symbol families, spatial cutoff, derivatives and cutoff-radius calibration."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from . import _kernels as K
from .errors import CalibrationFailed, InvalidModel

P0_FAMILIES = {"quadratic": K.P0_QUADRATIC, "relativistic": K.P0_RELATIVISTIC, "cosine": K.P0_COSINE}
POTENTIAL_FAMILIES = {"isotropic": K.V_ISOTROPIC, "anisotropic": K.V_ANISOTROPIC, "zero": K.V_ZERO}

FD_EPS13 = np.finfo(float).eps ** (1.0 / 3.0)


def smooth_step(s):
    """C-infinity monotone step: 0 for s <= 1, 1 for s >= 2."""
    return K.step01(float(s))[0]


def bracket(x):
    """Japanese bracket <x> = sqrt(1 + |x|^2) for scalars or vectors."""
    x = np.asarray(x, dtype=float)
    return math.sqrt(1.0 + float(np.sum(x * x)))


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).copy())
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float).copy())
        if self.x.shape != self.xi.shape or self.x.ndim != 1:
            raise ValueError("x and xi must be vectors of equal length")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.xi))):
            raise ValueError("phase point entries must be finite")

    def as_array(self):
        return np.concatenate([self.x, self.xi])


@dataclass(frozen=True)
class HamiltonianModel:
    """Immutable symbol p(x, xi) = p0(xi) + chi1(|x|/R) V(x).

    ``c4`` (minimal speed on the widest energy shell) and ``M`` (momentum bound)
    are computed at construction; ``c5`` is filled in by :func:`calibrate_R`.
    """

    dimension: int = 2
    p0_family: str = "quadratic"
    potential_family: str = "isotropic"
    coupling: float = 0.1
    mu: float = 0.5
    cutoff_radius: float = 1.0
    energy_interval: tuple = (0.45, 0.55)
    epsilon0: float | None = None
    anisotropy: float = 0.5
    c5: float | None = None
    c4: float = field(init=False, default=float("nan"))
    M: float = field(init=False, default=float("nan"))
    params: np.ndarray = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        if int(self.dimension) != self.dimension or self.dimension < 1:
            raise InvalidModel("dimension must be an integer >= 1")
        if self.p0_family not in P0_FAMILIES:
            raise InvalidModel(f"unknown p0 family {self.p0_family!r}")
        if self.potential_family not in POTENTIAL_FAMILIES:
            raise InvalidModel(f"unknown potential family {self.potential_family!r}")
        if not 0.0 < self.mu < 1.0:
            raise InvalidModel("mu must lie strictly between 0 and 1")
        if not self.cutoff_radius > 0.0:
            raise InvalidModel("cutoff radius must be positive")
        e0, e1 = (float(v) for v in self.energy_interval)
        if not e0 <= e1:
            raise InvalidModel("energy interval must satisfy E0 <= E1")
        object.__setattr__(self, "energy_interval", (e0, e1))
        if self.epsilon0 is None:
            eps0 = 0.1 * (e1 - e0)
            if eps0 <= 0.0:
                eps0 = 1e-3 * max(1.0, abs(e0))
            object.__setattr__(self, "epsilon0", eps0)
        elif not self.epsilon0 > 0.0:
            raise InvalidModel("epsilon0 must be positive")
        object.__setattr__(self, "dimension", int(self.dimension))
        P = np.array([
            self.dimension,
            P0_FAMILIES[self.p0_family],
            POTENTIAL_FAMILIES[self.potential_family],
            float(self.coupling),
            float(self.mu),
            float(self.anisotropy),
            float(self.cutoff_radius),
        ])
        object.__setattr__(self, "params", P)
        object.__setattr__(self, "c4", _speed_floor(self))
        object.__setattr__(self, "M", _momentum_bound(self))

    # -- convenience -------------------------------------------------------
    @property
    def R(self):
        return self.cutoff_radius

    def interval(self, k):
        """Nested energy interval I_k = [E0 - k eps0, E1 + k eps0]."""
        e0, e1 = self.energy_interval
        return (e0 - k * self.epsilon0, e1 + k * self.epsilon0)

    @property
    def is_free(self):
        return self.potential_family == "zero" or self.coupling == 0.0

    @property
    def rotation_invariant(self):
        """True when p is invariant under planar rotations (d = 2)."""
        return (self.dimension == 2 and self.p0_family in ("quadratic", "relativistic")
                and (self.potential_family in ("isotropic", "zero") or self.coupling == 0.0))

    def with_(self, **changes):
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------- evaluation

def _vec(a, d=None):
    a = np.ascontiguousarray(a, dtype=float)
    if a.ndim != 1 or (d is not None and a.shape[0] != d):
        raise ValueError(f"expected a vector of length {d}")
    return a


def eval_p0(model, xi):
    return K.p0_val(model.params, _vec(xi, model.dimension))


def eval_v(model, xi):
    out = np.empty(model.dimension)
    K.p0_grad(model.params, _vec(xi, model.dimension), out)
    return out


def eval_VR(model, x, xi=None):
    g = np.empty(model.dimension)
    return K.vr_all(model.params, _vec(x, model.dimension), g, np.empty((1, 1)), False, False)


def eval_p(model, x, xi):
    return eval_p0(model, xi) + eval_VR(model, x, xi)


def grad_x_p(model, x, xi=None):
    g = np.empty(model.dimension)
    K.vr_all(model.params, _vec(x, model.dimension), g, np.empty((1, 1)), True, False)
    return g


def grad_xi_p(model, x, xi):
    return eval_v(model, xi)


def _fd_jacobian(fun, z):
    """Central FD Jacobian of a vector function, step max(1,|z|) eps^(1/3)."""
    z = np.asarray(z, dtype=float)
    h = max(1.0, float(np.linalg.norm(z))) * FD_EPS13
    cols = []
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        cols.append((np.asarray(fun(z + e)) - np.asarray(fun(z - e))) / (2.0 * h))
    return np.array(cols).T


def hess_x_p(model, x, xi):
    """Second x-derivatives of p by central FD of the analytic gradient."""
    return _fd_jacobian(lambda z: grad_x_p(model, z, xi), x)


def hess_xi_p(model, x, xi):
    return _fd_jacobian(lambda z: grad_xi_p(model, x, z), xi)


def hess_x_xi_p(model, x, xi):
    """Mixed block d^2 p / dx dxi (rows x, columns xi)."""
    return _fd_jacobian(lambda z: grad_x_p(model, x, z), xi)


def hess_VR_analytic(model, x):
    """Closed-form Hessian of V_R, used inside the jitted kernels."""
    d = model.dimension
    H = np.empty((d, d))
    K.vr_all(model.params, _vec(x, d), np.empty(d), H, True, True)
    return H


def poisson(f_x, f_xi, g_x, g_xi):
    """{f, g} = f_x . g_xi - f_xi . g_x (so that {f, p} is the time derivative of f)."""
    return float(np.dot(f_x, g_xi) - np.dot(f_xi, g_x))


def poisson_double_bracket(model, x, xi):
    """{{|x|^2, p}, p}: analytic first derivatives, FD second derivatives."""
    x = _vec(x, model.dimension)
    xi = _vec(xi, model.dimension)
    px = grad_x_p(model, x, xi)
    pxi = grad_xi_p(model, x, xi)
    # G = {|x|^2, p} = 2 x . p_xi
    G_x = 2.0 * pxi + 2.0 * hess_x_xi_p(model, x, xi) @ x
    G_xi = 2.0 * hess_xi_p(model, x, xi) @ x
    return poisson(G_x, G_xi, px, pxi)


def cos_between(a, b):
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------- level sets

def _p0_batch(model, xi):
    """Vectorized p0 on an (n, d) array."""
    fam = model.p0_family
    if fam == "quadratic":
        return 0.5 * np.sum(xi * xi, axis=-1)
    if fam == "relativistic":
        return np.sqrt(1.0 + np.sum(xi * xi, axis=-1))
    return np.sum(1.0 - np.cos(xi), axis=-1)


def _v_batch(model, xi):
    fam = model.p0_family
    if fam == "quadratic":
        return xi.copy()
    if fam == "relativistic":
        return xi / np.sqrt(1.0 + np.sum(xi * xi, axis=-1, keepdims=True))
    return np.sin(xi)


def _ray_cap(model):
    return math.pi * math.sqrt(model.dimension) if model.p0_family == "cosine" else 1e8


def ray_radius(model, directions, level, iters=200):
    """Smallest r > 0 with p0(r w) = level along each unit direction w.

    Returns NaN where the level is not crossed on [0, cap]. For the cosine
    family the search is confined to the first Brillouin-zone ray segment.
    """
    w = np.atleast_2d(directions)
    level = np.broadcast_to(np.asarray(level, dtype=float), (w.shape[0],)).copy()
    cap = _ray_cap(model)
    n = w.shape[0]
    hi = np.full(n, cap)
    if model.p0_family == "cosine":
        # p0 increases along the ray up to its first maximum; bracket it there.
        grid = np.linspace(0.0, cap, 257)
        vals = np.stack([_p0_batch(model, g * w) for g in grid])  # (257, n)
        argmax = np.argmax(np.diff(vals, axis=0) < 0.0, axis=0)
        has_drop = np.any(np.diff(vals, axis=0) < 0.0, axis=0)
        hi = np.where(has_drop, grid[argmax], cap)
        hi = np.where(hi <= 0.0, cap, hi)
    else:
        # unbounded growth: shrink the cap to the first doubling above the level
        r = np.ones(n)
        for _ in range(60):
            low = _p0_batch(model, r[:, None] * w) < level
            if not np.any(low):
                break
            r = np.where(low, 2.0 * r, r)
        hi = np.minimum(r, cap)
    lo = np.zeros(n)
    ok = (_p0_batch(model, hi[:, None] * w) >= level) & (_p0_batch(model, 0.0 * w) <= level)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        above = _p0_batch(model, mid[:, None] * w) >= level
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
        if np.all(hi - lo <= 4e-16 * np.maximum(1.0, hi)):
            break
    r = 0.5 * (lo + hi)
    return np.where(ok, r, np.nan)


def _directions(d, n, seed=0):
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        a = 2.0 * np.pi * (np.arange(n) + 0.5) / n
        return np.stack([np.cos(a), np.sin(a)], axis=1)
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _speed_floor(model):
    lo, hi = model.interval(6)
    dirs = _directions(model.dimension, 256)
    speeds = []
    for E in np.linspace(lo, hi, 9):
        r = ray_radius(model, dirs, E)
        good = np.isfinite(r)
        if np.any(good):
            xi = r[good, None] * dirs[good]
            speeds.append(np.linalg.norm(_v_batch(model, xi), axis=1))
    if not speeds:
        raise InvalidModel("energy shell I6 does not meet the range of p0")
    c4 = float(np.min(np.concatenate(speeds)))
    if not c4 > 1e-8:
        raise InvalidModel("the velocity field vanishes on the energy shell I6")
    return c4


def _potential_floor(model):
    if model.is_free:
        return 0.0
    c = model.coupling
    eps = model.anisotropy if model.potential_family == "anisotropic" else 0.0
    if c >= 0.0 and abs(eps) <= 1.0:
        return 0.0
    return -abs(c) * (1.0 + abs(eps))


def _momentum_bound(model):
    level = model.interval(6)[1] - _potential_floor(model)
    dirs = _directions(model.dimension, 256)
    r = ray_radius(model, dirs, level)
    r = np.where(np.isfinite(r), r, _ray_cap(model))
    return float(np.max(r))


# ---------------------------------------------------------------- calibration

@dataclass(frozen=True)
class CalibrationResult:
    R: float
    c4: float
    c5: float
    M: float
    model: HamiltonianModel
    doublings: int


def sample_energy_shell(model, n, interval_index=5, seed=42, r_max=1e3):
    """Quasi-random points of Omega_{I_k}: positions log-uniform in radius,
    energies uniform in I_k, momenta solved radially from p0 = E - V_R(x)."""
    d = model.dimension
    R = model.cutoff_radius
    rmax = max(r_max, 4.0 * R)
    rmin = 0.5 * R
    sob = qmc.Sobol(2 * d + 2, scramble=True, seed=seed)
    u = sob.random_base2(max(0, math.ceil(math.log2(max(n, 1)))))[:n]
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    from scipy.special import ndtri

    r = rmin * (rmax / rmin) ** u[:, 0]
    gx = ndtri(u[:, 1:1 + d]) if d > 1 else np.sign(u[:, 1:2] - 0.5)
    gx = gx / np.linalg.norm(gx, axis=1, keepdims=True)
    x = r[:, None] * gx
    e0, e1 = model.interval(interval_index)
    E = e0 + (e1 - e0) * u[:, 1 + d]
    gk = ndtri(u[:, 2 + d:2 + 2 * d]) if d > 1 else np.sign(u[:, 2 + d:3 + d] - 0.5)
    gk = gk / np.linalg.norm(gk, axis=1, keepdims=True)
    vr = np.array([eval_VR(model, xx) for xx in x])
    k = ray_radius(model, gk, E - vr)
    good = np.isfinite(k)
    return x[good], k[good, None] * gk[good]


def convexity_constant(model, sample_count=4096, seed=42):
    """Sampled minimum of {{|x|^2, p}, p} over Omega_{I_5}."""
    x, xi = sample_energy_shell(model, sample_count, 5, seed)
    if len(x) == 0:
        raise CalibrationFailed("no samples fall on the energy shell I5")
    vals = K.bracket_min_samples(model.params, np.ascontiguousarray(x),
                                 np.ascontiguousarray(xi), FD_EPS13)
    return float(np.min(vals))


def calibrate_R(model, sample_count=4096, R_init=1.0, seed=42, max_doublings=20):
    """Double R from ``R_init`` until the sampled convexity bracket is >= c4^2/2."""
    R = float(R_init)
    for k in range(max_doublings + 1):
        trial = model.with_(cutoff_radius=R)
        c5 = convexity_constant(trial, sample_count, seed)
        if c5 >= 0.5 * trial.c4 ** 2:
            final = trial.with_(c5=c5)
            return CalibrationResult(R, final.c4, c5, final.M, final, k)
        R *= 2.0
    raise CalibrationFailed(
        f"convexity bound not reached after {max_doublings} doublings "
        f"(last minimum {c5:.3g}, target {0.5 * model.c4 ** 2:.3g})")


def reference_model(calibrated=True, **overrides):
    """The project-wide reference scenario (d=2, quadratic, isotropic c=0.1, mu=0.5)."""
    base = dict(dimension=2, p0_family="quadratic", potential_family="isotropic",
                coupling=0.1, mu=0.5, energy_interval=(0.45, 0.55), epsilon0=0.01)
    base.update(overrides)
    m = HamiltonianModel(**base)
    if calibrated and "cutoff_radius" not in overrides:
        m = calibrate_R(m).model
    return m
