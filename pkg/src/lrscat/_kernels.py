"""Jitted numerical core: symbol families, cutoff, right-hand sides and a DOP853 stepper.

Model parameters travel as a flat float array ``P``:
``[d, p0_code, v_code, c, mu, eps, R]``.

Integration "kinds" select the state layout:

* physical time: ``FLOW`` [x, xi], ``FLOW_JAC`` [x, xi, J], ``FLOW_ACT`` [x, xi, u, b],
  ``FLOW_JAC_ACT`` [x, xi, J, u, b]
* compactified time ``t = s (exp(sigma) - 1)`` with ``s = aux[0]``:
  ``C_FLOW`` [x, xi], ``C_FLOW_JAC`` [x, xi, J], ``C_REF`` [X, Xi, N, Dm],
  ``C_JOINT`` [X, Xi, N, Dm, Y, delta, a]

``u`` accumulates ``p - x.grad V_R`` and ``b`` accumulates ``-x.grad V_R``.
"""

import math

import numpy as np
from numba import njit
from scipy.integrate._ivp import dop853_coefficients as _dc

P0_QUADRATIC, P0_RELATIVISTIC, P0_COSINE = 0, 1, 2
V_ISOTROPIC, V_ANISOTROPIC, V_ZERO = 0, 1, 2

FLOW, FLOW_JAC, FLOW_ACT, FLOW_JAC_ACT = 0, 1, 2, 3
C_FLOW, C_FLOW_JAC, C_REF, C_JOINT = 10, 11, 12, 13

OK, MAX_STEPS, UNDERFLOW, NONFINITE, NOT_CONVERGED = 0, 1, 2, 3, 4

_A = np.ascontiguousarray(_dc.A[:12, :12])
_B = np.ascontiguousarray(_dc.B)
_C = np.ascontiguousarray(_dc.C[:12])
_E3 = np.ascontiguousarray(_dc.E3)
_E5 = np.ascontiguousarray(_dc.E5)


# ---------------------------------------------------------------- smooth step

@njit(cache=True)
def _f(u):
    if u <= 0.0:
        return 0.0, 0.0, 0.0
    e = math.exp(-1.0 / u)
    u2 = u * u
    return e, e / u2, e * (1.0 - 2.0 * u) / (u2 * u2)


@njit(cache=True)
def step01(s):
    """C-infinity step rising from 0 at s<=1 to 1 at s>=2, with two derivatives."""
    if s <= 1.0:
        return 0.0, 0.0, 0.0
    if s >= 2.0:
        return 1.0, 0.0, 0.0
    a, a1, a2 = _f(s - 1.0)
    b, b1, b2 = _f(2.0 - s)
    b1 = -b1
    S = a + b
    S1 = a1 + b1
    num = a1 * b - a * b1
    chi = a / S
    chi1 = num / (S * S)
    chi2 = ((a2 * b - a * b2) * S - 2.0 * num * S1) / (S * S * S)
    return chi, chi1, chi2


# ---------------------------------------------------------------- p0 family

@njit(cache=True)
def p0_val(P, xi):
    code = int(P[1])
    n = xi.shape[0]
    acc = 0.0
    if code == P0_QUADRATIC:
        for i in range(n):
            acc += xi[i] * xi[i]
        return 0.5 * acc
    if code == P0_RELATIVISTIC:
        for i in range(n):
            acc += xi[i] * xi[i]
        return math.sqrt(1.0 + acc)
    for i in range(n):
        acc += 1.0 - math.cos(xi[i])
    return acc


@njit(cache=True)
def p0_grad(P, xi, out):
    code = int(P[1])
    n = xi.shape[0]
    if code == P0_QUADRATIC:
        for i in range(n):
            out[i] = xi[i]
    elif code == P0_RELATIVISTIC:
        acc = 0.0
        for i in range(n):
            acc += xi[i] * xi[i]
        g = math.sqrt(1.0 + acc)
        for i in range(n):
            out[i] = xi[i] / g
    else:
        for i in range(n):
            out[i] = math.sin(xi[i])


@njit(cache=True)
def p0_hess(P, xi, out):
    code = int(P[1])
    n = xi.shape[0]
    for i in range(n):
        for j in range(n):
            out[i, j] = 0.0
    if code == P0_QUADRATIC:
        for i in range(n):
            out[i, i] = 1.0
    elif code == P0_RELATIVISTIC:
        acc = 0.0
        for i in range(n):
            acc += xi[i] * xi[i]
        g = math.sqrt(1.0 + acc)
        g3 = g * g * g
        for i in range(n):
            for j in range(n):
                out[i, j] = -xi[i] * xi[j] / g3
            out[i, i] += 1.0 / g
    else:
        for i in range(n):
            out[i, i] = math.cos(xi[i])


@njit(cache=True)
def p0_diff(P, Xi, dl):
    """p0(Xi+dl) - p0(Xi) without cancellation."""
    code = int(P[1])
    n = Xi.shape[0]
    if code == P0_QUADRATIC:
        acc = 0.0
        for i in range(n):
            acc += dl[i] * (Xi[i] + 0.5 * dl[i])
        return acc
    if code == P0_RELATIVISTIC:
        a0 = 0.0
        a1 = 0.0
        num = 0.0
        for i in range(n):
            a0 += Xi[i] * Xi[i]
            y = Xi[i] + dl[i]
            a1 += y * y
            num += dl[i] * (2.0 * Xi[i] + dl[i])
        return num / (math.sqrt(1.0 + a1) + math.sqrt(1.0 + a0))
    acc = 0.0
    for i in range(n):
        acc += 2.0 * math.sin(Xi[i] + 0.5 * dl[i]) * math.sin(0.5 * dl[i])
    return acc


@njit(cache=True)
def v_diff(P, Xi, dl, out):
    """v(Xi+dl) - v(Xi)."""
    code = int(P[1])
    n = Xi.shape[0]
    if code == P0_QUADRATIC:
        for i in range(n):
            out[i] = dl[i]
    elif code == P0_RELATIVISTIC:
        a0 = 0.0
        a1 = 0.0
        for i in range(n):
            a0 += Xi[i] * Xi[i]
            y = Xi[i] + dl[i]
            a1 += y * y
        g0 = math.sqrt(1.0 + a0)
        g1 = math.sqrt(1.0 + a1)
        dg = p0_diff(P, Xi, dl)
        inv_diff = -dg / (g0 * g1)
        for i in range(n):
            out[i] = dl[i] / g1 + Xi[i] * inv_diff
    else:
        for i in range(n):
            out[i] = 2.0 * math.cos(Xi[i] + 0.5 * dl[i]) * math.sin(0.5 * dl[i])


# ---------------------------------------------------------------- potential

@njit(cache=True)
def _norm2(x):
    acc = 0.0
    for i in range(x.shape[0]):
        acc += x[i] * x[i]
    return acc


@njit(cache=True)
def v_all(P, x, grad, hess, want_grad, want_hess):
    """Uncut potential V(x); fills gradient/Hessian on request."""
    code = int(P[2])
    n = x.shape[0]
    c = P[3]
    mu = P[4]
    if want_grad:
        for i in range(n):
            grad[i] = 0.0
    if want_hess:
        for i in range(n):
            for j in range(n):
                hess[i, j] = 0.0
    if code == V_ZERO:
        return 0.0
    s = _norm2(x)
    q = 1.0 + s
    w0 = q ** (-0.5 * mu)
    val = c * w0
    w1 = w0 / q
    if want_grad:
        for i in range(n):
            grad[i] = -c * mu * w1 * x[i]
    if want_hess:
        w2 = w1 / q
        for i in range(n):
            for j in range(n):
                hess[i, j] = c * mu * (mu + 2.0) * w2 * x[i] * x[j]
            hess[i, i] -= c * mu * w1
    if code == V_ANISOTROPIC:
        ce = c * P[5]
        a = 0.5 * (mu + 1.0)
        h0 = q ** (-a)
        h1 = h0 / q
        val += ce * x[0] * h0
        if want_grad:
            grad[0] += ce * h0
            for i in range(n):
                grad[i] -= ce * 2.0 * a * x[0] * x[i] * h1
        if want_hess:
            h2 = h1 / q
            for i in range(n):
                for j in range(n):
                    t = 4.0 * a * (a + 1.0) * x[0] * x[i] * x[j] * h2
                    if i == 0:
                        t -= 2.0 * a * x[j] * h1
                    if j == 0:
                        t -= 2.0 * a * x[i] * h1
                    if i == j:
                        t -= 2.0 * a * x[0] * h1
                    hess[i, j] += ce * t
    return val


@njit(cache=True)
def vr_all(P, x, grad, hess, want_grad, want_hess):
    """Cut-off potential V_R = chi1(|x|/R) V with gradient and Hessian."""
    n = x.shape[0]
    R = P[6]
    r = math.sqrt(_norm2(x))
    s = r / R
    if s <= 1.0 or int(P[2]) == V_ZERO:
        if want_grad:
            for i in range(n):
                grad[i] = 0.0
        if want_hess:
            for i in range(n):
                for j in range(n):
                    hess[i, j] = 0.0
        return 0.0
    val = v_all(P, x, grad, hess, want_grad, want_hess)
    if s >= 2.0:
        return val
    ch, ch1, ch2 = step01(s)
    # grad chi = ch1 * xhat / R ; hess chi = ch2 xhat xhat^T / R^2 + ch1 (I - xhat xhat^T)/(r R)
    if want_hess:
        for i in range(n):
            for j in range(n):
                xi_ = x[i] / r
                xj_ = x[j] / r
                hc = ch2 * xi_ * xj_ / (R * R) - ch1 * xi_ * xj_ / (r * R)
                if i == j:
                    hc += ch1 / (r * R)
                gi = ch1 * xi_ / R
                gj = ch1 * xj_ / R
                hess[i, j] = ch * hess[i, j] + gi * grad[j] + gj * grad[i] + val * hc
    if want_grad:
        for i in range(n):
            grad[i] = ch * grad[i] + val * ch1 * x[i] / (r * R)
    return ch * val


@njit(cache=True)
def _pw_diff(q0, dq, e):
    """(q0+dq)**e - q0**e, stable for small dq/q0."""
    return q0 ** e * math.expm1(e * math.log1p(dq / q0))


@njit(cache=True)
def vr_diff(P, X, D, g0, g1, want_val):
    """Stable V_R(X+D) - V_R(X) and grad V_R(X+D) - grad V_R(X) (into g1).

    ``g0`` is scratch.  Returns the value difference (0 if not wanted).
    """
    n = X.shape[0]
    code = int(P[2])
    R = P[6]
    if code == V_ZERO:
        for i in range(n):
            g1[i] = 0.0
        return 0.0
    s0 = 0.0
    s1 = 0.0
    ds = 0.0
    for i in range(n):
        s0 += X[i] * X[i]
        y = X[i] + D[i]
        s1 += y * y
        ds += D[i] * (2.0 * X[i] + D[i])
    r0 = math.sqrt(s0)
    r1 = math.sqrt(s1)
    if r0 < 2.0 * R or r1 < 2.0 * R:
        Y = np.empty(n)
        for i in range(n):
            Y[i] = X[i] + D[i]
        dummy = np.empty((1, 1))
        v1 = vr_all(P, Y, g1, dummy, True, False)
        v0 = vr_all(P, X, g0, dummy, True, False)
        for i in range(n):
            g1[i] -= g0[i]
        return v1 - v0
    c = P[3]
    mu = P[4]
    q0 = 1.0 + s0
    q1 = 1.0 + s1
    val = 0.0
    if want_val:
        val = c * _pw_diff(q0, ds, -0.5 * mu)
    w1 = q1 ** (-0.5 * mu - 1.0)
    dw = _pw_diff(q0, ds, -0.5 * mu - 1.0)
    for i in range(n):
        g1[i] = -c * mu * (D[i] * w1 + X[i] * dw)
    if code == V_ANISOTROPIC:
        ce = c * P[5]
        a = 0.5 * (mu + 1.0)
        h1 = q1 ** (-a)
        dh = _pw_diff(q0, ds, -a)
        if want_val:
            val += ce * (D[0] * h1 + X[0] * dh)
        k1 = q1 ** (-a - 1.0)
        dk = _pw_diff(q0, ds, -a - 1.0)
        g1[0] += ce * dh
        for i in range(n):
            # (X0+D0)(Xi+Di) k1 - X0 Xi k0
            cross = (X[0] * D[i] + D[0] * X[i] + D[0] * D[i]) * k1 + X[0] * X[i] * dk
            g1[i] -= ce * 2.0 * a * cross
    return val


@njit(cache=True)
def _mm(A, B):
    n = A.shape[0]
    m = B.shape[1]
    k = A.shape[1]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for l in range(k):
                acc += A[i, l] * B[l, j]
            out[i, j] = acc
    return out


@njit(cache=True)
def _mv(A, v):
    n = A.shape[0]
    out = np.empty(n)
    for i in range(n):
        acc = 0.0
        for l in range(v.shape[0]):
            acc += A[i, l] * v[l]
        out[i] = acc
    return out


# ---------------------------------------------------------------- right-hand sides

@njit(cache=True)
def state_size(kind, d):
    if kind == FLOW or kind == C_FLOW:
        return 2 * d
    if kind == FLOW_JAC or kind == C_FLOW_JAC:
        return 2 * d + 4 * d * d
    if kind == FLOW_ACT:
        return 2 * d + 2
    if kind == FLOW_JAC_ACT:
        return 2 * d + 4 * d * d + 2
    if kind == C_REF:
        return 2 * d + 2 * d * d
    return 4 * d + 2 * d * d + 1


@njit(cache=True)
def _flow_part(P, y, f, d, jac, act, off_act):
    x = y[0:d]
    xi = y[d:2 * d]
    g = np.empty(d)
    H = np.empty((d, d))
    vr = vr_all(P, x, g, H, True, jac)
    v = np.empty(d)
    p0_grad(P, xi, v)
    for i in range(d):
        f[i] = v[i]
        f[d + i] = -g[i]
    if jac:
        m = 2 * d
        Dv = np.empty((d, d))
        p0_hess(P, xi, Dv)
        J = y[m:m + m * m].reshape((m, m))
        F = f[m:m + m * m].reshape((m, m))
        for col in range(m):
            for i in range(d):
                a1 = 0.0
                a2 = 0.0
                for k in range(d):
                    a1 += Dv[i, k] * J[d + k, col]
                    a2 -= H[i, k] * J[k, col]
                F[i, col] = a1
                F[d + i, col] = a2
    if act:
        xg = 0.0
        for i in range(d):
            xg += x[i] * g[i]
        f[off_act] = p0_val(P, xi) + vr - xg
        f[off_act + 1] = -xg


@njit(cache=True)
def _ref_part(P, y, f, d):
    """Reference block [X, Xi, N, Dm]; returns grad and Hessian of V_R at X."""
    X = y[0:d]
    Xi = y[d:2 * d]
    N = y[2 * d:2 * d + d * d].reshape((d, d))
    Dm = y[2 * d + d * d:2 * d + 2 * d * d].reshape((d, d))
    g = np.empty(d)
    H = np.empty((d, d))
    vr_all(P, X, g, H, True, True)
    v = np.empty(d)
    p0_grad(P, Xi, v)
    Dv = np.empty((d, d))
    p0_hess(P, Xi, Dv)
    for i in range(d):
        f[i] = v[i]
        f[d + i] = -g[i]
    HN = _mm(H, N)
    NHN = _mm(N, HN)
    FN = f[2 * d:2 * d + d * d].reshape((d, d))
    FD = f[2 * d + d * d:2 * d + 2 * d * d].reshape((d, d))
    HNDm = _mm(HN, Dm)
    for i in range(d):
        for j in range(d):
            FN[i, j] = Dv[i, j] + NHN[i, j]
            FD[i, j] = -HNDm[i, j]
    return g, H, Dv, v


@njit(cache=True)
def _joint_part(P, y, f, d):
    g_ref, H, Dv, vref = _ref_part(P, y, f, d)
    X = y[0:d]
    Xi = y[d:2 * d]
    N = y[2 * d:2 * d + d * d].reshape((d, d))
    o = 2 * d + 2 * d * d
    Y = y[o:o + d]
    dl = y[o + d:o + 2 * d]
    W = _mv(N, dl)
    Dl = np.empty(d)
    x = np.empty(d)
    for i in range(d):
        Dl[i] = Y[i] + W[i]
        x[i] = X[i] + Dl[i]
    scratch = np.empty(d)
    gdiff = np.empty(d)
    vdiff_val = vr_diff(P, X, Dl, scratch, gdiff, True)
    # grad V_R(x) = g_ref + gdiff
    HW = _mv(H, W)
    inner = np.empty(d)
    for i in range(d):
        inner[i] = gdiff[i] - HW[i]
    Ninner = _mv(N, inner)
    vd = np.empty(d)
    v_diff(P, Xi, dl, vd)
    Dvdl = _mv(Dv, dl)
    for i in range(d):
        f[o + i] = vd[i] - Dvdl[i] + Ninner[i]
        f[o + d + i] = -gdiff[i]
    # third-order remainder of p0 and the action density
    p3 = p0_diff(P, Xi, dl)
    q = 0.0
    for i in range(d):
        p3 -= vref[i] * dl[i] + 0.5 * dl[i] * Dvdl[i]
        q -= Y[i] * (g_ref[i] + gdiff[i]) + W[i] * g_ref[i] + 0.5 * W[i] * HW[i]
    f[o + 2 * d] = p3 + vdiff_val + q


@njit(cache=True)
def rhs(kind, s, y, P, aux, f):
    d = int(P[0])
    if kind == FLOW:
        _flow_part(P, y, f, d, False, False, 0)
        return
    if kind == FLOW_JAC:
        _flow_part(P, y, f, d, True, False, 0)
        return
    if kind == FLOW_ACT:
        _flow_part(P, y, f, d, False, True, 2 * d)
        return
    if kind == FLOW_JAC_ACT:
        _flow_part(P, y, f, d, True, True, 2 * d + 4 * d * d)
        return
    sign = aux[0]
    fac = sign * math.exp(s)
    if kind == C_FLOW:
        _flow_part(P, y, f, d, False, False, 0)
    elif kind == C_FLOW_JAC:
        _flow_part(P, y, f, d, True, False, 0)
    elif kind == C_REF:
        _ref_part(P, y, f, d)
    else:
        _joint_part(P, y, f, d)
    for i in range(f.shape[0]):
        f[i] *= fac


# ---------------------------------------------------------------- DOP853 stepper

@njit(cache=True)
def _step(kind, P, aux, t, y, h, K, ynew, rtol, atol):
    """One DOP853 step; K[0] must hold f(t, y). Returns the scaled error norm."""
    n = y.shape[0]
    tmp = np.empty(n)
    for s in range(1, 12):
        for i in range(n):
            acc = 0.0
            for j in range(s):
                acc += _A[s, j] * K[j, i]
            tmp[i] = y[i] + h * acc
        rhs(kind, t + _C[s] * h, tmp, P, aux, K[s])
    for i in range(n):
        acc = 0.0
        for j in range(12):
            acc += _B[j] * K[j, i]
        ynew[i] = y[i] + h * acc
    rhs(kind, t + h, ynew, P, aux, K[12])
    e5 = 0.0
    e3 = 0.0
    for i in range(n):
        sc = atol[i] + rtol * max(abs(y[i]), abs(ynew[i]))
        a5 = 0.0
        a3 = 0.0
        for j in range(13):
            a5 += _E5[j] * K[j, i]
            a3 += _E3[j] * K[j, i]
        a5 /= sc
        a3 /= sc
        e5 += a5 * a5
        e3 += a3 * a3
    if e5 == 0.0 and e3 == 0.0:
        return 0.0
    den = e5 + 0.01 * e3
    return abs(h) * e5 / math.sqrt(den * n)


@njit(cache=True)
def _finite(v):
    for i in range(v.shape[0]):
        if not math.isfinite(v[i]):
            return False
    return True


@njit(cache=True)
def _initial_step(kind, P, aux, t, y, f0, direction, rtol, atol):
    n = y.shape[0]
    d0 = 0.0
    d1 = 0.0
    for i in range(n):
        sc = atol[i] + rtol * abs(y[i])
        d0 += (y[i] / sc) ** 2
        d1 += (f0[i] / sc) ** 2
    d0 = math.sqrt(d0 / n)
    d1 = math.sqrt(d1 / n)
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    y1 = np.empty(n)
    for i in range(n):
        y1[i] = y[i] + direction * h0 * f0[i]
    f1 = np.empty(n)
    rhs(kind, t + direction * h0, y1, P, aux, f1)
    d2 = 0.0
    for i in range(n):
        sc = atol[i] + rtol * abs(y[i])
        d2 += ((f1[i] - f0[i]) / sc) ** 2
    d2 = math.sqrt(d2 / n) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 8.0)
    return min(100.0 * h0, h1)


@njit(cache=True)
def integrate_to(kind, P, aux, y, t0, t1, rtol, atol, h_init, max_steps):
    """Integrate in place from t0 to t1. Returns (status, last step size, steps)."""
    n = y.shape[0]
    if t1 == t0:
        return OK, h_init, 0
    direction = 1.0 if t1 > t0 else -1.0
    K = np.empty((13, n))
    rhs(kind, t0, y, P, aux, K[0])
    h = abs(h_init)
    if h == 0.0:
        h = _initial_step(kind, P, aux, t0, y, K[0], direction, rtol, atol)
    t = t0
    ynew = np.empty(n)
    steps = 0
    while direction * (t1 - t) > 0.0:
        if steps >= max_steps:
            return MAX_STEPS, h, steps
        hmin = 10.0 * abs(np.nextafter(t, direction * np.inf) - t)
        if h < hmin:
            return UNDERFLOW, h, steps
        last = False
        if h >= abs(t1 - t):
            h = abs(t1 - t)
            last = True
        err = _step(kind, P, aux, t, y, direction * h, K, ynew, rtol, atol)
        if not math.isfinite(err):
            h *= 0.2
            steps += 1
            continue
        if err < 1.0:
            t = t1 if last else t + direction * h
            for i in range(n):
                y[i] = ynew[i]
                K[0, i] = K[12, i]
            fac = 10.0 if err == 0.0 else min(10.0, 0.9 * err ** (-1.0 / 8.0))
            if not last:
                h *= fac
        else:
            h *= max(0.2, 0.9 * err ** (-1.0 / 8.0))
        steps += 1
    if not _finite(y):
        return NONFINITE, h, steps
    return OK, h, steps


@njit(cache=True)
def integrate_samples(kind, P, aux, y0, times, rtol, atol, max_steps):
    """States at each of ``times`` (monotone, starting from 0)."""
    n = y0.shape[0]
    out = np.empty((times.shape[0], n))
    y = y0.copy()
    t = 0.0
    h = 0.0
    status = OK
    total = 0
    for k in range(times.shape[0]):
        status, h, st = integrate_to(kind, P, aux, y, t, times[k], rtol, atol, h, max_steps)
        total += st
        if status != OK:
            for kk in range(k, times.shape[0]):
                for i in range(n):
                    out[kk, i] = np.nan
            return out, status, total
        t = times[k]
        for i in range(n):
            out[k, i] = y[i]
    return out, status, total


@njit(cache=True)
def _escaped(kind, P, y, sign):
    """True when every trajectory in the state is outgoing (in the time direction)."""
    d = int(P[0])
    if int(P[2]) == V_ZERO:
        return True
    R = P[6]
    v = np.empty(d)
    if kind == C_JOINT:
        N = y[2 * d:2 * d + d * d].reshape((d, d))
        o = 2 * d + 2 * d * d
        W = _mv(N, y[o + d:o + 2 * d])
        x = np.empty(d)
        xi = np.empty(d)
        for i in range(d):
            x[i] = y[i] + y[o + i] + W[i]
            xi[i] = y[d + i] + y[o + d + i]
        if not _outgoing(P, x, xi, sign, R, v):
            return False
    return _outgoing(P, y[0:d], y[d:2 * d], sign, R, v)


@njit(cache=True)
def _outgoing(P, x, xi, sign, R, v):
    p0_grad(P, xi, v)
    r = math.sqrt(_norm2(x))
    vn = math.sqrt(_norm2(v))
    if r < 2.0 * R or vn == 0.0:
        return False
    dot = 0.0
    for i in range(x.shape[0]):
        dot += x[i] * v[i]
    return sign * dot >= 0.5 * r * vn


@njit(cache=True)
def integrate_limit(kind, P, aux, y0, rtol, atol, mask, rates, tail_tol, sigma_max, max_steps):
    """Integrate in compactified time until the masked components have converged.

    Stops at the first accepted step where all trajectories are outgoing and the
    tail estimate max |dQ/dsigma| / rate over masked components is below
    ``tail_tol``; then continues by log 2 (doubling t) and returns both states.
    Returns (y_T, y_2T, sigma_T, tail, status, steps).
    """
    n = y0.shape[0]
    y = y0.copy()
    K = np.empty((13, n))
    sigma = 0.0
    rhs(kind, sigma, y, P, aux, K[0])
    h = _initial_step(kind, P, aux, sigma, y, K[0], 1.0, rtol, atol)
    ynew = np.empty(n)
    steps = 0
    sign = aux[0]
    tail = np.inf
    while True:
        if steps >= max_steps:
            return y, y.copy(), sigma, tail, MAX_STEPS, steps
        if sigma >= sigma_max:
            return y, y.copy(), sigma, tail, NOT_CONVERGED, steps
        if h < 1e-14:
            return y, y.copy(), sigma, tail, UNDERFLOW, steps
        hh = min(h, sigma_max - sigma)
        err = _step(kind, P, aux, sigma, y, hh, K, ynew, rtol, atol)
        steps += 1
        if not math.isfinite(err):
            h *= 0.2
            continue
        if err >= 1.0:
            h *= max(0.2, 0.9 * err ** (-1.0 / 8.0))
            continue
        sigma += hh
        for i in range(n):
            y[i] = ynew[i]
            K[0, i] = K[12, i]
        h = hh * (10.0 if err == 0.0 else min(10.0, 0.9 * err ** (-1.0 / 8.0)))
        if not _finite(y):
            return y, y.copy(), sigma, tail, NONFINITE, steps
        tail = 0.0
        for k in range(mask.shape[0]):
            tail = max(tail, abs(K[0, mask[k]]) / rates[k])
        if tail < tail_tol and _escaped(kind, P, y, sign):
            break
    y2 = y.copy()
    status, _, st = integrate_to(kind, P, aux, y2, sigma, sigma + math.log(2.0),
                                 rtol, atol, h, max_steps)
    return y, y2, sigma, tail, status, steps + st


# ---------------------------------------------------------------- batched helpers

@njit(cache=True)
def bracket_min_samples(P, xs, xis, h_rel):
    """{{|x|^2,p},p} at many points; second xi-derivatives of p by central FD."""
    m = xs.shape[0]
    d = xs.shape[1]
    out = np.empty(m)
    g = np.empty(d)
    dummy = np.empty((1, 1))
    v = np.empty(d)
    vp = np.empty(d)
    vm = np.empty(d)
    for k in range(m):
        x = xs[k]
        xi = xis[k]
        vr_all(P, x, g, dummy, True, False)
        p0_grad(P, xi, v)
        # d/dt of 2 x.v(xi) along the flow: 2|v|^2 - 2 x^T Hxi grad V_R
        acc = 0.0
        for i in range(d):
            acc += v[i] * v[i]
        # Hxi x via central FD of v along direction x
        nx = math.sqrt(_norm2(x))
        if nx > 0.0:
            hh = h_rel * max(1.0, math.sqrt(_norm2(xi)))
            xp = xi.copy()
            xm = xi.copy()
            for i in range(d):
                xp[i] += hh * x[i] / nx
                xm[i] -= hh * x[i] / nx
            p0_grad(P, xp, vp)
            p0_grad(P, xm, vm)
            dd = 0.0
            for i in range(d):
                dd += (vp[i] - vm[i]) / (2.0 * hh) * g[i]
            acc -= nx * dd
        out[k] = 2.0 * acc
    return out
