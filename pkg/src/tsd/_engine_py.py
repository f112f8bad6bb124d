"""Pure-python integrator core.

Same algorithm as the compiled core in _core.pyx: an adaptive Dormand-Prince
8(5,3) stepper with the degree-7 dense output, plus the analytic vector field
and first variational flow of the oscillator-pendulum Hamiltonian.  The
compiled core is preferred at import time; this module is the fallback and
the reference the extension is tested against.

Modes: 0 state (n=6) | 1 state+variational (n=42)
       2 oscillator subsystem H00 (n=4) | 3 its variational flow (n=20)
State ordering (q1, p1, q2, p2, q3, p3); variational columns row-major.
"""

from __future__ import annotations

import math

import numpy as np

from ._dop853 import A, B, C, D, E3, E5, N_STAGES, N_STAGES_EXTENDED

BACKEND_NAME = "python"

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_ERROR_EXPONENT = -1.0 / 8.0

MODE_SIZES = {0: 6, 1: 42, 2: 4, 3: 20}


def _h1_grad_hess(par, coef, fid, expo, y, need_hess):
    """Gradient (and optionally Hessian) of H1 in y-ordering."""
    q1, p1, q2, p2, q3, p3 = y[:6]
    vars4 = np.array([p1, q1, p2, q2])
    slot_to_y = np.array([1, 0, 3, 2])
    g = np.zeros(6)
    h = np.zeros((6, 6)) if need_hess else None
    cos3, sin3 = math.cos(q3), math.sin(q3)
    for k in range(len(coef)):
        c = coef[k]
        f = fid[k]
        if f == 0:
            fv, fq, fp, fqq, fqp, fpp = cos3 - 1.0, -sin3, 0.0, -cos3, 0.0, 0.0
        elif f == 1:
            fv, fq, fp, fqq, fqp, fpp = sin3, cos3, 0.0, -sin3, 0.0, 0.0
        elif f == 2:
            fv, fq, fp, fqq, fqp, fpp = p3, 0.0, 1.0, 0.0, 0.0, 0.0
        else:
            fv, fq, fp, fqq, fqp, fpp = p3 * p3, 0.0, 2.0 * p3, 0.0, 0.0, 2.0
        e = expo[k]
        # monomial value and first/second partials in slot order
        m = 1.0
        for s in range(4):
            if e[s]:
                m *= vars4[s] ** e[s]
        dm = np.zeros(4)
        for s in range(4):
            if e[s]:
                v = e[s] * vars4[s] ** (e[s] - 1)
                for r in range(4):
                    if r != s and e[r]:
                        v *= vars4[r] ** e[r]
                dm[s] = v
        gy = np.zeros(6)
        gy[slot_to_y] = dm
        gy[4] = 0.0
        g[slot_to_y] += c * fv * dm
        g[4] += c * fq * m
        g[5] += c * fp * m
        if need_hess:
            d2m = np.zeros((4, 4))
            for s in range(4):
                for r in range(s, 4):
                    if s == r:
                        if e[s] >= 2:
                            v = e[s] * (e[s] - 1) * vars4[s] ** (e[s] - 2)
                            for t in range(4):
                                if t != s and e[t]:
                                    v *= vars4[t] ** e[t]
                            d2m[s, s] = v
                    else:
                        if e[s] and e[r]:
                            v = e[s] * vars4[s] ** (e[s] - 1) * e[r] * vars4[r] ** (e[r] - 1)
                            for t in range(4):
                                if t != s and t != r and e[t]:
                                    v *= vars4[t] ** e[t]
                            d2m[s, r] = d2m[r, s] = v
            for s in range(4):
                ys = slot_to_y[s]
                for r in range(4):
                    h[ys, slot_to_y[r]] += c * fv * d2m[s, r]
                h[ys, 4] += c * fq * dm[s]
                h[4, ys] += c * fq * dm[s]
                h[ys, 5] += c * fp * dm[s]
                h[5, ys] += c * fp * dm[s]
            h[4, 4] += c * fqq * m
            h[4, 5] += c * fqp * m
            h[5, 4] += c * fqp * m
            h[5, 5] += c * fpp * m
    return g, h


def _hessian6(par, coef, fid, expo, y):
    """Hessian of the full Hamiltonian in y-ordering."""
    a1, a2, b1, b2, lam, eps = par
    q1, p1, q2, p2, q3, p3 = y[:6]
    h = np.zeros((6, 6))
    h[0, 0] = a1 + 0.5 * b1 * (3 * q1 * q1 + p1 * p1)
    h[1, 1] = a1 + 0.5 * b1 * (q1 * q1 + 3 * p1 * p1)
    h[0, 1] = h[1, 0] = b1 * p1 * q1
    h[2, 2] = a2 + 0.5 * b2 * (3 * q2 * q2 + p2 * p2)
    h[3, 3] = a2 + 0.5 * b2 * (q2 * q2 + 3 * p2 * p2)
    h[2, 3] = h[3, 2] = b2 * p2 * q2
    h[4, 4] = -lam * lam * math.cos(q3)
    h[5, 5] = 1.0
    if eps != 0.0 and len(coef):
        _, h1 = _h1_grad_hess(par, coef, fid, expo, y, True)
        h += eps * h1
    return h


def _rhs_state6(par, coef, fid, expo, y):
    a1, a2, b1, b2, lam, eps = par
    q1, p1, q2, p2, q3, p3 = y[:6]
    r1 = 0.5 * (p1 * p1 + q1 * q1)
    r2 = 0.5 * (p2 * p2 + q2 * q2)
    dy = np.empty(6)
    dy[0] = a1 * p1 + b1 * p1 * r1
    dy[1] = -a1 * q1 - b1 * q1 * r1
    dy[2] = a2 * p2 + b2 * p2 * r2
    dy[3] = -a2 * q2 - b2 * q2 * r2
    dy[4] = p3
    dy[5] = lam * lam * math.sin(q3)
    if eps != 0.0 and len(coef):
        g, _ = _h1_grad_hess(par, coef, fid, expo, y, False)
        dy[0] += eps * g[1]
        dy[1] -= eps * g[0]
        dy[2] += eps * g[3]
        dy[3] -= eps * g[2]
        dy[4] += eps * g[5]
        dy[5] -= eps * g[4]
    return dy


def _rhs_state4(par, y):
    a1, a2, b1, b2 = par[0], par[1], par[2], par[3]
    q1, p1, q2, p2 = y[:4]
    r1 = 0.5 * (p1 * p1 + q1 * q1)
    r2 = 0.5 * (p2 * p2 + q2 * q2)
    return np.array([
        a1 * p1 + b1 * p1 * r1,
        -a1 * q1 - b1 * q1 * r1,
        a2 * p2 + b2 * p2 * r2,
        -a2 * q2 - b2 * q2 * r2,
    ])


def _symplectic_prod(hess):
    """A = S*hess with rows (2i) <- hess row (2i+1), rows (2i+1) <- -hess row (2i)."""
    a = np.empty_like(hess)
    a[0::2] = hess[1::2]
    a[1::2] = -hess[0::2]
    return a


def make_rhs(mode, par, coef, fid, expo):
    par = np.asarray(par, dtype=float)
    coef = np.asarray(coef, dtype=float)
    fid = np.asarray(fid, dtype=np.int32)
    expo = np.asarray(expo, dtype=np.int32).reshape(-1, 4)

    if mode == 0:
        return lambda y: _rhs_state6(par, coef, fid, expo, y)
    if mode == 2:
        return lambda y: _rhs_state4(par, y)
    if mode == 1:
        def rhs(y):
            dy = np.empty(42)
            dy[:6] = _rhs_state6(par, coef, fid, expo, y)
            amat = _symplectic_prod(_hessian6(par, coef, fid, expo, y))
            dy[6:] = (amat @ y[6:].reshape(6, 6)).ravel()
            return dy
        return rhs
    if mode == 3:
        def rhs(y):
            dy = np.empty(20)
            dy[:4] = _rhs_state4(par, y)
            h = np.zeros((4, 4))
            a1, a2, b1, b2 = par[0], par[1], par[2], par[3]
            q1, p1, q2, p2 = y[:4]
            h[0, 0] = a1 + 0.5 * b1 * (3 * q1 * q1 + p1 * p1)
            h[1, 1] = a1 + 0.5 * b1 * (q1 * q1 + 3 * p1 * p1)
            h[0, 1] = h[1, 0] = b1 * p1 * q1
            h[2, 2] = a2 + 0.5 * b2 * (3 * q2 * q2 + p2 * p2)
            h[3, 3] = a2 + 0.5 * b2 * (q2 * q2 + 3 * p2 * p2)
            h[2, 3] = h[3, 2] = b2 * p2 * q2
            amat = _symplectic_prod(h)
            dy[4:] = (amat @ y[4:].reshape(4, 4)).ravel()
            return dy
        return rhs
    raise ValueError(f"unknown mode {mode}")


def rhs_eval(mode, par, coef, fid, expo, y):
    """Single right-hand-side evaluation (shared signature with the compiled core)."""
    return make_rhs(mode, par, coef, fid, expo)(np.asarray(y, dtype=float))


def _initial_step(rhs, y0, f0, t_span, rtol, atol, max_step):
    scale = atol + rtol * np.abs(y0)
    d0 = np.linalg.norm(y0 / scale) / math.sqrt(len(y0))
    d1 = np.linalg.norm(f0 / scale) / math.sqrt(len(y0))
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    y1 = y0 + h0 * f0
    f1 = rhs(y1)
    d2 = np.linalg.norm((f1 - f0) / scale) / math.sqrt(len(y0)) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.125
    return min(100 * h0, h1, abs(t_span), max_step)


def integrate_raw(mode, par, coef, fid, expo, y0, t0, t_end, rtol, atol,
                  max_step=np.inf, max_steps=10_000_000, dense=True):
    """Adaptive DOP853 run from t0 to t_end (either direction).

    Returns (status, ts, ys, Fs, nfev): status 0 ok, 1 step underflow,
    2 max_steps exhausted; ts (m+1,), ys (m+1,n), Fs (m,7,n) dense blocks.
    """
    rhs = make_rhs(mode, par, coef, fid, expo)
    n = MODE_SIZES[mode]
    y = np.array(y0, dtype=float)
    if y.shape != (n,):
        raise ValueError(f"state size {y.shape} does not match mode {mode}")
    t = float(t0)
    t_end = float(t_end)
    direction = 1.0 if t_end >= t else -1.0
    ts = [t]
    ys = [y.copy()]
    Fs = []
    nfev = 0
    if t_end == t:
        return 0, np.array(ts), np.array(ys), np.zeros((0, 7, n)), nfev

    f = rhs(y)
    nfev += 1
    h_abs = _initial_step(rhs, y, f, t_end - t, rtol, atol, max_step)
    nfev += 1
    status = 2
    K = np.empty((N_STAGES_EXTENDED, n))
    rootn = math.sqrt(n)

    for _ in range(max_steps):
        if direction * (t - t_end) >= 0:
            status = 0
            break
        h_abs = min(h_abs, max_step)
        step_rejected = False
        while True:
            if h_abs < 10 * np.finfo(float).eps * max(abs(t), 1.0):
                status = 1
                break
            h = direction * min(h_abs, abs(t_end - t))
            K[0] = f
            for s in range(1, N_STAGES):
                dy = (K[:s].T @ A[s, :s]) * h
                K[s] = rhs(y + dy)
            nfev += N_STAGES - 1
            y_new = y + h * (K[:N_STAGES].T @ B)
            f_new = rhs(y_new)
            nfev += 1
            K[N_STAGES] = f_new
            scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
            err5 = (K[:N_STAGES + 1].T @ E5) / scale
            err3 = (K[:N_STAGES + 1].T @ E3) / scale
            err5n2 = float(err5 @ err5)
            err3n2 = float(err3 @ err3)
            if err5n2 == 0.0 and err3n2 == 0.0:
                error_norm = 0.0
            else:
                denom = err5n2 + 0.01 * err3n2
                error_norm = abs(h) * err5n2 / math.sqrt(denom * n)
            if error_norm < 1.0:
                factor = _MAX_FACTOR if error_norm == 0.0 else min(
                    _MAX_FACTOR, _SAFETY * error_norm ** _ERROR_EXPONENT)
                if step_rejected:
                    factor = min(1.0, factor)
                h_abs_next = abs(h) * factor
                break
            h_abs = abs(h) * max(_MIN_FACTOR, _SAFETY * error_norm ** _ERROR_EXPONENT)
            step_rejected = True
        if status == 1:
            break
        if dense:
            for s in range(N_STAGES + 1, N_STAGES_EXTENDED):
                dy = (K[:s].T @ A[s, :s]) * h
                K[s] = rhs(y + dy)
            nfev += N_STAGES_EXTENDED - N_STAGES - 1
            delta = y_new - y
            Fblock = np.empty((7, n))
            Fblock[0] = delta
            Fblock[1] = h * K[0] - delta
            Fblock[2] = 2.0 * delta - h * (f_new + K[0])
            Fblock[3:] = h * (D @ K)
            Fs.append(Fblock)
        t = t + h
        y = y_new
        f = f_new
        h_abs = h_abs_next
        ts.append(t)
        ys.append(y.copy())

    Fs_arr = np.array(Fs) if Fs else np.zeros((0, 7, n))
    return status, np.array(ts), np.array(ys), Fs_arr, nfev
