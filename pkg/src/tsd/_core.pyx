# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled integrator core: DOP853 with dense output plus the analytic
vector field and variational flow.  Mirrors _engine_py exactly; see there
for the mode and layout conventions."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, sqrt, fabs, pow, fmin, fmax

from ._dop853 import (A as _A, B as _B, C as _C, D as _D, E3 as _E3, E5 as _E5,
                      N_STAGES as _NS, N_STAGES_EXTENDED as _NSE)

BACKEND_NAME = "compiled"

cdef int N_STAGES = _NS
cdef int N_STAGES_EXT = _NSE
cdef double[:, ::1] TAB_A = np.ascontiguousarray(_A, dtype=np.float64)
cdef double[::1] TAB_B = np.ascontiguousarray(_B, dtype=np.float64)
cdef double[::1] TAB_C = np.ascontiguousarray(_C, dtype=np.float64)
cdef double[:, ::1] TAB_D = np.ascontiguousarray(_D, dtype=np.float64)
cdef double[::1] TAB_E3 = np.ascontiguousarray(_E3, dtype=np.float64)
cdef double[::1] TAB_E5 = np.ascontiguousarray(_E5, dtype=np.float64)

cdef double SAFETY = 0.9
cdef double MIN_FACTOR = 0.2
cdef double MAX_FACTOR = 10.0
cdef double ERROR_EXPONENT = -0.125
cdef double DBL_EPS = 2.220446049250313e-16

cdef int MODE_S6 = 0, MODE_V6 = 1, MODE_S4 = 2, MODE_V4 = 3


cdef inline double ipow(double x, int e) nogil:
    cdef double r = 1.0
    cdef int i
    for i in range(e):
        r *= x
    return r


cdef void h1_grad(double[::1] coef, int[::1] fid, int[:, ::1] expo,
                  double* y, double* g) nogil:
    """Gradient of H1 in y-ordering; writes 6 doubles into g."""
    cdef double q3 = y[4], p3 = y[5]
    cdef double vars4[4]
    cdef int slot_to_y[4]
    cdef double fv, fq, fp, m, dm, c
    cdef int k, s, r, e
    vars4[0] = y[1]; vars4[1] = y[0]; vars4[2] = y[3]; vars4[3] = y[2]
    slot_to_y[0] = 1; slot_to_y[1] = 0; slot_to_y[2] = 3; slot_to_y[3] = 2
    for s in range(6):
        g[s] = 0.0
    cdef double cos3 = cos(q3), sin3 = sin(q3)
    for k in range(coef.shape[0]):
        c = coef[k]
        if fid[k] == 0:
            fv = cos3 - 1.0; fq = -sin3; fp = 0.0
        elif fid[k] == 1:
            fv = sin3; fq = cos3; fp = 0.0
        elif fid[k] == 2:
            fv = p3; fq = 0.0; fp = 1.0
        else:
            fv = p3 * p3; fq = 0.0; fp = 2.0 * p3
        m = 1.0
        for s in range(4):
            e = expo[k, s]
            if e:
                m *= ipow(vars4[s], e)
        for s in range(4):
            e = expo[k, s]
            if e:
                dm = e * ipow(vars4[s], e - 1)
                for r in range(4):
                    if r != s and expo[k, r]:
                        dm *= ipow(vars4[r], expo[k, r])
                g[slot_to_y[s]] += c * fv * dm
        g[4] += c * fq * m
        g[5] += c * fp * m


cdef void h1_hess(double[::1] coef, int[::1] fid, int[:, ::1] expo,
                  double* y, double* h) nogil:
    """Hessian of H1 in y-ordering, accumulated into h (6x6 row-major)."""
    cdef double q3 = y[4], p3 = y[5]
    cdef double vars4[4]
    cdef int slot_to_y[4]
    cdef double dm[4]
    cdef double fv, fq, fp, fqq, fqp, fpp, m, v, c
    cdef int k, s, r, t, e, ys, yr
    vars4[0] = y[1]; vars4[1] = y[0]; vars4[2] = y[3]; vars4[3] = y[2]
    slot_to_y[0] = 1; slot_to_y[1] = 0; slot_to_y[2] = 3; slot_to_y[3] = 2
    cdef double cos3 = cos(q3), sin3 = sin(q3)
    for k in range(coef.shape[0]):
        c = coef[k]
        if fid[k] == 0:
            fv = cos3 - 1.0; fq = -sin3; fp = 0.0; fqq = -cos3; fqp = 0.0; fpp = 0.0
        elif fid[k] == 1:
            fv = sin3; fq = cos3; fp = 0.0; fqq = -sin3; fqp = 0.0; fpp = 0.0
        elif fid[k] == 2:
            fv = p3; fq = 0.0; fp = 1.0; fqq = 0.0; fqp = 0.0; fpp = 0.0
        else:
            fv = p3 * p3; fq = 0.0; fp = 2.0 * p3; fqq = 0.0; fqp = 0.0; fpp = 2.0
        m = 1.0
        for s in range(4):
            e = expo[k, s]
            if e:
                m *= ipow(vars4[s], e)
        for s in range(4):
            e = expo[k, s]
            if e:
                v = e * ipow(vars4[s], e - 1)
                for r in range(4):
                    if r != s and expo[k, r]:
                        v *= ipow(vars4[r], expo[k, r])
                dm[s] = v
            else:
                dm[s] = 0.0
        for s in range(4):
            ys = slot_to_y[s]
            for r in range(s, 4):
                yr = slot_to_y[r]
                if s == r:
                    e = expo[k, s]
                    if e >= 2:
                        v = e * (e - 1) * ipow(vars4[s], e - 2)
                        for t in range(4):
                            if t != s and expo[k, t]:
                                v *= ipow(vars4[t], expo[k, t])
                        h[ys * 6 + ys] += c * fv * v
                else:
                    if expo[k, s] and expo[k, r]:
                        v = expo[k, s] * ipow(vars4[s], expo[k, s] - 1) * \
                            expo[k, r] * ipow(vars4[r], expo[k, r] - 1)
                        for t in range(4):
                            if t != s and t != r and expo[k, t]:
                                v *= ipow(vars4[t], expo[k, t])
                        h[ys * 6 + yr] += c * fv * v
                        h[yr * 6 + ys] += c * fv * v
            h[ys * 6 + 4] += c * fq * dm[s]
            h[4 * 6 + ys] += c * fq * dm[s]
            h[ys * 6 + 5] += c * fp * dm[s]
            h[5 * 6 + ys] += c * fp * dm[s]
        h[4 * 6 + 4] += c * fqq * m
        h[4 * 6 + 5] += c * fqp * m
        h[5 * 6 + 4] += c * fqp * m
        h[5 * 6 + 5] += c * fpp * m


cdef void rhs_c(int mode, double* par, double[::1] coef, int[::1] fid,
                int[:, ::1] expo, double* y, double* dy) nogil:
    cdef double a1 = par[0], a2 = par[1], b1 = par[2], b2 = par[3]
    cdef double lam = par[4], eps = par[5]
    cdef double q1 = y[0], p1 = y[1], q2 = y[2], p2 = y[3]
    cdef double r1 = 0.5 * (p1 * p1 + q1 * q1)
    cdef double r2 = 0.5 * (p2 * p2 + q2 * q2)
    cdef double g[6]
    cdef double hess[36]
    cdef double amat[36]
    cdef int i, j, kk
    cdef double acc, q3, p3

    dy[0] = a1 * p1 + b1 * p1 * r1
    dy[1] = -a1 * q1 - b1 * q1 * r1
    dy[2] = a2 * p2 + b2 * p2 * r2
    dy[3] = -a2 * q2 - b2 * q2 * r2
    if mode == MODE_S6 or mode == MODE_V6:
        q3 = y[4]; p3 = y[5]
        dy[4] = p3
        dy[5] = lam * lam * sin(q3)
        if eps != 0.0 and coef.shape[0] > 0:
            h1_grad(coef, fid, expo, y, g)
            dy[0] += eps * g[1]
            dy[1] -= eps * g[0]
            dy[2] += eps * g[3]
            dy[3] -= eps * g[2]
            dy[4] += eps * g[5]
            dy[5] -= eps * g[4]
    if mode == MODE_V6:
        for i in range(36):
            hess[i] = 0.0
        hess[0 * 6 + 0] = a1 + 0.5 * b1 * (3 * q1 * q1 + p1 * p1)
        hess[1 * 6 + 1] = a1 + 0.5 * b1 * (q1 * q1 + 3 * p1 * p1)
        hess[0 * 6 + 1] = b1 * p1 * q1
        hess[1 * 6 + 0] = hess[0 * 6 + 1]
        hess[2 * 6 + 2] = a2 + 0.5 * b2 * (3 * q2 * q2 + p2 * p2)
        hess[3 * 6 + 3] = a2 + 0.5 * b2 * (q2 * q2 + 3 * p2 * p2)
        hess[2 * 6 + 3] = b2 * p2 * q2
        hess[3 * 6 + 2] = hess[2 * 6 + 3]
        hess[4 * 6 + 4] = -lam * lam * cos(y[4])
        hess[5 * 6 + 5] = 1.0
        if eps != 0.0 and coef.shape[0] > 0:
            for i in range(36):
                amat[i] = 0.0
            h1_hess(coef, fid, expo, y, amat)
            for i in range(36):
                hess[i] += eps * amat[i]
        for i in range(3):
            for j in range(6):
                amat[(2 * i) * 6 + j] = hess[(2 * i + 1) * 6 + j]
                amat[(2 * i + 1) * 6 + j] = -hess[(2 * i) * 6 + j]
        for i in range(6):
            for j in range(6):
                acc = 0.0
                for kk in range(6):
                    acc += amat[i * 6 + kk] * y[6 + kk * 6 + j]
                dy[6 + i * 6 + j] = acc
    elif mode == MODE_V4:
        for i in range(16):
            hess[i] = 0.0
        hess[0 * 4 + 0] = a1 + 0.5 * b1 * (3 * q1 * q1 + p1 * p1)
        hess[1 * 4 + 1] = a1 + 0.5 * b1 * (q1 * q1 + 3 * p1 * p1)
        hess[0 * 4 + 1] = b1 * p1 * q1
        hess[1 * 4 + 0] = hess[0 * 4 + 1]
        hess[2 * 4 + 2] = a2 + 0.5 * b2 * (3 * q2 * q2 + p2 * p2)
        hess[3 * 4 + 3] = a2 + 0.5 * b2 * (q2 * q2 + 3 * p2 * p2)
        hess[2 * 4 + 3] = b2 * p2 * q2
        hess[3 * 4 + 2] = hess[2 * 4 + 3]
        for i in range(2):
            for j in range(4):
                amat[(2 * i) * 4 + j] = hess[(2 * i + 1) * 4 + j]
                amat[(2 * i + 1) * 4 + j] = -hess[(2 * i) * 4 + j]
        for i in range(4):
            for j in range(4):
                acc = 0.0
                for kk in range(4):
                    acc += amat[i * 4 + kk] * y[4 + kk * 4 + j]
                dy[4 + i * 4 + j] = acc


def rhs_eval(int mode, double[::1] par, double[::1] coef, int[::1] fid,
             int[:, ::1] expo, double[::1] y):
    """Single vector-field evaluation (for core-vs-fallback agreement tests)."""
    cdef int n = y.shape[0]
    out = np.empty(n)
    cdef double[::1] dy = out
    rhs_c(mode, &par[0], coef, fid, expo, &y[0], &dy[0])
    return out


def integrate_raw(int mode, double[::1] par, double[::1] coef, int[::1] fid,
                  int[:, ::1] expo, double[::1] y0, double t0, double t_end,
                  double rtol, double atol, double max_step, long max_steps,
                  bint dense):
    """Adaptive DOP853 run; see _engine_py.integrate_raw for the contract."""
    cdef int n
    if mode == 0:
        n = 6
    elif mode == 1:
        n = 42
    elif mode == 2:
        n = 4
    elif mode == 3:
        n = 20
    else:
        raise ValueError("unknown mode")
    if y0.shape[0] != n:
        raise ValueError("state size does not match mode")

    cdef long cap = 1024
    ts_buf = np.empty(cap)
    ys_buf = np.empty((cap, n))
    fs_buf = np.empty((cap, 7, n)) if dense else np.empty((1, 7, n))
    cdef double[::1] ts = ts_buf
    cdef double[:, ::1] ys = ys_buf
    cdef double[:, :, ::1] fs = fs_buf

    cdef double K[672]           # 16 * 42
    cdef double ycur[42]
    cdef double ytmp[42]
    cdef double ynew[42]
    cdef double fcur[42]
    cdef double t = t0, h = 0.0, h_abs, h_abs_next = 0.0
    cdef double direction
    cdef double d0, d1, d2, h0, h1n, errn, err5n2, err3n2, denom, sc, e5, e3
    cdef double delta, factor
    cdef long m = 0, nfev = 0, step_i
    cdef int i, s, j, status
    cdef bint step_rejected

    for i in range(n):
        ycur[i] = y0[i]
    ts[0] = t
    for i in range(n):
        ys[0, i] = ycur[i]
    direction = 1.0 if t_end >= t0 else -1.0
    if t_end == t0:
        return 0, ts_buf[:1].copy(), ys_buf[:1].copy(), np.zeros((0, 7, n)), 0

    rhs_c(mode, &par[0], coef, fid, expo, ycur, fcur)
    nfev += 1

    d0 = 0.0; d1 = 0.0
    for i in range(n):
        sc = atol + rtol * fabs(ycur[i])
        d0 += (ycur[i] / sc) * (ycur[i] / sc)
        d1 += (fcur[i] / sc) * (fcur[i] / sc)
    d0 = sqrt(d0 / n); d1 = sqrt(d1 / n)
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    for i in range(n):
        ytmp[i] = ycur[i] + h0 * fcur[i]
    rhs_c(mode, &par[0], coef, fid, expo, ytmp, ynew)
    nfev += 1
    d2 = 0.0
    for i in range(n):
        sc = atol + rtol * fabs(ycur[i])
        d2 += ((ynew[i] - fcur[i]) / sc) * ((ynew[i] - fcur[i]) / sc)
    d2 = sqrt(d2 / n) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1n = fmax(1e-6, h0 * 1e-3)
    else:
        h1n = pow(0.01 / fmax(d1, d2), 0.125)
    h_abs = fmin(fmin(100 * h0, h1n), fmin(fabs(t_end - t0), max_step))

    status = 2
    for step_i in range(max_steps):
        if direction * (t - t_end) >= 0:
            status = 0
            break
        h_abs = fmin(h_abs, max_step)
        step_rejected = False
        while True:
            if h_abs < 10 * DBL_EPS * fmax(fabs(t), 1.0):
                status = 1
                break
            h = direction * fmin(h_abs, fabs(t_end - t))
            for i in range(n):
                K[i] = fcur[i]
            for s in range(1, N_STAGES):
                for i in range(n):
                    ytmp[i] = 0.0
                for j in range(s):
                    sc = TAB_A[s, j]
                    if sc != 0.0:
                        for i in range(n):
                            ytmp[i] += sc * K[j * n + i]
                for i in range(n):
                    ytmp[i] = ycur[i] + h * ytmp[i]
                rhs_c(mode, &par[0], coef, fid, expo, ytmp, &K[s * n])
            nfev += N_STAGES - 1
            for i in range(n):
                ytmp[i] = 0.0
            for j in range(N_STAGES):
                sc = TAB_B[j]
                if sc != 0.0:
                    for i in range(n):
                        ytmp[i] += sc * K[j * n + i]
            for i in range(n):
                ynew[i] = ycur[i] + h * ytmp[i]
            rhs_c(mode, &par[0], coef, fid, expo, ynew, &K[N_STAGES * n])
            nfev += 1
            err5n2 = 0.0; err3n2 = 0.0
            for i in range(n):
                sc = atol + rtol * fmax(fabs(ycur[i]), fabs(ynew[i]))
                e5 = 0.0; e3 = 0.0
                for j in range(N_STAGES + 1):
                    e5 += TAB_E5[j] * K[j * n + i]
                    e3 += TAB_E3[j] * K[j * n + i]
                e5 /= sc; e3 /= sc
                err5n2 += e5 * e5
                err3n2 += e3 * e3
            if err5n2 == 0.0 and err3n2 == 0.0:
                errn = 0.0
            else:
                denom = err5n2 + 0.01 * err3n2
                errn = fabs(h) * err5n2 / sqrt(denom * n)
            if errn < 1.0:
                factor = MAX_FACTOR if errn == 0.0 else fmin(MAX_FACTOR, SAFETY * pow(errn, ERROR_EXPONENT))
                if step_rejected:
                    factor = fmin(1.0, factor)
                h_abs_next = fabs(h) * factor
                break
            h_abs = fabs(h) * fmax(MIN_FACTOR, SAFETY * pow(errn, ERROR_EXPONENT))
            step_rejected = True
        if status == 1:
            break
        if m + 2 > cap:
            cap *= 2
            ts_buf = np.resize(ts_buf, cap)
            ys_buf = np.resize(ys_buf, (cap, n))
            ts = ts_buf
            ys = ys_buf
            if dense:
                fs_buf = np.resize(fs_buf, (cap, 7, n))
                fs = fs_buf
        if dense:
            for s in range(N_STAGES + 1, N_STAGES_EXT):
                for i in range(n):
                    ytmp[i] = 0.0
                for j in range(s):
                    sc = TAB_A[s, j]
                    if sc != 0.0:
                        for i in range(n):
                            ytmp[i] += sc * K[j * n + i]
                for i in range(n):
                    ytmp[i] = ycur[i] + h * ytmp[i]
                rhs_c(mode, &par[0], coef, fid, expo, ytmp, &K[s * n])
            nfev += N_STAGES_EXT - N_STAGES - 1
            for i in range(n):
                delta = ynew[i] - ycur[i]
                fs[m, 0, i] = delta
                fs[m, 1, i] = h * K[i] - delta
                fs[m, 2, i] = 2.0 * delta - h * (K[N_STAGES * n + i] + K[i])
            for s in range(4):
                for i in range(n):
                    sc = 0.0
                    for j in range(N_STAGES_EXT):
                        sc += TAB_D[s, j] * K[j * n + i]
                    fs[m, 3 + s, i] = h * sc
        t = t + h
        for i in range(n):
            ycur[i] = ynew[i]
            fcur[i] = K[N_STAGES * n + i]
        h_abs = h_abs_next
        m += 1
        ts[m] = t
        for i in range(n):
            ys[m, i] = ycur[i]

    ts_out = ts_buf[:m + 1].copy()
    ys_out = ys_buf[:m + 1].copy()
    fs_out = fs_buf[:m].copy() if dense else np.zeros((0, 7, n))
    return status, ts_out, ys_out, fs_out, nfev
