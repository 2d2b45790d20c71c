# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled batch solver for the pointwise Hamiltonian problems.

Same contract as ``rsopt._hampy``, one instance at a time in C. The coupling
multiplier is located with safeguarded false position instead of plain
bisection; both stop on the same collapsed bracket.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport pow, log, fabs, INFINITY, isfinite
from libc.stdlib cimport malloc, free

from rsopt.errors import InfeasibleError

cnp.import_array()

cdef int MAX_SWEEPS = 10000
cdef double SWEEP_TOL = 1e-15
cdef int BISECT_ITERS = 200
cdef int BRACKET_ITERS = 2100


cdef inline double _clip(double x, double lo, double hi) nogil:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


cdef double _c_star(double coef, double w, int cmode, double gamma,
                    double c_lo, double c_hi) nogil:
    cdef double c = INFINITY
    if coef > 0:
        if cmode == 1:
            c = pow(coef / w, 1.0 / (gamma - 1.0))
        elif cmode == 2:
            c = w / coef
    return _clip(c, c_lo, c_hi)


cdef int _cholesky(const double* A, double* L, int m) nogil:
    cdef int i, j, k
    cdef double s
    for i in range(m):
        for j in range(i + 1):
            s = A[i * m + j]
            for k in range(j):
                s -= L[i * m + k] * L[j * m + k]
            if i == j:
                if s <= 0:
                    return -1
                L[i * m + i] = s ** 0.5
            else:
                L[i * m + j] = s / L[j * m + j]
        for j in range(i + 1, m):
            L[i * m + j] = 0.0
    return 0


cdef void _chol_solve(const double* L, const double* b, double* x, int m) nogil:
    cdef int i, k
    cdef double s
    for i in range(m):
        s = b[i]
        for k in range(i):
            s -= L[i * m + k] * x[k]
        x[i] = s / L[i * m + i]
    for i in range(m - 1, -1, -1):
        s = x[i]
        for k in range(i + 1, m):
            s -= L[k * m + i] * x[k]
        x[i] = s / L[i * m + i]


cdef void _box_qp(const double* A, const double* L, const double* v, int m,
                  const double* lo, const double* hi, bint free_box,
                  bint warm, double* x) nogil:
    cdef int j, k, sweep
    cdef double rest, new, delta, d
    if free_box:
        _chol_solve(L, v, x, m)
        return
    if m == 1:
        x[0] = _clip(v[0] / A[0], lo[0], hi[0])
        return
    if not warm:
        _chol_solve(L, v, x, m)
        for j in range(m):
            x[j] = _clip(x[j], lo[j], hi[j])
    for sweep in range(MAX_SWEEPS):
        delta = 0.0
        for j in range(m):
            rest = 0.0
            for k in range(m):
                if k != j:
                    rest += A[j * m + k] * x[k]
            new = _clip((v[j] - rest) / A[j * m + j], lo[j], hi[j])
            d = fabs(new - x[j]) / (1.0 + fabs(new))
            if d > delta:
                delta = d
            x[j] = new
        if delta <= SWEEP_TOL:
            break


cdef double _objective(const double* A, const double* v, const double* x, int m,
                       double c, double w, double kappa, int cmode, double gamma) nogil:
    cdef int i, j
    cdef double quad = 0.0, lin = 0.0, s
    for i in range(m):
        s = 0.0
        for j in range(m):
            s += A[i * m + j] * x[j]
        quad += x[i] * s
        lin += x[i] * v[i]
    s = -0.5 * quad + lin
    if cmode == 1:
        s += w * pow(c, gamma) / gamma - kappa * c
    elif cmode == 2:
        s += w * log(c) - kappa * c
    return s


cdef double _g(const double* A, const double* L, const double* v, double* vt, int m,
               const double* lo, const double* hi, bint free_box, const double* base,
               const double* direc, const double* a, double a0, double beta0, double lam,
               double w, double kappa, int cmode, double gamma,
               double c_lo, double c_hi, double* x, double* c_out) nogil:
    cdef int j
    cdef double s = 0.0, c = 0.0
    if free_box:
        # pi is affine in lam when no bound can bind
        for j in range(m):
            x[j] = base[j] - lam * direc[j]
    else:
        for j in range(m):
            vt[j] = v[j] - lam * a[j]
        _box_qp(A, L, vt, m, lo, hi, free_box, True, x)
    for j in range(m):
        s += a[j] * x[j]
    if cmode:
        c = _c_star(kappa + lam * a0, w, cmode, gamma, c_lo, c_hi)
        if a0 != 0:
            s += a0 * c
    c_out[0] = c
    return s - beta0


def solve_batch(A, v, w, kappa, lo, hi, double c_lo, double c_hi, a, double a0,
                double beta0, bint has_half, int cmode, double gamma):
    """Return ``(pi, c, objective)`` for a batch of instances."""
    cdef cnp.ndarray[cnp.float64_t, ndim=3] A_ = np.ascontiguousarray(A, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] v_ = np.ascontiguousarray(v, dtype=np.float64)
    cdef Py_ssize_t B = v_.shape[0]
    cdef int m = <int>v_.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] w_ = np.ascontiguousarray(
        np.broadcast_to(np.asarray(w, dtype=np.float64), (B,)))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] k_ = np.ascontiguousarray(
        np.broadcast_to(np.asarray(kappa, dtype=np.float64), (B,)))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] lo_ = np.ascontiguousarray(lo, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] hi_ = np.ascontiguousarray(hi, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] a_ = np.ascontiguousarray(a, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] pi = np.empty((B, m))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] cs = np.empty(B)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] obj = np.empty(B)

    cdef double* L = <double*>malloc(m * m * sizeof(double))
    cdef double* vt = <double*>malloc(m * sizeof(double))
    cdef double* xt = <double*>malloc(m * sizeof(double))
    cdef double* base = <double*>malloc(m * sizeof(double))
    cdef double* direc = <double*>malloc(m * sizeof(double))
    cdef bint free_box = True
    cdef Py_ssize_t b
    cdef int j, it, status = 0
    cdef double c, g, lam_lo, lam_hi, lam_cap, mid, gm, cm, c_hi_side
    cdef double g_lo, g_hi, wl, wh, width, trial
    cdef int side
    cdef bint secant
    cdef double* Ab
    cdef double* vb
    cdef double* xb

    for j in range(m):
        if isfinite(lo_[j]) or isfinite(hi_[j]):
            free_box = False

    try:
        with nogil:
            for b in range(B):
                Ab = &A_[b, 0, 0]
                vb = &v_[b, 0]
                xb = &pi[b, 0]
                if _cholesky(Ab, L, m) != 0:
                    status = 1
                    break
                _box_qp(Ab, L, vb, m, &lo_[0], &hi_[0], free_box, False, xb)
                c = 0.0
                if cmode:
                    c = _c_star(k_[b], w_[b], cmode, gamma, c_lo, c_hi)
                if has_half:
                    g = -beta0
                    for j in range(m):
                        g += a_[j] * xb[j]
                    if cmode and a0 != 0:
                        g += a0 * c
                    if g > 0:
                        g_lo = g
                        if free_box:
                            for j in range(m):
                                base[j] = xb[j]
                            _chol_solve(L, &a_[0], direc, m)
                        lam_cap = INFINITY
                        if cmode and a0 < 0:
                            lam_cap = k_[b] / (-a0)
                        lam_lo = 0.0
                        lam_hi = 1.0
                        if 0.5 * lam_cap < lam_hi:
                            lam_hi = 0.5 * lam_cap
                        g = _g(Ab, L, vb, vt, m, &lo_[0], &hi_[0], free_box, base, direc, &a_[0], a0, beta0,
                               lam_hi, w_[b], k_[b], cmode, gamma, c_lo, c_hi, xb, &c)
                        it = 0
                        while g > 0:
                            it += 1
                            if it > BRACKET_ITERS:
                                status = 2
                                break
                            lam_lo = lam_hi
                            g_lo = g
                            if isfinite(lam_cap):
                                lam_hi = 0.5 * (lam_hi + lam_cap)
                            else:
                                lam_hi = 2.0 * lam_hi
                            if not isfinite(lam_hi):
                                status = 2
                                break
                            g = _g(Ab, L, vb, vt, m, &lo_[0], &hi_[0], free_box, base, direc, &a_[0], a0, beta0,
                                   lam_hi, w_[b], k_[b], cmode, gamma, c_lo, c_hi, xb, &c)
                        if status:
                            break
                        c_hi_side = c
                        g_hi = g
                        for j in range(m):
                            xt[j] = xb[j]
                        # Illinois false position on the monotone g; a step that fails
                        # to halve the bracket forces a bisection, so the bracket still
                        # collapses to adjacent doubles like plain bisection
                        wl = g_lo
                        wh = g_hi
                        side = 0
                        secant = True
                        for it in range(BISECT_ITERS):
                            width = lam_hi - lam_lo
                            mid = 0.5 * (lam_lo + lam_hi)
                            if mid <= lam_lo or mid >= lam_hi:
                                break
                            if secant and wl > 0 and wh < 0:
                                trial = lam_lo + width * (wl / (wl - wh))
                                if trial > lam_lo and trial < lam_hi:
                                    mid = trial
                            gm = _g(Ab, L, vb, vt, m, &lo_[0], &hi_[0], free_box, base, direc, &a_[0], a0,
                                    beta0, mid, w_[b], k_[b], cmode, gamma, c_lo, c_hi, xt, &cm)
                            if gm > 0:
                                lam_lo = mid
                                wl = gm
                                if side == 1:
                                    wh *= 0.5
                                side = 1
                                for j in range(m):
                                    xt[j] = xb[j]
                            else:
                                lam_hi = mid
                                wh = gm
                                if side == -1:
                                    wl *= 0.5
                                side = -1
                                c_hi_side = cm
                                for j in range(m):
                                    xb[j] = xt[j]
                                if gm == 0:
                                    break
                            secant = lam_hi - lam_lo <= 0.5 * width
                        c = c_hi_side
                cs[b] = c
                obj[b] = _objective(Ab, vb, xb, m, c, w_[b], k_[b], cmode, gamma)
    finally:
        free(L)
        free(vt)
        free(xt)
        free(base)
        free(direc)
    if status == 1:
        raise np.linalg.LinAlgError("quadratic form is not positive definite")
    if status == 2:
        raise InfeasibleError("coupling constraint cannot be satisfied")
    return pi, cs, obj
