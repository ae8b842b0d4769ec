# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled ADMM kernels; same contract as ``rowfed._pykernels``.

Fusion rows are visited in lexicographic pair order (0,1), (0,2), ...,
(M-2, M-1), each pair spanning p consecutive rows, followed by the M*p
identity rows. No temporaries of fusion size are allocated.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

DEF L1 = 0
DEF MCP = 1
DEF SCAD = 2


cdef inline double _row_scale(double nrm, double lam, int family,
                              double gamma, double rho) nogil:
    cdef double shrink, a, knot, mid
    if nrm <= 0.0:
        return 0.0
    shrink = 1.0 - (lam / rho) / nrm
    if shrink < 0.0:
        shrink = 0.0
    if family == L1:
        return shrink
    if family == MCP:
        if nrm <= gamma * lam:
            return shrink / (1.0 - 1.0 / (gamma * rho))
        return 1.0
    a = gamma
    knot = lam * (1.0 + 1.0 / rho)
    if nrm <= knot:
        return shrink
    if nrm <= a * lam:
        mid = 1.0 - (a * lam / ((a - 1.0) * rho)) / nrm
        if mid < 0.0:
            mid = 0.0
        return mid / (1.0 - 1.0 / ((a - 1.0) * rho))
    return 1.0


cdef inline double _pen(double t, double lam, int family, double gamma) nogil:
    cdef double a
    if family == L1:
        return lam * t
    if family == MCP:
        if t <= gamma * lam:
            return lam * t - t * t / (2.0 * gamma)
        return 0.5 * gamma * lam * lam
    a = gamma
    if t <= lam:
        return lam * t
    if t <= a * lam:
        return (2.0 * a * lam * t - t * t - lam * lam) / (2.0 * (a - 1.0))
    return 0.5 * lam * lam * (a + 1.0)


def apply_A(const double[:, :, ::1] theta):
    cdef Py_ssize_t M = theta.shape[0], p = theta.shape[1], q = theta.shape[2]
    cdef Py_ssize_t K = M * (M - 1) // 2
    out_arr = np.empty((K * p + M * p, q))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, l, j, c, d = 0
    with nogil:
        for i in range(M):
            for l in range(i + 1, M):
                for j in range(p):
                    for c in range(q):
                        out[d, c] = theta[i, j, c] - theta[l, j, c]
                    d += 1
        for i in range(M):
            for j in range(p):
                for c in range(q):
                    out[d, c] = theta[i, j, c]
                d += 1
    return out_arr


def apply_At(const double[:, ::1] S, Py_ssize_t M, Py_ssize_t p):
    cdef Py_ssize_t q = S.shape[1]
    out_arr = np.empty((M, p, q))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, l, j, c, d
    cdef Py_ssize_t K = M * (M - 1) // 2
    cdef double v
    with nogil:
        d = K * p
        for i in range(M):
            for j in range(p):
                for c in range(q):
                    out[i, j, c] = S[d, c]
                d += 1
        d = 0
        for i in range(M):
            for l in range(i + 1, M):
                for j in range(p):
                    for c in range(q):
                        v = S[d, c]
                        out[i, j, c] += v
                        out[l, j, c] -= v
                    d += 1
    return out_arr


def apply_AtA(const double[:, :, ::1] theta):
    cdef Py_ssize_t M = theta.shape[0], p = theta.shape[1], q = theta.shape[2]
    out_arr = np.empty((M, p, q))
    tot_arr = np.zeros((p, q))
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] tot = tot_arr
    cdef Py_ssize_t m, j, c
    with nogil:
        for m in range(M):
            for j in range(p):
                for c in range(q):
                    tot[j, c] += theta[m, j, c]
        for m in range(M):
            for j in range(p):
                for c in range(q):
                    out[m, j, c] = (M + 1) * theta[m, j, c] - tot[j, c]
    return out_arr


def prox_rows(const double[:, ::1] psi, lam, int family, double gamma, double rho):
    cdef Py_ssize_t R = psi.shape[0], q = psi.shape[1]
    cdef const double[::1] lam_v = np.ascontiguousarray(np.broadcast_to(np.asarray(lam, dtype=np.float64), (R,)))
    out_arr = np.empty((R, q))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t d, c
    cdef double nrm, s
    with nogil:
        for d in range(R):
            nrm = 0.0
            for c in range(q):
                nrm += psi[d, c] * psi[d, c]
            s = _row_scale(sqrt(nrm), lam_v[d], family, gamma, rho)
            for c in range(q):
                out[d, c] = psi[d, c] * s
    return out_arr


def tilde_theta(const double[:, :, ::1] theta, const double[:, ::1] P,
                const double[:, ::1] G, double rho, double coef):
    cdef Py_ssize_t M = theta.shape[0], p = theta.shape[1], q = theta.shape[2]
    out_arr = np.empty((M, p, q))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, l, j, c, d
    cdef Py_ssize_t K = M * (M - 1) // 2
    cdef double w
    with nogil:
        d = K * p
        for i in range(M):
            for j in range(p):
                for c in range(q):
                    out[i, j, c] = G[d, c] + rho * (theta[i, j, c] - P[d, c])
                d += 1
        d = 0
        for i in range(M):
            for l in range(i + 1, M):
                for j in range(p):
                    for c in range(q):
                        w = G[d, c] + rho * ((theta[i, j, c] - theta[l, j, c]) - P[d, c])
                        out[i, j, c] += w
                        out[l, j, c] -= w
                    d += 1
        for i in range(M):
            for j in range(p):
                for c in range(q):
                    out[i, j, c] = theta[i, j, c] - coef * out[i, j, c]
    return out_arr


cdef inline void _pg_row(double* a, double* P, double* G, Py_ssize_t q, double rho,
                         double lam, int family, double gamma,
                         double* primal, double* dpsq) nogil:
    cdef Py_ssize_t c
    cdef double nrm = 0.0, s, psi, pn, r
    for c in range(q):
        psi = a[c] + G[c] / rho
        nrm += psi * psi
    s = _row_scale(sqrt(nrm), lam, family, gamma, rho)
    for c in range(q):
        psi = a[c] + G[c] / rho
        pn = psi * s
        r = a[c] - pn
        G[c] += rho * r
        primal[0] += r * r
        dpsq[0] += (pn - P[c]) * (pn - P[c])
        P[c] = pn


def pg_step(const double[:, :, ::1] theta, double[:, ::1] P, double[:, ::1] G,
            double rho, double lam_fuse, double lam_id, int family, double gamma):
    cdef Py_ssize_t M = theta.shape[0], p = theta.shape[1], q = theta.shape[2]
    cdef Py_ssize_t i, l, j, c, d = 0
    cdef double primal = 0.0, dpsq = 0.0
    buf_arr = np.empty(q)
    cdef double[::1] buf = buf_arr
    with nogil:
        for i in range(M):
            for l in range(i + 1, M):
                for j in range(p):
                    for c in range(q):
                        buf[c] = theta[i, j, c] - theta[l, j, c]
                    _pg_row(&buf[0], &P[d, 0], &G[d, 0], q, rho, lam_fuse,
                            family, gamma, &primal, &dpsq)
                    d += 1
        for i in range(M):
            for j in range(p):
                for c in range(q):
                    buf[c] = theta[i, j, c]
                _pg_row(&buf[0], &P[d, 0], &G[d, 0], q, rho, lam_id,
                        family, gamma, &primal, &dpsq)
                d += 1
    return primal, dpsq


def penalty_sum(const double[:, ::1] P, Py_ssize_t fusion_rows, double lam_fuse,
                double lam_id, int family, double gamma):
    cdef Py_ssize_t R = P.shape[0], q = P.shape[1], d, c
    cdef double tot = 0.0, nrm
    with nogil:
        for d in range(R):
            nrm = 0.0
            for c in range(q):
                nrm += P[d, c] * P[d, c]
            tot += _pen(sqrt(nrm), lam_fuse if d < fusion_rows else lam_id, family, gamma)
    return tot
