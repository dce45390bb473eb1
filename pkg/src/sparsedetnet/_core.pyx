# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: batched Gram matrices, pivoted solves and exhaustive
ML search. Signatures and results mirror ``_fallback``."""
import numpy as np

from libc.math cimport fabs

DEF PIVOT_RTOL = 1e-12


def matvec(double[:, ::1] A, double[::1] v):
    cdef Py_ssize_t m = A.shape[0], n = A.shape[1], i, j
    cdef double acc
    out = np.empty(m)
    cdef double[::1] o = out
    for i in range(m):
        acc = 0.0
        for j in range(n):
            acc += A[i, j] * v[j]
        o[i] = acc
    return out


def gram_batch(double[:, :, ::1] H):
    cdef Py_ssize_t B = H.shape[0], N = H.shape[1], K = H.shape[2]
    cdef Py_ssize_t b, i, j, n
    cdef double acc
    out = np.empty((B, K, K))
    cdef double[:, :, ::1] G = out
    for b in range(B):
        for i in range(K):
            for j in range(i, K):
                acc = 0.0
                for n in range(N):
                    acc += H[b, n, i] * H[b, n, j]
                G[b, i, j] = acc
                G[b, j, i] = acc
    return out


def solve_batch(double[:, :, ::1] G, double[:, ::1] rhs):
    cdef Py_ssize_t B = G.shape[0], K = G.shape[1]
    cdef Py_ssize_t b, col, r, c, piv
    cdef double tol, best, f, tmp, acc
    A_arr = np.array(G, copy=True)
    x_arr = np.array(rhs, copy=True)
    u_arr = np.empty((B, K))
    cdef double[:, :, ::1] A = A_arr
    cdef double[:, ::1] x = x_arr
    cdef double[:, ::1] u = u_arr
    for b in range(B):
        tol = 0.0
        for r in range(K):
            for c in range(K):
                if fabs(A[b, r, c]) > tol:
                    tol = fabs(A[b, r, c])
        tol *= PIVOT_RTOL
        for col in range(K):
            piv = col
            best = fabs(A[b, col, col])
            for r in range(col + 1, K):
                if fabs(A[b, r, col]) > best:
                    best = fabs(A[b, r, col])
                    piv = r
            if not (best >= tol) or tol == 0.0:
                return x_arr, b
            if piv != col:
                for c in range(col, K):
                    tmp = A[b, col, c]
                    A[b, col, c] = A[b, piv, c]
                    A[b, piv, c] = tmp
                tmp = x[b, col]
                x[b, col] = x[b, piv]
                x[b, piv] = tmp
            for r in range(col + 1, K):
                f = A[b, r, col] / A[b, col, col]
                for c in range(col, K):
                    A[b, r, c] -= f * A[b, col, c]
                x[b, r] -= f * x[b, col]
        for r in range(K - 1, -1, -1):
            acc = x[b, r]
            for c in range(r + 1, K):
                acc -= A[b, r, c] * u[b, c]
            u[b, r] = acc / A[b, r, r]
    return u_arr, -1


cdef inline bint _lex_less(double[::1] a, double[::1] b, Py_ssize_t K) nogil:
    cdef Py_ssize_t i
    for i in range(K):
        if a[i] != b[i]:
            return a[i] < b[i]
    return False


def ml_search_batch(double[:, :, ::1] H, double[:, ::1] y):
    """Exhaustive BPSK search in Gray-code order.

    Each step flips one symbol, so the residual y - Hs is updated in O(N)
    instead of recomputed in O(NK). Exact metric ties resolve to the
    lexicographically smallest candidate.
    """
    cdef Py_ssize_t B = H.shape[0], N = H.shape[1], K = H.shape[2]
    cdef Py_ssize_t b, n, i, step, total = (<Py_ssize_t>1) << K
    cdef double metric, best_metric, sgn
    cdef unsigned long long g, prev
    out_arr = np.empty((B, K))
    s_arr = np.empty(K)
    best_arr = np.empty(K)
    r_arr = np.empty(N)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] s = s_arr
    cdef double[::1] best = best_arr
    cdef double[::1] r = r_arr
    for b in range(B):
        for i in range(K):
            s[i] = -1.0
        for n in range(N):
            r[n] = y[b, n]
            for i in range(K):
                r[n] += H[b, n, i]
        metric = 0.0
        for n in range(N):
            metric += r[n] * r[n]
        best_metric = metric
        best[:] = s
        prev = 0
        for step in range(1, total):
            g = step ^ (step >> 1)
            # flipped bit -> symbol index, most significant symbol first
            i = K - 1
            while not ((g ^ prev) >> (K - 1 - i)) & 1:
                i -= 1
            prev = g
            sgn = 2.0 * s[i]
            s[i] = -s[i]
            metric = 0.0
            for n in range(N):
                r[n] += sgn * H[b, n, i]
                metric += r[n] * r[n]
            if metric < best_metric or (metric == best_metric and _lex_less(s, best, K)):
                best_metric = metric
                best[:] = s
        out[b, :] = best
    return out_arr
