"""Numpy implementations of the hot kernels.

Selected by :mod:`sparsedetnet.kernels` when the compiled core is missing or
when ``SPARSEDETNET_BACKEND=python`` is set. Signatures match ``_core.pyx``.
"""
import itertools

import numpy as np

PIVOT_RTOL = 1e-12

_CANDIDATES = {}


def matvec(A, v):
    return A @ v


def gram_batch(H):
    """H^T H for every (N, K) slice of ``H``; upper triangle mirrored."""
    G = np.matmul(np.swapaxes(H, -1, -2), H)
    upper = np.triu(G, 1)
    return np.triu(G) + np.swapaxes(upper, -1, -2)


def solve_batch(G, b):
    """Solve G[i] u[i] = b[i] by Gaussian elimination with partial pivoting.

    Returns ``(u, bad)`` where ``bad`` is the index of the first singular
    system or -1.
    """
    A = np.array(G, dtype=np.float64, copy=True)
    x = np.array(b, dtype=np.float64, copy=True)
    B, K, _ = A.shape
    tol = PIVOT_RTOL * np.abs(A).reshape(B, -1).max(axis=1)
    rows = np.arange(B)
    singular = np.zeros(B, dtype=bool)
    for col in range(K):
        piv = col + np.argmax(np.abs(A[:, col:, col]), axis=1)
        swap = piv != col
        if swap.any():
            r = rows[swap]
            p = piv[swap]
            tmp = A[r, col].copy()
            A[r, col] = A[r, p]
            A[r, p] = tmp
            tmpx = x[r, col].copy()
            x[r, col] = x[r, p]
            x[r, p] = tmpx
        pivot = A[:, col, col]
        singular |= ~(np.abs(pivot) >= tol) | (tol == 0.0)
        safe = np.where(singular, 1.0, pivot)
        if col + 1 < K:
            f = A[:, col + 1:, col] / safe[:, None]
            A[:, col + 1:, col:] -= f[:, :, None] * A[:, None, col, col:]
            x[:, col + 1:] -= f * x[:, col, None]
    if singular.any():
        return x, int(np.flatnonzero(singular)[0])
    u = np.empty_like(x)
    for row in range(K - 1, -1, -1):
        acc = x[:, row] - np.einsum("bj,bj->b", A[:, row, row + 1:], u[:, row + 1:])
        u[:, row] = acc / A[:, row, row]
    return u, -1


def candidates(K):
    """All BPSK vectors in lexicographic order (-1 < +1, first entry major)."""
    if K not in _CANDIDATES:
        _CANDIDATES[K] = np.array(list(itertools.product((-1.0, 1.0), repeat=K)))
    return _CANDIDATES[K]


def ml_search_batch(H, y):
    B, N, K = H.shape
    S = candidates(K)
    out = np.empty((B, K))
    chunk = max(1, int(4_000_000 // (S.shape[0] * N)))
    for lo in range(0, B, chunk):
        hi = min(B, lo + chunk)
        R = y[lo:hi, None, :] - np.einsum("bnk,ck->bcn", H[lo:hi], S)
        metric = np.einsum("bcn,bcn->bc", R, R)
        out[lo:hi] = S[np.argmin(metric, axis=1)]
    return out
