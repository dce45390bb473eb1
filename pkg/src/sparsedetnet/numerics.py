"""Dense linear algebra and seeded random streams.

Matrices and vectors are plain float64 numpy arrays (row-major). Random
streams come from numpy's counter-based Philox generator keyed by
``(seed, stream_id)`` so parallel workers can take independent streams.
"""
import numpy as np

from . import kernels
from .errors import ContractError, SingularMatrixError


def make_rng(seed, *stream):
    """Deterministic generator for ``seed``; distinct ``stream`` id tuples are independent."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream) or (0,))
    return np.random.Generator(np.random.Philox(ss))


def as_matrix(A):
    A = np.ascontiguousarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
        raise ContractError(f"expected a non-empty 2-D matrix, got shape {A.shape}")
    return A


def as_vector(v):
    v = np.ascontiguousarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] < 1:
        raise ContractError(f"expected a non-empty vector, got shape {v.shape}")
    return v


def matvec(A, v):
    A = as_matrix(A)
    v = as_vector(v)
    if A.shape[1] != v.shape[0]:
        raise ContractError(f"matvec: {A.shape} matrix with length-{v.shape[0]} vector")
    return kernels.matvec(A, v)


def gram(H):
    """H^T H, exactly symmetric (upper triangle computed, then mirrored)."""
    H = as_matrix(H)
    return kernels.gram_batch(H[None])[0]


def gram_batch(H):
    H = np.ascontiguousarray(H, dtype=np.float64)
    if H.ndim != 3:
        raise ContractError(f"gram_batch expects (B, N, K), got {H.shape}")
    return kernels.gram_batch(H)


def sample_gaussian(rng, n, mean=0.0, std=1.0):
    if std < 0:
        raise ContractError(f"std must be non-negative, got {std}")
    if std == 0:
        return np.full(n, float(mean))
    return mean + std * rng.standard_normal(n)


def solve_normal_equations(G, b):
    """Solve G u = b by pivoted elimination.

    Raises SingularMatrixError when a pivot falls below 1e-12 * max|G|.
    """
    G = as_matrix(G)
    b = as_vector(b)
    if G.shape[0] != G.shape[1] or G.shape[0] != b.shape[0]:
        raise ContractError(f"solve: {G.shape} system with length-{b.shape[0]} rhs")
    return solve_batch(G[None], b[None])[0]


def solve_batch(G, b):
    G = np.ascontiguousarray(G, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    u, bad = kernels.solve_batch(G, b)
    if bad >= 0:
        raise SingularMatrixError(f"system {bad} is singular to working precision")
    return u
