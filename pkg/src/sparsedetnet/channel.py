"""Real-valued MIMO channel y = Hx + n with BPSK symbols, plus the ZF and
exhaustive ML baselines and the BER metric."""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import CapacityError, ConfigurationError, ContractError
from .numerics import as_matrix, as_vector, gram_batch, solve_batch

ML_MAX_K = 16
SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class ChannelSample:
    H: np.ndarray
    x: np.ndarray
    y: np.ndarray
    sigma2: float


@dataclass(frozen=True)
class ChannelBatch:
    """A batch of independent channel realizations stored as stacked arrays.

    Shapes: H (B, N, K), x (B, K), y (B, N), sigma2 (B,).
    """

    H: np.ndarray
    x: np.ndarray
    y: np.ndarray
    sigma2: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    def __getitem__(self, i):
        return ChannelSample(self.H[i], self.x[i], self.y[i], float(self.sigma2[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def N(self):
        return self.H.shape[1]

    @property
    def K(self):
        return self.H.shape[2]

    def gram(self):
        return gram_batch(self.H)

    def matched(self):
        """H^T y for every sample."""
        return np.einsum("bnk,bn->bk", self.H, self.y)


@dataclass(frozen=True)
class SnrGrid:
    snr_db_min: float
    snr_db_max: float
    points: int

    def __post_init__(self):
        if self.points < 1 or self.snr_db_min > self.snr_db_max:
            raise ConfigurationError(f"invalid SNR grid {self}")
        if self.points == 1 and self.snr_db_min != self.snr_db_max:
            raise ConfigurationError("a one-point grid needs min == max")

    def values(self):
        return [float(v) for v in np.linspace(self.snr_db_min, self.snr_db_max, self.points)]

    @classmethod
    def parse(cls, text):
        """Parse ``min:max:points`` (or a single dB value)."""
        parts = text.split(":")
        try:
            if len(parts) == 1:
                v = float(parts[0])
                return cls(v, v, 1)
            lo, hi, pts = parts
            return cls(float(lo), float(hi), int(pts))
        except ValueError as exc:
            raise ConfigurationError(f"bad SNR grid {text!r}; expected min:max:points") from exc


def snr_to_sigma2(snr_db, K):
    """Noise variance giving receive SNR K / sigma^2 for unit-variance H and symbols."""
    if K < 1:
        raise ContractError("K must be >= 1")
    return K * 10.0 ** (-np.asarray(snr_db, dtype=np.float64) / 10.0)


def generate_batch(rng, N, K, batch, snr_db):
    """Draw ``batch`` fresh (H, x, y) realizations.

    ``snr_db`` is either a scalar (fixed SNR) or a ``(lo, hi)`` pair, in which
    case each sample gets its own SNR drawn uniformly from the range.
    """
    if K < 1 or batch < 1:
        raise ConfigurationError("K and batch must be positive")
    if N < K:
        raise ConfigurationError(f"need N >= K for a full-rank channel, got N={N}, K={K}")
    H = rng.standard_normal((batch, N, K))
    x = np.where(rng.random((batch, K)) < 0.5, -1.0, 1.0)
    if np.ndim(snr_db) == 0:
        sigma2 = np.full(batch, float(snr_to_sigma2(snr_db, K)))
    else:
        lo, hi = snr_db
        sigma2 = snr_to_sigma2(rng.uniform(lo, hi, batch), K)
    noise = rng.standard_normal((batch, N)) * np.sqrt(sigma2)[:, None]
    y = np.einsum("bnk,bk->bn", H, x) + noise
    return ChannelBatch(H, x, y, sigma2)


def zf_decode(H, y):
    """Least-squares estimate (H^T H)^{-1} H^T y, before slicing."""
    H = as_matrix(H)
    y = as_vector(y)
    if H.shape[0] != y.shape[0]:
        raise ContractError(f"zf_decode: {H.shape} channel with length-{y.shape[0]} output")
    return zf_decode_batch(H[None], y[None])[0]


def zf_decode_batch(H, y, G=None):
    if G is None:
        G = gram_batch(H)
    return solve_batch(G, np.einsum("bnk,bn->bk", H, y))


def ml_decode(H, y):
    """argmin_s ||y - Hs||^2 over {-1,+1}^K; ties go to the lexicographically smallest s."""
    H = as_matrix(H)
    y = as_vector(y)
    if H.shape[0] != y.shape[0]:
        raise ContractError(f"ml_decode: {H.shape} channel with length-{y.shape[0]} output")
    return ml_decode_batch(H[None], y[None])[0]


def ml_decode_batch(H, y):
    K = H.shape[-1]
    if K > ML_MAX_K:
        raise CapacityError(f"exhaustive ML limited to K <= {ML_MAX_K}, got K={K}")
    return kernels.ml_search_batch(
        np.ascontiguousarray(H, dtype=np.float64), np.ascontiguousarray(y, dtype=np.float64)
    )


def hard_sign(u):
    """Slicer with sign(0) = +1."""
    return np.where(np.asarray(u) >= 0, 1.0, -1.0)


def ber(decisions, truths):
    d = np.asarray(decisions, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if d.shape != t.shape or d.size == 0:
        raise ContractError(f"ber: shape mismatch {d.shape} vs {t.shape}")
    if not (np.all(np.abs(d) == 1) and np.all(np.abs(t) == 1)):
        raise ContractError("ber: entries must be +-1")
    return float(np.count_nonzero(d != t)) / d.size


def save_snapshot(path, batch):
    """Write a batch as ``.npz``: keys version, H, x, y, sigma2."""
    np.savez(path, version=SNAPSHOT_VERSION, H=batch.H, x=batch.x, y=batch.y, sigma2=batch.sigma2)


def load_snapshot(path):
    with np.load(path) as f:
        if int(f["version"]) != SNAPSHOT_VERSION:
            raise ContractError(f"unsupported snapshot version {int(f['version'])}")
        return ChannelBatch(f["H"], f["x"], f["y"], f["sigma2"])
