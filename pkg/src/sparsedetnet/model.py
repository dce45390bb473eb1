"""The unfolded DetNet detector.

Each layer maps (x_hat, v) to (x_hat', v') through

    z   = relu(W1 [H^T y; x_hat; H^T H x_hat; v] + b1)
    x'  = soft_sign(W2 z + b2, t)
    v'  = W3 z + b3

starting from x_hat = 0, v = 0. Every weight and bias carries a boolean mask;
the forward pass only ever sees ``np.where(mask, value, 0)``.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from .channel import hard_sign
from .errors import ContractError

CHECKPOINT_VERSION = 1
T_MIN = 1e-3
# H^T y and H^T H x_hat grow like N, so unit-gain fan-in init saturates the first layers.
DEFAULT_INIT_GAIN = 0.3

WEIGHTS = ("W1", "W2", "W3")
BIASES = ("b1", "b2", "b3")
TRAINABLE = WEIGHTS + BIASES + ("t",)


def param_dims(K, z_mult=8, v_mult=2):
    """(z_dim, v_dim, in_dim) for K transmit symbols; defaults give (8K, 2K, 5K)."""
    if K < 1:
        raise ContractError("K must be >= 1")
    z_dim, v_dim = z_mult * K, v_mult * K
    return z_dim, v_dim, 3 * K + v_dim


@dataclass
class LayerParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    t: float
    masks: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in WEIGHTS + BIASES:
            if name not in self.masks:
                self.masks[name] = np.ones(getattr(self, name).shape, dtype=bool)
        if not self.t > 0:
            raise ContractError(f"soft-sign knee t must be positive, got {self.t}")

    def eff(self, name):
        """Masked value of a weight or bias."""
        return np.where(self.masks[name], getattr(self, name), 0.0)

    def copy(self):
        arrays = {n: getattr(self, n).copy() for n in WEIGHTS + BIASES}
        return LayerParams(**arrays, t=float(self.t), masks={k: m.copy() for k, m in self.masks.items()})

    def zeroed(self):
        """Equivalent dense layer: masked entries overwritten with 0, masks all-ones."""
        arrays = {n: self.eff(n) for n in WEIGHTS + BIASES}
        return LayerParams(**arrays, t=float(self.t))

    @property
    def weight_count(self):
        return sum(getattr(self, n).size for n in WEIGHTS)


@dataclass
class ModelParams:
    K: int
    N: int
    z_dim: int
    v_dim: int
    layers: list
    frozen_prefix: int = 0
    step: int = 0

    def __post_init__(self):
        if not 0 <= self.frozen_prefix <= len(self.layers):
            raise ContractError("frozen_prefix out of range")
        for layer in self.layers:
            if layer.W1.shape != (self.z_dim, self.in_dim) or layer.W2.shape != (self.K, self.z_dim) \
                    or layer.W3.shape != (self.v_dim, self.z_dim):
                raise ContractError("layer shapes do not match model dimensions")

    @property
    def in_dim(self):
        return 3 * self.K + self.v_dim

    @property
    def L(self):
        return len(self.layers)

    def copy(self):
        return ModelParams(self.K, self.N, self.z_dim, self.v_dim,
                           [layer.copy() for layer in self.layers], self.frozen_prefix, self.step)

    def zeroed(self):
        return ModelParams(self.K, self.N, self.z_dim, self.v_dim,
                           [layer.zeroed() for layer in self.layers], self.frozen_prefix, self.step)

    def truncated(self, L):
        out = self.copy()
        out.layers = out.layers[:L]
        out.frozen_prefix = min(out.frozen_prefix, L)
        return out


@dataclass
class ForwardTrace:
    """Intermediates of a batched forward pass.

    ``xhat`` and ``v`` have L+1 entries (index 0 is the zero start); the
    per-layer lists ``inputs``, ``a1``, ``z`` and ``a2`` have L entries.
    """

    hty: np.ndarray
    gram: np.ndarray
    inputs: list
    a1: list
    z: list
    a2: list
    xhat: list
    v: list

    @property
    def L(self):
        return len(self.a1)


def relu(u):
    return np.maximum(u, 0.0)


def soft_sign(u, t):
    """Piecewise-linear soft sign: -1 below -t, +1 above t, slope 1/t between.

    Equal to -1 + relu(u + t)/t - relu(u - t)/t, evaluated as a clip so the
    saturated values are exactly +-1.
    """
    if not t > 0:
        raise ContractError(f"soft_sign needs t > 0, got {t}")
    return np.clip(u / t, -1.0, 1.0)


def soft_sign_grads(u, t):
    """(d psi / d u, d psi / d t).

    At the kinks the slope w.r.t. u is 1/t at u = -t and 0 at u = +t.
    """
    inside = (u >= -t) & (u < t)
    du = np.where(inside, 1.0 / t, 0.0)
    dt = np.where(inside, -u / (t * t), 0.0)
    return du, dt


def _layer_input(hty, G, xh, v):
    hthx = np.einsum("bij,bj->bi", G, xh)
    return np.concatenate([hty, xh, hthx, v], axis=1)


def forward(params, H, y, gram=None, hty=None):
    """Run all layers on a batch. ``H`` is (B, N, K) and ``y`` is (B, N)."""
    H = np.asarray(H, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if H.ndim != 3 or H.shape[1:] != (params.N, params.K) or y.shape != H.shape[:2]:
        raise ContractError(f"forward: H {H.shape} / y {y.shape} incompatible with N={params.N}, K={params.K}")
    if hty is None:
        hty = np.einsum("bnk,bn->bk", H, y)
    if gram is None:
        from .numerics import gram_batch

        gram = gram_batch(H)
    B = H.shape[0]
    xh = np.zeros((B, params.K))
    v = np.zeros((B, params.v_dim))
    trace = ForwardTrace(hty, gram, [], [], [], [], [xh], [v])
    for layer in params.layers:
        inp = _layer_input(hty, gram, xh, v)
        a1 = inp @ layer.eff("W1").T + layer.eff("b1")
        z = relu(a1)
        a2 = z @ layer.eff("W2").T + layer.eff("b2")
        xh = soft_sign(a2, layer.t)
        v = z @ layer.eff("W3").T + layer.eff("b3")
        trace.inputs.append(inp)
        trace.a1.append(a1)
        trace.z.append(z)
        trace.a2.append(a2)
        trace.xhat.append(xh)
        trace.v.append(v)
    return trace


def detect(params, H, y):
    """sign of the last soft estimate, with sign(0) = +1. Accepts single or batched input."""
    H = np.asarray(H, dtype=np.float64)
    single = H.ndim == 2
    if single:
        H, y = H[None], np.asarray(y)[None]
    out = hard_sign(forward(params, H, y).xhat[-1])
    return out[0] if single else out


def new_layer(rng, K, z_dim, v_dim, gain=DEFAULT_INIT_GAIN, t0=0.5):
    """Fresh layer: weights ~ N(0, gain^2 / fan_in), zero biases, knee t0."""
    in_dim = 3 * K + v_dim

    def w(rows, cols):
        return gain * rng.standard_normal((rows, cols)) / np.sqrt(cols)

    return LayerParams(
        W1=w(z_dim, in_dim), b1=np.zeros(z_dim),
        W2=w(K, z_dim), b2=np.zeros(K),
        W3=w(v_dim, z_dim), b3=np.zeros(v_dim),
        t=float(t0),
    )


def init_params(rng, K, N, L, z_dim=None, v_dim=None, scheme="normal", gain=DEFAULT_INIT_GAIN):
    """``scheme='normal'`` draws N(0, gain^2 / fan_in); ``'unit'`` forces gain 1."""
    if scheme == "unit":
        gain = 1.0
    elif scheme != "normal":
        raise ContractError(f"unknown init scheme {scheme!r}")
    dz, dv, _ = param_dims(K)
    z_dim = dz if z_dim is None else z_dim
    v_dim = dv if v_dim is None else v_dim
    layers = [new_layer(rng, K, z_dim, v_dim, gain) for _ in range(L)]
    return ModelParams(K, N, z_dim, v_dim, layers)


def save_checkpoint(path, params, meta=None):
    """Write ``params`` to ``.npz``. Float arrays are stored raw (bit-exact),
    masks as packed bitsets, and ``meta`` as a JSON string."""
    arrays = {
        "version": np.array(CHECKPOINT_VERSION),
        "dims": np.array([params.K, params.N, params.z_dim, params.v_dim, params.L,
                          params.frozen_prefix, params.step], dtype=np.int64),
        "t": np.array([layer.t for layer in params.layers], dtype=np.float64),
        "meta": np.array(json.dumps(meta or {}, sort_keys=True)),
    }
    for k, layer in enumerate(params.layers):
        for name in WEIGHTS + BIASES:
            arrays[f"l{k}_{name}"] = getattr(layer, name)
            arrays[f"l{k}_{name}_mask"] = np.packbits(layer.masks[name].ravel())
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, meta)``."""
    with np.load(path, allow_pickle=False) as f:
        if int(f["version"]) != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {int(f['version'])}")
        K, N, z_dim, v_dim, L, frozen, step = (int(d) for d in f["dims"])
        layers = []
        for k in range(L):
            arrays, masks = {}, {}
            for name in WEIGHTS + BIASES:
                a = f[f"l{k}_{name}"]
                arrays[name] = a
                bits = np.unpackbits(f[f"l{k}_{name}_mask"], count=a.size)
                masks[name] = bits.astype(bool).reshape(a.shape)
            layers.append(LayerParams(**arrays, t=float(f["t"][k]), masks=masks))
        meta = json.loads(str(f["meta"]))
    return ModelParams(K, N, z_dim, v_dim, layers, frozen, step), meta
