"""Losses, reverse-mode gradients, Adam and the incremental depth-growing
trainer for the unfolded detector."""
import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from .channel import ber, generate_batch, hard_sign
from .errors import ConfigurationError, ContractError
from .model import (BIASES, DEFAULT_INIT_GAIN, T_MIN, WEIGHTS, ModelParams, forward, new_layer,
                    param_dims, soft_sign_grads)
from .numerics import make_rng, solve_batch

log = logging.getLogger(__name__)

DENOM_FLOOR = 1e-12
LOSS_KINDS = ("plain", "element_l1", "sparse_group")
LOG_COLUMNS = ("step", "layer_count", "lr", "train_loss", "val_loss", "val_ber", "wall_ms", "val_final")

# Rng stream ids; keeping them apart makes every consumer independent of the others.
STREAM_EVAL = 7
STREAM_INIT = 1000
STREAM_DATA = 2000


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class LossSpec:
    kind: str = "plain"
    lam: float = 0.0
    lam1: float = 0.0
    lam2: float = 0.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigurationError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if min(self.lam, self.lam1, self.lam2) < 0:
            raise ConfigurationError("regularization weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    decay_factor: float = 0.97
    decay_step: int = 1000
    batch_size: int = 1000
    total_batches: int = 20000  # per incremental step
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    start_layers: Optional[int] = None  # first step depth; defaults to T_step
    T_step: int = 10
    max_layers: int = 90
    halt_epsilon: Optional[float] = 0.01  # None disables the plateau rule
    target_ber: Optional[float] = None
    snr_range_db: tuple = (0.0, 15.0)
    val_snr_db: float = 12.0
    val_samples: int = 10000
    loss_over_frozen: bool = True

    def __post_init__(self):
        positive = ("lr0", "decay_factor", "decay_step", "batch_size", "total_batches",
                    "T_step", "max_layers", "val_samples")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.start_layers is not None and not 0 < self.start_layers <= self.max_layers:
            raise ConfigurationError("start_layers must be in [1, max_layers]")
        if self.halt_epsilon is not None and self.halt_epsilon < 0:
            raise ConfigurationError("halt_epsilon must be non-negative")
        lo, hi = self.snr_range_db
        if lo > hi:
            raise ConfigurationError("snr_range_db must be (min, max)")

    @property
    def first_layers(self):
        return self.start_layers or self.T_step

    def lr_at(self, step):
        """Staircase exponential decay."""
        return self.lr0 * self.decay_factor ** (step // self.decay_step)


def _denominators(x, x_tilde):
    d = np.sum((x - x_tilde) ** 2, axis=-1)
    flagged = d < DENOM_FLOOR
    return np.maximum(d, DENOM_FLOOR), flagged


def _term_weights(L, first=0):
    """log(k) for the estimate after layer k = 1..L; zero for k <= first."""
    w = np.log(np.arange(1, L + 1, dtype=np.float64))
    w[:first] = 0.0
    return w


def loss_plain(trace, x, x_tilde, first=0):
    """Mean over the batch of sum_k log(k) ||x - x_k||^2 / ||x - x_zf||^2.

    ``first`` skips the terms of the first ``first`` layers.
    """
    x = np.atleast_2d(x)
    x_tilde = np.atleast_2d(x_tilde)
    d, flagged = _denominators(x, x_tilde)
    if flagged.any():
        log.debug("%d samples with x_zf == x; denominator floored", int(flagged.sum()))
    total = np.zeros(x.shape[0])
    for k, w in enumerate(_term_weights(trace.L, first), start=1):
        if w:
            total += w * np.sum((x - trace.xhat[k]) ** 2, axis=-1)
    return float(np.mean(total / d))


def final_error(trace, x, x_tilde):
    """Mean ||x - x_L||^2 / ||x - x_zf||^2 for the last estimate only."""
    d, _ = _denominators(x, x_tilde)
    return float(np.mean(np.sum((x - trace.xhat[-1]) ** 2, axis=-1) / d))


def loss_element_l1(params, lam, first=0):
    """lam * sum of |w| over the masked weights of every layer (biases excluded)."""
    if lam == 0:
        return 0.0
    total = 0.0
    for layer in params.layers[first:]:
        for name in WEIGHTS:
            total += np.abs(layer.eff(name)).sum()
    return float(lam * total)


def _augmented(layer, j):
    """[W_j  b_j]: the bias becomes the last column."""
    return np.concatenate([layer.eff(WEIGHTS[j]), layer.eff(BIASES[j])[:, None]], axis=1)


def loss_sparse_group(params, lam1, lam2, first=0):
    """lam1 * sum of column L2 norms of [W b] + lam2 * sum |W|."""
    group = 0.0
    for layer in params.layers[first:]:
        for j in range(3):
            group += np.sqrt(np.sum(_augmented(layer, j) ** 2, axis=0)).sum()
    return float(lam1 * group) + loss_element_l1(params, lam2, first)


def regularizer(params, spec, first=0):
    if spec.kind == "element_l1":
        return loss_element_l1(params, spec.lam, first)
    if spec.kind == "sparse_group":
        return loss_sparse_group(params, spec.lam1, spec.lam2, first)
    return 0.0


def total_loss(params, trace, x, x_tilde, spec, first=0):
    return loss_plain(trace, x, x_tilde, first) + regularizer(params, spec)


def _zero_grads(layer):
    g = {n: np.zeros_like(getattr(layer, n)) for n in WEIGHTS + BIASES}
    g["t"] = 0.0
    return g


def _regularizer_grads(layer, spec, g):
    if spec.kind == "element_l1" and spec.lam:
        for name in WEIGHTS:
            g[name] += spec.lam * np.sign(layer.eff(name))
    elif spec.kind == "sparse_group":
        if spec.lam1:
            for j in range(3):
                Wt = _augmented(layer, j)
                norms = np.sqrt(np.sum(Wt ** 2, axis=0))
                scale = np.divide(spec.lam1, norms, out=np.zeros_like(norms), where=norms > 0)
                gWt = Wt * scale
                g[WEIGHTS[j]] += gWt[:, :-1]
                g[BIASES[j]] += gWt[:, -1]
        if spec.lam2:
            for name in WEIGHTS:
                g[name] += spec.lam2 * np.sign(layer.eff(name))


def backward(trace, params, x, x_tilde, spec):
    """Gradient of :func:`total_loss` w.r.t. every layer's parameters.

    Returns a list with one dict per layer (keys W1..b3 and t). Frozen layers
    and masked entries get exact zeros. Subgradients: sign(0) = 0 for the L1
    term, 0 for a zero-norm group.
    """
    if trace.L != params.L:
        raise ContractError(f"trace has {trace.L} layers, params have {params.L}")
    x = np.atleast_2d(x)
    B, K = x.shape
    L = params.L
    d, _ = _denominators(x, np.atleast_2d(x_tilde))
    coef = (2.0 / (d * B))[:, None]
    weights = _term_weights(L)
    grads = [_zero_grads(layer) for layer in params.layers]
    g_x = np.zeros((B, K))
    g_v = np.zeros((B, params.v_dim))
    for j in range(L - 1, params.frozen_prefix - 1, -1):
        layer = params.layers[j]
        g = grads[j]
        g_x = g_x + weights[j] * coef * (trace.xhat[j + 1] - x)
        du, dt = soft_sign_grads(trace.a2[j], layer.t)
        g_a2 = g_x * du
        g["t"] = float(np.sum(g_x * dt))
        z = trace.z[j]
        g["W2"] = g_a2.T @ z
        g["b2"] = g_a2.sum(axis=0)
        g["W3"] = g_v.T @ z
        g["b3"] = g_v.sum(axis=0)
        g_z = g_a2 @ layer.eff("W2") + g_v @ layer.eff("W3")
        g_a1 = g_z * (trace.a1[j] > 0)
        g["W1"] = g_a1.T @ trace.inputs[j]
        g["b1"] = g_a1.sum(axis=0)
        _regularizer_grads(layer, spec, g)
        for name in WEIGHTS + BIASES:
            g[name] = np.where(layer.masks[name], g[name], 0.0)
        if j > params.frozen_prefix:
            g_in = g_a1 @ layer.eff("W1")
            g_x = g_in[:, K:2 * K] + np.einsum("bji,bj->bi", trace.gram, g_in[:, 2 * K:3 * K])
            g_v = g_in[:, 3 * K:]
    return grads


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    def sync(self, params):
        """Allocate zero moments for layers added since the last call."""
        while len(self.m) < params.L:
            layer = params.layers[len(self.m)]
            self.m.append(_zero_grads(layer))
            self.v.append(_zero_grads(layer))


def adam_step(params, grads, state, config):
    """One Adam update of the unfrozen layers with the staircase learning rate.

    Masked entries are never moved and t is clamped to >= T_MIN afterwards.
    Returns the learning rate that was used.
    """
    state.sync(params)
    lr = config.lr_at(state.step)
    state.step += 1
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for j in range(params.frozen_prefix, params.L):
        layer, g, m, v = params.layers[j], grads[j], state.m[j], state.v[j]
        for name in WEIGHTS + BIASES + ("t",):
            m[name] = b1 * m[name] + (1 - b1) * g[name]
            v[name] = b2 * v[name] + (1 - b2) * g[name] * g[name]
            update = lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + eps)
            if name == "t":
                layer.t = max(float(layer.t - update), T_MIN)
            else:
                mask = layer.masks[name]
                setattr(layer, name, getattr(layer, name) - np.where(mask, update, 0.0))
    return lr


class Validation(NamedTuple):
    loss: float
    ber: float
    final: float


def make_eval_set(seed, N, K, samples, snr_db):
    return generate_batch(make_rng(seed, STREAM_EVAL), N, K, samples, snr_db)


def zf_estimates(batch):
    return solve_batch(batch.gram(), batch.matched())


def validate(params, eval_set, x_tilde=None):
    """Eq.-4-style loss, BER of sign(x_L) and last-layer normalized error on a fixed set."""
    G = eval_set.gram()
    hty = eval_set.matched()
    if x_tilde is None:
        x_tilde = solve_batch(G, hty)
    trace = forward(params, eval_set.H, eval_set.y, gram=G, hty=hty)
    return Validation(
        loss_plain(trace, eval_set.x, x_tilde),
        ber(hard_sign(trace.xhat[-1]), eval_set.x),
        final_error(trace, eval_set.x, x_tilde),
    )


def train_layers(params, spec, config, rng, state=None, batches=None, on_batch=None):
    """Train the unfrozen layers of ``params`` in place for ``batches`` mini-batches.

    Returns ``(state, mean training loss over the last 10% of batches, last lr)``.
    """
    state = state or AdamState()
    batches = config.total_batches if batches is None else batches
    first = 0 if config.loss_over_frozen else params.frozen_prefix
    tail = max(1, batches // 10)
    recent = []
    lr = config.lr_at(state.step)
    for i in range(batches):
        batch = generate_batch(rng, params.N, params.K, config.batch_size, config.snr_range_db)
        G = batch.gram()
        hty = batch.matched()
        x_tilde = solve_batch(G, hty)
        trace = forward(params, batch.H, batch.y, gram=G, hty=hty)
        value = loss_plain(trace, batch.x, x_tilde, first) + regularizer(params, spec, first)
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss at batch {i}")
        grads = backward(trace, params, batch.x, x_tilde, spec)
        lr = adam_step(params, grads, state, config)
        params.step += 1
        if i >= batches - tail:
            recent.append(value)
        if on_batch is not None:
            on_batch(i, value)
    return state, float(np.mean(recent)), lr


@dataclass
class StepRecord:
    step: int
    layer_count: int
    lr: float
    train_loss: float
    val_loss: float
    val_ber: float
    wall_ms: int
    val_final: float

    def row(self):
        return [getattr(self, c) for c in LOG_COLUMNS]


def train_incremental(config, spec, seed, K, N, z_dim=None, v_dim=None, log_path=None,
                      on_step=None, eval_set=None, init_gain=DEFAULT_INIT_GAIN):
    """Grow the network T_step layers at a time, freezing everything already trained.

    Step 0 builds ``config.first_layers`` layers; each later step appends
    ``T_step`` fresh layers and trains only those. Stops at ``max_layers``,
    when the validation BER reaches ``target_ber``, or when the relative
    improvement of the last-layer validation error drops below
    ``halt_epsilon``. ``on_step(t, params, record)`` is called after each step.
    """
    dz, dv, _ = param_dims(K)
    params = ModelParams(K, N, z_dim or dz, v_dim or dv, [])
    if eval_set is None:
        eval_set = make_eval_set(seed, N, K, config.val_samples, config.val_snr_db)
    x_tilde_eval = zf_estimates(eval_set)
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if fh.tell() == 0:
            writer.writerow(LOG_COLUMNS)
    records = []
    prev_final = None
    t = 0
    try:
        while params.L < config.max_layers:
            grow = config.first_layers if t == 0 else config.T_step
            grow = min(grow, config.max_layers - params.L)
            params.frozen_prefix = params.L
            init_rng = make_rng(seed, STREAM_INIT + t)
            params.layers.extend(new_layer(init_rng, K, params.z_dim, params.v_dim, init_gain) for _ in range(grow))
            start = time.perf_counter()
            _, train_loss, lr = train_layers(params, spec, config, make_rng(seed, STREAM_DATA + t))
            val = validate(params, eval_set, x_tilde_eval)
            rec = StepRecord(t, params.L, lr, train_loss, val.loss, val.ber,
                             int((time.perf_counter() - start) * 1000), val.final)
            records.append(rec)
            log.info("step %d: %d layers, val_ber=%.5g val_final=%.5g", t, params.L, val.ber, val.final)
            if writer is not None:
                writer.writerow(rec.row())
                fh.flush()
            if on_step is not None:
                on_step(t, params, rec)
            t += 1
            if config.target_ber is not None and val.ber <= config.target_ber:
                break
            if config.halt_epsilon is not None and prev_final is not None and prev_final > 0:
                if (prev_final - val.final) / prev_final < config.halt_epsilon:
                    break
            prev_final = val.final
    finally:
        if fh is not None:
            fh.close()
    params.frozen_prefix = 0
    return params, records


def train_full(config, spec, seed, K, N, L, **kw):
    """Ordinary whole-network training: one incremental step of depth L."""
    cfg = replace(config, start_layers=L, max_layers=L, T_step=L)
    return train_incremental(cfg, spec, seed, K, N, **kw)
