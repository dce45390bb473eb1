"""Magnitude pruning (element, column-group, sparse-group) and the analytic
memory / FLOP cost model.

Cost conventions:

* memory: 4 bytes per stored parameter. ``dense`` stores every weight, bias
  and knee t; ``masked_sparse`` stores masked-in weights and biases plus every
  t. Index overhead is not counted.
* FLOPs per detection: 2 per masked-in weight (one multiply, one add; bias
  adds are folded into the accumulation), plus 2K per live row of the
  H^T H x_hat product, where a row is live if its W1 input column has any
  masked-in weight (dense: 2K^2 per layer). Preprocessing adds 2NK for
  H^T y and 2NK^2 for H^T H. Activations and the final slicer are free.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError
from .model import BIASES, WEIGHTS

BYTES_PER_PARAM = 4
PRUNE_KINDS = ("none", "element", "group", "sparse_group")
COST_CSV_COLUMNS = ("label", "layers", "params_total", "params_nonzero", "memory_bytes",
                    "memory_bytes_dense", "flops_per_detection", "flops_dense")


@dataclass(frozen=True)
class PruneSpec:
    kind: str = "none"
    eta: float = 0.0
    eta1: float = 0.0
    eta2: float = 0.0
    absolute_groups: bool = False

    def __post_init__(self):
        if self.kind not in PRUNE_KINDS:
            raise ConfigurationError(f"prune kind must be one of {PRUNE_KINDS}, got {self.kind!r}")
        for name in ("eta", "eta1", "eta2"):
            value = getattr(self, name)
            if value < 0 or (value >= 1 and not (name == "eta1" and self.absolute_groups)):
                raise ConfigurationError(f"{name} must lie in [0, 1), got {value}")


def _prune_element_inplace(params, eta):
    for layer in params.layers:
        w_max = max(np.abs(layer.eff(n)).max(initial=0.0) for n in WEIGHTS)
        thr = eta * w_max
        for name in WEIGHTS:
            layer.masks[name] &= ~(np.abs(layer.eff(name)) < thr)


def _column_norms(layer, j):
    W = layer.eff(WEIGHTS[j])
    b = layer.eff(BIASES[j])
    return np.sqrt(np.concatenate([np.sum(W * W, axis=0), [np.dot(b, b)]]))


def _prune_group_inplace(params, eta1, absolute=False):
    for layer in params.layers:
        for j in range(3):
            norms = _column_norms(layer, j)
            thr = eta1 if absolute else eta1 * norms.max(initial=0.0)
            dead = norms < thr
            layer.masks[WEIGHTS[j]][:, dead[:-1]] = False
            if dead[-1]:
                layer.masks[BIASES[j]][:] = False


def prune_element(params, eta):
    """Mask weights with |w| < eta * (max |w| over the layer's W1, W2, W3).

    Biases and t are untouched; entries exactly at the threshold survive.
    """
    out = params.copy()
    _prune_element_inplace(out, eta)
    return out


def prune_group(params, eta1, absolute=False):
    """Mask whole columns of each augmented matrix [W b] whose L2 norm is
    below eta1 times the largest column norm of that matrix (or below eta1
    itself when ``absolute``)."""
    out = params.copy()
    _prune_group_inplace(out, eta1, absolute)
    return out


def _mask_state(params):
    return [tuple(layer.masks[n].tobytes() for n in WEIGHTS + BIASES) for layer in params.layers]


def prune_sparse_group(params, eta1, eta2, absolute=False):
    """Group pruning at eta1, then element pruning at eta2 on the survivors.

    Element pruning lowers column norms, so the two stages are repeated until
    the masks stop changing; this makes the rule idempotent. One round is
    almost always enough.
    """
    out = params.copy()
    while True:
        before = _mask_state(out)
        _prune_group_inplace(out, eta1, absolute)
        _prune_element_inplace(out, eta2)
        if _mask_state(out) == before:
            return out


def apply_prune(params, spec):
    if spec.kind == "element":
        return prune_element(params, spec.eta)
    if spec.kind == "group":
        return prune_group(params, spec.eta1 if spec.eta1 else spec.eta, spec.absolute_groups)
    if spec.kind == "sparse_group":
        return prune_sparse_group(params, spec.eta1, spec.eta2, spec.absolute_groups)
    return params.copy()


def _stored(layer):
    return sum(int(np.count_nonzero(layer.masks[n])) for n in WEIGHTS + BIASES) + 1


def _layer_size(layer):
    return sum(getattr(layer, n).size for n in WEIGHTS + BIASES) + 1


def memory_bytes(params, storage="masked_sparse"):
    if storage == "dense":
        count = sum(_layer_size(layer) for layer in params.layers)
    elif storage == "masked_sparse":
        count = sum(_stored(layer) for layer in params.layers)
    else:
        raise ConfigurationError(f"unknown storage convention {storage!r}")
    return BYTES_PER_PARAM * count


def preprocess_flops(K, N):
    return 2 * N * K + 2 * N * K * K


def layer_flops(layer, K, dense=False):
    if dense:
        nnz = sum(getattr(layer, n).size for n in WEIGHTS)
        return 2 * nnz + 2 * K * K
    nnz = sum(int(np.count_nonzero(layer.masks[n])) for n in WEIGHTS)
    live_rows = int(np.count_nonzero(layer.masks["W1"][:, 2 * K:3 * K].any(axis=0)))
    return 2 * nnz + 2 * K * live_rows


def flops_per_detection(params, include_preprocess=True, dense=False):
    total = sum(layer_flops(layer, params.K, dense) for layer in params.layers)
    if include_preprocess:
        total += preprocess_flops(params.K, params.N)
    return total


@dataclass
class CostReport:
    params_total: int
    params_nonzero: int
    memory_bytes: int
    memory_bytes_dense: int
    flops_per_detection: int
    flops_dense: int
    preprocess_flops: int
    layers: list = field(default_factory=list)
    label: str = ""

    @property
    def memory_mb(self):
        return self.memory_bytes / 1e6

    @property
    def zero_fraction(self):
        """Fraction of weights and biases that are masked out (t excluded)."""
        n = len(self.layers)
        total = self.params_total - n
        return 1.0 - (self.params_nonzero - n) / total if total else 0.0

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def csv_row(self):
        return [self.label, len(self.layers), self.params_total, self.params_nonzero,
                self.memory_bytes, self.memory_bytes_dense, self.flops_per_detection, self.flops_dense]


def cost_report(params, label="", include_preprocess=True):
    per_layer = []
    for k, layer in enumerate(params.layers, start=1):
        per_layer.append({
            "layer": k,
            "params_total": _layer_size(layer),
            "params_nonzero": _stored(layer),
            "flops": layer_flops(layer, params.K),
            "flops_dense": layer_flops(layer, params.K, dense=True),
        })
    pre = preprocess_flops(params.K, params.N) if include_preprocess else 0
    return CostReport(
        params_total=sum(r["params_total"] for r in per_layer),
        params_nonzero=sum(r["params_nonzero"] for r in per_layer),
        memory_bytes=memory_bytes(params, "masked_sparse"),
        memory_bytes_dense=memory_bytes(params, "dense"),
        flops_per_detection=sum(r["flops"] for r in per_layer) + pre,
        flops_dense=sum(r["flops_dense"] for r in per_layer) + pre,
        preprocess_flops=pre,
        layers=per_layer,
        label=label,
    )
