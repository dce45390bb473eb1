"""Shared oracles for the test suite: finite differences and kink-free tiny instances."""
import numpy as np

from sparsedetnet import channel, model, training
from sparsedetnet.numerics import make_rng

KINK_MARGIN = 1e-3


def tiny_instance(seed, K=2, N=3, L=3, batch=4):
    """Random params and data with every pre-activation and weight kept away
    from a non-differentiable point. Returns (params, batch, x_tilde)."""
    for attempt in range(1000):
        rng = make_rng(seed, attempt)
        p = model.init_params(rng, K, N, L)
        for layer in p.layers:
            for name in model.WEIGHTS:
                w = getattr(layer, name)
                w[np.abs(w) < 2 * KINK_MARGIN] += 4 * KINK_MARGIN
            layer.b1 = 0.3 * rng.standard_normal(layer.b1.shape)
            layer.b2 = 0.1 * rng.standard_normal(layer.b2.shape)
            layer.b3 = 0.1 * rng.standard_normal(layer.b3.shape)
            layer.t = 0.3 + rng.random()
        data = channel.generate_batch(rng, N, K, batch, (5.0, 15.0))
        tr = model.forward(p, data.H, data.y)
        near = any(np.min(np.abs(a)) < KINK_MARGIN for a in tr.a1)
        for a2, layer in zip(tr.a2, p.layers):
            near |= np.min(np.abs(np.abs(a2) - layer.t)) < KINK_MARGIN
        if not near:
            return p, data, training.zf_estimates(data)
    raise RuntimeError("could not draw a kink-free instance")


def numeric_gradients(params, data, x_tilde, specs, h=1e-5):
    """Central differences of total_loss for several LossSpecs at once.

    Returns one list-of-dicts per spec, shaped like backward()'s output.
    """
    out = [[{} for _ in params.layers] for _ in specs]

    def losses():
        tr = model.forward(params, data.H, data.y)
        return [training.total_loss(params, tr, data.x, x_tilde, s) for s in specs]

    for j, layer in enumerate(params.layers):
        for name in model.WEIGHTS + model.BIASES:
            A = getattr(layer, name)
            num = [np.zeros_like(A) for _ in specs]
            for idx in np.ndindex(A.shape):
                orig = A[idx]
                A[idx] = orig + h
                fp = losses()
                A[idx] = orig - h
                fm = losses()
                A[idx] = orig
                for s in range(len(specs)):
                    num[s][idx] = (fp[s] - fm[s]) / (2 * h)
            for s in range(len(specs)):
                out[s][j][name] = num[s]
        orig = layer.t
        layer.t = orig + h
        fp = losses()
        layer.t = orig - h
        fm = losses()
        layer.t = orig
        for s in range(len(specs)):
            out[s][j]["t"] = (fp[s] - fm[s]) / (2 * h)
    return out


def max_relative_error(analytic, numeric, floor=1e-8):
    """Largest per-tensor ||a - n|| / max(||a||, ||n||, floor)."""
    worst = 0.0
    for ga, gn in zip(analytic, numeric):
        for name in gn:
            a = np.atleast_1d(ga[name])
            n = np.atleast_1d(gn[name])
            denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
            worst = max(worst, float(np.linalg.norm(a - n) / denom))
    return worst
