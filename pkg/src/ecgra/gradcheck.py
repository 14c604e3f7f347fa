"""Finite-difference verification of the hand-written backward passes."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import layers as L
from .model import ModelConfig, init_buffers, init_parameters, residual_backward, residual_forward

Forward = Callable[..., tuple[np.ndarray, object]]
Backward = Callable[[np.ndarray, object], dict]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Worst absolute gap over the larger gradient magnitude.

    ``floor`` keeps identically-zero gradients (a bias feeding a train-mode
    batchnorm) from turning rounding noise into a large ratio.
    """
    scale = max(np.abs(analytic).max(initial=0), np.abs(numeric).max(initial=0), floor)
    return float(np.abs(analytic - numeric).max(initial=0) / scale)


def grad_check(forward: Forward, backward: Backward, inputs: dict[str, np.ndarray],
               eps: float = 1e-3, wrt=None, seed: int = 0, corrupt: float = 0.0) -> dict[str, float]:
    """Compare analytic and central-difference gradients in float64.

    The scalar probed is ``sum(out * R)`` for a fixed random ``R``: a plain sum
    is blind for outputs whose total is constant (softmax, normalization).
    ``forward(**inputs) -> (out, cache)``; ``backward(R, cache)`` returns a dict
    of gradients keyed like ``inputs``. ``corrupt`` scales the analytic
    gradients by ``1 + corrupt`` to exercise the detector.
    Returns the relative error per checked input.
    """
    x = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    out, cache = forward(**x)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite forward output")
    proj = np.random.default_rng(seed).standard_normal(np.shape(out))
    grads = backward(proj, cache)
    errors = {}
    for name in (wrt or list(grads)):
        analytic = np.asarray(grads[name], dtype=np.float64) * (1.0 + corrupt)
        numeric = np.zeros_like(x[name])
        flat = x[name].reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float((forward(**x)[0] * proj).sum())
            flat[i] = orig - eps
            down = float((forward(**x)[0] * proj).sum())
            flat[i] = orig
            nflat[i] = (up - down) / (2 * eps)
        if not np.all(np.isfinite(numeric)):
            raise FloatingPointError(f"non-finite numeric gradient for {name}")
        errors[name] = relative_error(analytic, numeric)
    return errors


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


def _distinct(rng, shape, spacing=0.05):
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing - n * spacing / 2).reshape(shape)


def case_conv1d(rng):
    b, c_in, c_out, t, k = 2, int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(8, 14)), int(rng.integers(1, 6))
    stride = int(rng.integers(1, 3))
    inputs = dict(x=rng.standard_normal((b, c_in, t)), w=rng.standard_normal((c_out, c_in, k)),
                  b=rng.standard_normal(c_out))
    fwd = lambda x, w, b: L.conv1d_forward(x, w, b, stride)
    bwd = lambda d, c: dict(zip("xwb", L.conv1d_backward(d, c)))
    return fwd, bwd, inputs


def case_batchnorm(rng, train=True):
    c = int(rng.integers(1, 4))
    inputs = dict(x=rng.standard_normal((3, c, int(rng.integers(2, 7)))) * 2 + 1,
                  gamma=rng.uniform(0.5, 2, c), beta=rng.standard_normal(c))
    state = {"running_mean": rng.standard_normal(c), "running_var": rng.uniform(0.5, 2, c)}

    def fwd(x, gamma, beta):
        return L.batchnorm_forward(x, gamma, beta, dict((k, v.copy()) for k, v in state.items()), train)
    bwd = lambda d, cache: dict(zip(("x", "gamma", "beta"), L.batchnorm_backward(d, cache)))
    return fwd, bwd, inputs


def case_relu(rng):
    return (lambda x: L.relu_forward(x), lambda d, c: {"x": L.relu_backward(d, c)},
            dict(x=_away_from_zero(rng, (2, 3, 7))))


def case_sigmoid(rng):
    return (lambda x: L.sigmoid_forward(x), lambda d, c: {"x": L.sigmoid_backward(d, c)},
            dict(x=rng.standard_normal((4, 5)) * 3))


def case_softmax(rng):
    return (lambda x: L.softmax_forward(x, -1), lambda d, c: {"x": L.softmax_backward(d, c)},
            dict(x=rng.standard_normal((3, int(rng.integers(2, 8)))) * 2))


def case_dropout(rng):
    seed = int(rng.integers(2 ** 31))
    p = float(rng.uniform(0.1, 0.6))

    def fwd(x):
        return L.dropout_forward(x, p, True, np.random.default_rng(seed))
    return fwd, lambda d, c: {"x": L.dropout_backward(d, c)}, dict(x=rng.standard_normal((2, 3, 9)))


def case_maxpool(rng):
    shape = (2, int(rng.integers(1, 4)), int(rng.integers(2, 12)))
    return (lambda x: L.maxpool_forward(x), lambda d, c: {"x": L.maxpool_backward(d, c)},
            dict(x=_distinct(rng, shape)))


def case_dense(rng):
    d, m = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    inputs = dict(x=rng.standard_normal((3, d)), w=rng.standard_normal((d, m)), b=rng.standard_normal(m))
    return (lambda x, w, b: L.dense_forward(x, w, b),
            lambda g, c: dict(zip("xwb", L.dense_backward(g, c))), inputs)


def case_attention(rng, t=5, c=4, a=3):
    inputs = dict(locals_=rng.standard_normal((2, t, c)), w=rng.standard_normal((c, a)),
                  b=rng.standard_normal(a), u=rng.standard_normal(a))

    def fwd(locals_, w, b, u):
        (v, alpha), cache = L.attention_forward(locals_, w, b, u)
        return np.concatenate([v, alpha], axis=1), (cache, v.shape[1])

    def bwd(d, cache):
        inner, c_dim = cache
        grads = L.attention_backward(d[:, :c_dim], inner, dalpha_extra=d[:, c_dim:])
        return dict(zip(("locals_", "w", "b", "u"), grads))
    return fwd, bwd, inputs


def case_bce(rng):
    targets = rng.integers(0, 2, (4, 9)).astype(float)

    def fwd(z):
        loss, grad = L.bce_with_logits(z, targets)
        return np.array(loss), grad
    return fwd, lambda d, grad: {"z": d * grad}, dict(z=rng.standard_normal((4, 9)) * 2)


def case_residual(rng, c_in=4, c_out=4, t=16, k=3, rate=0.2, train=True, margin=1e-2):
    """Full residual module; inputs are redrawn until no ReLU sits within ``margin`` of its kink."""
    cfg = ModelConfig(input_leads=c_in, input_length=t, kernel_size=k, base_channels=c_in,
                      channel_growth=c_out - c_in, num_residual_modules=3,
                      attention_hidden=2, seed=int(rng.integers(2 ** 31)))
    prefix = "res2." if c_in != c_out else "res0."
    bufs0 = {k_: v.astype(np.float64) for k_, v in init_buffers(cfg).items()}
    base = {k_: v.astype(np.float64) for k_, v in init_parameters(cfg).items() if k_.startswith(prefix)}

    for _ in range(10_000):
        p = {n: v + rng.uniform(-0.3, 0.3, v.shape) if n.endswith(("gamma", "beta")) else v
             for n, v in base.items()}
        seed = int(rng.integers(2 ** 31))
        x = rng.standard_normal((2, c_in, t))

        def fwd(x, __seed=seed, **params):
            bufs = {k_: v.copy() for k_, v in bufs0.items()}
            return residual_forward(x, params, bufs, prefix, train, rate, np.random.default_rng(__seed))

        _, cache = fwd(x, **p)
        pre_relu = np.concatenate([cache[1].ravel(), cache[5].ravel()])
        if np.abs(pre_relu).min() > margin:
            break
    else:
        raise RuntimeError("could not draw a kink-free residual case")

    def bwd(d, cache):
        dx, g = residual_backward(d, cache, prefix)
        return {"x": dx, **g}
    return fwd, bwd, {"x": x, **dict(sorted(p.items()))}


CASES = {
    "conv1d": case_conv1d,
    "batchnorm_train": case_batchnorm,
    "batchnorm_eval": lambda rng: case_batchnorm(rng, train=False),
    "relu": case_relu,
    "sigmoid": case_sigmoid,
    "softmax": case_softmax,
    "dropout": case_dropout,
    "maxpool": case_maxpool,
    "dense": case_dense,
    "attention": case_attention,
    "bce_loss": case_bce,
    "residual_module": case_residual,
    "residual_projection": lambda rng: case_residual(rng, c_in=3, c_out=5),
}


def run_suite(seeds: int = 20, eps: float = 1e-3, corrupt: dict[str, float] | None = None,
              names=None) -> dict[str, float]:
    """Worst relative error per primitive over ``seeds`` random cases."""
    corrupt = corrupt or {}
    worst = {}
    for name in names or CASES:
        errs = []
        for s in range(seeds):
            fwd, bwd, inputs = CASES[name](np.random.default_rng([s, len(name)]))
            errs.append(max(grad_check(fwd, bwd, inputs, eps=eps, seed=s,
                                       corrupt=corrupt.get(name, 0.0)).values()))
        worst[name] = max(errs)
    return worst
