"""Minimal differentiable substrate: layers with hand-written backward passes,
losses, AdamW, and a finite-difference gradient checker.

Networks are described by a flat architecture tuple list, e.g. the refinement
controller is::

    [("layernorm", d_in), ("linear", d_in, H), ("gelu",), ("dropout", p),
     ("resblock", H, p), ("linear", H, 1), ("sigmoid",)]

Parameters live in a plain ``{name: ndarray}`` dict keyed by layer index.
All math is float64; training is single-threaded and bit-deterministic for a
fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_GELU_C = np.sqrt(2.0 / np.pi)
_LN_EPS = 1e-8


def gelu(x):
    """tanh-approximation GELU."""
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_grad(x):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class TrainHyper:
    """Optimizer and regularization knobs."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    dropout: float = 0.1
    huber_delta: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0,1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0,1)")


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


# ---------------------------------------------------------------------------
# Parameter initialization
# ---------------------------------------------------------------------------

def _expand(arch):
    """Flatten resblock entries into primitive sublayers, keeping structure."""
    out = []
    for i, spec in enumerate(arch):
        kind = spec[0]
        if kind == "resblock":
            _, width, p = spec
            inner = [("layernorm", width), ("linear", width, width), ("gelu",),
                     ("linear", width, width), ("dropout", p)]
            out.append((i, "resblock", inner))
        else:
            out.append((i, kind, spec))
    return out


def init_params(arch, rng: np.random.Generator) -> dict:
    """Fresh parameters for an architecture description."""
    params = {}

    def init_layer(prefix, kind, spec):
        if kind == "linear":
            _, fan_in, fan_out = spec
            scale = 1.0 / np.sqrt(fan_in)
            params[f"{prefix}.W"] = rng.uniform(-scale, scale, size=(fan_in, fan_out))
            params[f"{prefix}.b"] = np.zeros(fan_out)
        elif kind == "layernorm":
            _, width = spec
            params[f"{prefix}.g"] = np.ones(width)
            params[f"{prefix}.s"] = np.zeros(width)

    for i, kind, spec in _expand(arch):
        if kind == "resblock":
            for j, (ik, *_rest) in enumerate(spec):
                init_layer(f"{i}.{j}", ik, spec[j])
        else:
            init_layer(str(i), kind, spec)
    return params


def clone_params(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


# ---------------------------------------------------------------------------
# Forward / backward over an architecture description
# ---------------------------------------------------------------------------

def _layer_forward(prefix, kind, spec, params, x, mode, rng):
    if kind == "linear":
        W, b = params[f"{prefix}.W"], params[f"{prefix}.b"]
        return x @ W + b, ("linear", prefix, x)
    if kind == "layernorm":
        g, s = params[f"{prefix}.g"], params[f"{prefix}.s"]
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc ** 2).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + _LN_EPS)
        xn = xc * inv
        return xn * g + s, ("layernorm", prefix, xn, inv)
    if kind == "gelu":
        return gelu(x), ("gelu", None, x)
    if kind == "dropout":
        p = spec[1]
        if mode == "train" and p > 0:
            if rng is None:
                raise ValueError("dropout in train mode needs an rng stream")
            keep = (rng.random(x.shape) >= p) / (1.0 - p)
            return x * keep, ("dropout", None, keep)
        return x, ("dropout", None, None)
    if kind == "sigmoid":
        y = sigmoid(x)
        return y, ("sigmoid", None, y)
    raise ValueError(f"unknown layer kind '{kind}'")


def _layer_backward(cache, params, grads, dy):
    kind, prefix, *rest = cache
    if kind == "linear":
        (x,) = rest
        W = params[f"{prefix}.W"]
        grads[f"{prefix}.W"] = grads.get(f"{prefix}.W", 0) + x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
        grads[f"{prefix}.b"] = grads.get(f"{prefix}.b", 0) + dy.reshape(-1, dy.shape[-1]).sum(axis=0)
        return dy @ W.T
    if kind == "layernorm":
        xn, inv = rest
        g = params[f"{prefix}.g"]
        flat_xn = xn.reshape(-1, xn.shape[-1])
        flat_dy = dy.reshape(-1, dy.shape[-1])
        grads[f"{prefix}.g"] = grads.get(f"{prefix}.g", 0) + (flat_dy * flat_xn).sum(axis=0)
        grads[f"{prefix}.s"] = grads.get(f"{prefix}.s", 0) + flat_dy.sum(axis=0)
        dxn = dy * g
        # d/dx of (x - mu) * inv, with inv depending on x through the variance
        dx = inv * (dxn - dxn.mean(axis=-1, keepdims=True)
                    - xn * (dxn * xn).mean(axis=-1, keepdims=True))
        return dx
    if kind == "gelu":
        (x,) = rest
        return dy * gelu_grad(x)
    if kind == "dropout":
        (keep,) = rest
        return dy if keep is None else dy * keep
    if kind == "sigmoid":
        (y,) = rest
        return dy * y * (1.0 - y)
    raise ValueError(f"unknown cache kind '{kind}'")


def net_forward(params: dict, arch, x, mode: str = "eval", rng=None):
    """Run the network; returns (output, cache) with output shape (N,) for a
    1-wide final layer (or scalar for a single 1-D input)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    caches = []
    for i, kind, spec in _expand(arch):
        if kind == "resblock":
            skip = x
            inner_caches = []
            for j, inner_spec in enumerate(spec):
                x, c = _layer_forward(f"{i}.{j}", inner_spec[0], inner_spec, params, x, mode, rng)
                inner_caches.append(c)
            x = skip + x
            caches.append(("resblock", None, inner_caches))
        else:
            x, c = _layer_forward(str(i), kind, spec, params, x, mode, rng)
            caches.append(c)
    if x.shape[-1] == 1:
        x = x[..., 0]
    if single:
        x = x[0] if x.ndim else float(x)
    return x, ["net", caches, single]


def net_backward(cache, params: dict, upstream) -> dict:
    """Gradients for every parameter given d(loss)/d(output).

    A cache is single-use: it is consumed by the backward pass."""
    if not (isinstance(cache, list) and len(cache) >= 3):
        raise ValueError("foreign object passed to net_backward")
    tag, caches, single = cache[0], cache[1], cache[2]
    if tag == "consumed":
        raise ValueError("cache already consumed by a previous backward pass")
    if tag != "net":
        raise ValueError("stale or foreign cache passed to net_backward")
    cache[0] = "consumed"
    dy = np.asarray(upstream, dtype=np.float64)
    if single:
        dy = np.atleast_1d(dy)
    if dy.ndim == 1:
        dy = dy[:, None]
    grads = {}
    for c in reversed(caches):
        if c[0] == "resblock":
            dskip = dy
            for inner in reversed(c[2]):
                dy = _layer_backward(inner, params, grads, dy)
            dy = dy + dskip
        else:
            dy = _layer_backward(c, params, grads, dy)
    for k in params:
        if k not in grads:
            grads[k] = np.zeros_like(params[k])
    return grads


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

_CLIP = 1e-12


def masked_bce(pred, target, mask=None):
    """Mean binary cross-entropy over masked entries; returns (loss, dloss/dpred)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if mask is None:
        mask = np.ones_like(pred)
    mask = np.asarray(mask, dtype=np.float64)
    denom = mask.sum()
    if denom == 0:
        return 0.0, np.zeros_like(pred)
    p = np.clip(pred, _CLIP, 1.0 - _CLIP)
    loss = -(mask * (target * np.log(p) + (1.0 - target) * np.log1p(-p))).sum() / denom
    dpred = mask * (p - target) / (p * (1.0 - p)) / denom
    return float(loss), dpred


def huber(x, delta: float):
    """Elementwise Huber value and derivative."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    quad = a <= delta
    val = np.where(quad, 0.5 * x ** 2, delta * (a - 0.5 * delta))
    grad = np.where(quad, x, delta * np.sign(x))
    return val, grad


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

def adamw_step(params: dict, grads: dict, state: AdamWState, hyper: TrainHyper):
    """Decoupled-weight-decay Adam update, in place; returns (params, state)."""
    state.step += 1
    t = state.step
    b1, b2 = hyper.beta1, hyper.beta2
    for k, p in params.items():
        g = grads[k]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter '{k}' at step {t}")
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[k] = m
        state.v[k] = v
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p -= hyper.learning_rate * (mhat / (np.sqrt(vhat) + hyper.eps) + hyper.weight_decay * p)
    return params, state


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(params: dict, arch, loss_fn, probe_inputs, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` maps the network output array to ``(scalar, dloss/doutput)``.
    Runs in eval mode (dropout off).
    """
    x = np.asarray(probe_inputs, dtype=np.float64)
    out, cache = net_forward(params, arch, x, mode="eval")
    _, dout = loss_fn(out)
    analytic = net_backward(cache, params, dout)

    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        aflat = analytic[name].reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            lp, _ = loss_fn(net_forward(params, arch, x, mode="eval")[0])
            flat[idx] = orig - step
            lm, _ = loss_fn(net_forward(params, arch, x, mode="eval")[0])
            flat[idx] = orig
            fd = (lp - lm) / (2 * step)
            err = abs(aflat[idx] - fd) / max(abs(aflat[idx]), abs(fd), 1e-12)
            worst = max(worst, err)
    return worst
