"""Minimal dense neural-network engine.

Hand-written forward/backward passes for small MLPs over float64 numpy
arrays, plus flat-vector parameter plumbing, SGD/Adam, and a central
finite-difference gradient oracle. Inputs carry an explicit batch
dimension; data is row-major throughout.
"""

from dataclasses import dataclass

import numpy as np

from .ops import sigmoid

ACTIVATIONS = ("identity", "relu", "sigmoid")


@dataclass
class AffineLayer:
    weight: np.ndarray  # (d_in, d_out)
    bias: np.ndarray    # (d_out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError("weight/bias shape mismatch")


@dataclass
class MlpNetwork:
    layers: list

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ValueError("consecutive layer dimensions do not chain")

    @property
    def in_dim(self):
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self):
        return self.layers[-1].weight.shape[1]

    @property
    def param_count(self):
        return sum(l.weight.size + l.bias.size for l in self.layers)


def init_mlp(sizes, seed=0, hidden_activation="relu", final_activation="identity"):
    """Build an MLP with He-style init; sizes = [d_in, h1, ..., d_out]."""
    rng = np.random.default_rng(seed)
    layers = []
    for i, (d_in, d_out) in enumerate(zip(sizes, sizes[1:])):
        act = final_activation if i == len(sizes) - 2 else hidden_activation
        scale = np.sqrt(2.0 / d_in) if act == "relu" else np.sqrt(1.0 / d_in)
        w = rng.normal(scale=scale, size=(d_in, d_out))
        layers.append(AffineLayer(w, np.zeros(d_out), act))
    return MlpNetwork(layers)


def _activate(pre, kind):
    if kind == "identity":
        return pre
    if kind == "relu":
        return np.maximum(pre, 0.0)
    return sigmoid(pre)


def forward(net, x):
    """Run the net on a batch (n, d_in); returns (output, cache).

    The cache holds per-layer (input, pre-activation, post-activation)
    triples and is what `backward` consumes.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValueError(f"input shape {x.shape} does not match net in_dim {net.in_dim}")
    cache = []
    h = x
    for layer in net.layers:
        pre = h @ layer.weight + layer.bias
        post = _activate(pre, layer.activation)
        cache.append((h, pre, post))
        h = post
    return h, cache


def backward(net, cache, dout):
    """Backpropagate dL/d(output) through the net.

    Returns (grads, dx) where grads is a list of (dW, db) matching the
    layer order and dx is dL/d(input).
    """
    if len(cache) != len(net.layers):
        raise ValueError("cache does not match network depth")
    dout = np.asarray(dout, dtype=np.float64)
    if dout.shape != cache[-1][2].shape:
        raise ValueError("output gradient shape mismatch")
    grads = [None] * len(net.layers)
    dh = dout
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        x, pre, post = cache[i]
        if layer.activation == "identity":
            dpre = dh
        elif layer.activation == "relu":
            dpre = dh * (pre > 0.0)
        else:
            dpre = dh * post * (1.0 - post)
        grads[i] = (x.T @ dpre, dpre.sum(axis=0))
        dh = dpre @ layer.weight.T
    return grads, dh


# -- flat parameter vectors ------------------------------------------------

def net_params(net):
    """Flatten all layer parameters into one float64 vector."""
    return np.concatenate([np.concatenate([l.weight.ravel(), l.bias.ravel()])
                           for l in net.layers])


def set_net_params(net, vec, offset=0):
    """Write a flat vector back into the layers; returns the next offset."""
    for layer in net.layers:
        n = layer.weight.size
        layer.weight = vec[offset:offset + n].reshape(layer.weight.shape).copy()
        offset += n
        n = layer.bias.size
        layer.bias = vec[offset:offset + n].copy()
        offset += n
    return offset


def grads_to_vec(grads):
    return np.concatenate([np.concatenate([dw.ravel(), db.ravel()])
                           for dw, db in grads])


def zero_grads(net):
    return [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in net.layers]


def add_grads(acc, grads):
    return [(aw + gw, ab + gb) for (aw, ab), (gw, gb) in zip(acc, grads)]


# -- optimizers ------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str                      # "sgd" | "adam"
    learning_rate: float
    step: int = 0
    m: np.ndarray = None
    v: np.ndarray = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


def make_optimizer(kind, learning_rate, n_params):
    state = OptimizerState(kind, learning_rate)
    if kind == "adam":
        state.m = np.zeros(n_params)
        state.v = np.zeros(n_params)
    return state


def optimizer_step(state, params, grads):
    """One update; mutates `state`, returns the new parameter vector."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError("parameter/gradient shape mismatch")
    if not np.all(np.isfinite(grads)):
        raise ValueError("non-finite gradients")
    state.step += 1
    if state.kind == "sgd":
        return params - state.learning_rate * grads
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


# -- gradient oracle -------------------------------------------------------

def finite_difference_check(loss_and_grad, point, epsilon=1e-5):
    """Max relative discrepancy between analytic and central-difference grads.

    `loss_and_grad(p)` must return (scalar loss, gradient vector). The
    discrepancy per coordinate is |g - d| / (|g| + |d| + 1e-12).
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError("epsilon outside [1e-7, 1e-3]")
    point = np.asarray(point, dtype=np.float64)
    _, analytic = loss_and_grad(point)
    analytic = np.asarray(analytic, dtype=np.float64)
    worst = 0.0
    for i in range(point.size):
        p = point.copy()
        p[i] += epsilon
        lo_hi = loss_and_grad(p)[0]
        p[i] -= 2.0 * epsilon
        lo_lo = loss_and_grad(p)[0]
        if not (np.isfinite(lo_hi) and np.isfinite(lo_lo)):
            raise ValueError("non-finite loss at perturbed point")
        diff = (lo_hi - lo_lo) / (2.0 * epsilon)
        rel = abs(analytic[i] - diff) / (abs(analytic[i]) + abs(diff) + 1e-12)
        worst = max(worst, rel)
    return worst
