"""Affine coupling flow for synthetic negative generation.

Each coupling conditions on the even (or odd) coordinates of a
d-dimensional element and rescales/shifts the rest, so the transform is
exactly invertible with a closed-form log-determinant. Parities
alternate so every coordinate is transformed. Patches of arbitrary
spatial size are handled by treating elements as i.i.d.: a sampled
(H, W) patch is H*W independent element draws, and a patch log-density
is the sum over its elements.

Log-scale outputs pass through max_log_scale * tanh(.) to keep the
log-determinant bounded early in training.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .model import backward_all, forward_all
from .ops import logsumexp, sigmoid, softmax, softplus

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class CouplingLayer:
    parity: int            # 0: condition on even coords, 1: on odd
    net: nn.MlpNetwork     # cond -> [raw log-scale | shift]
    dim: int

    def __post_init__(self):
        cond = self.cond_idx
        trans = self.trans_idx
        if self.net.in_dim != len(cond) or self.net.out_dim != 2 * len(trans):
            raise ValueError("coupling subnet width does not match mask split")

    @property
    def cond_idx(self):
        return np.arange(self.dim)[np.arange(self.dim) % 2 == self.parity]

    @property
    def trans_idx(self):
        return np.arange(self.dim)[np.arange(self.dim) % 2 != self.parity]


@dataclass
class CouplingFlow:
    layers: list
    dim: int
    max_log_scale: float = 2.0

    @property
    def param_count(self):
        return sum(l.net.param_count for l in self.layers)


def build_coupling_flow(dim, depth=8, hidden=32, seed=0):
    """Stack of `depth` couplings with alternating parities.

    The final affine of every subnet starts at zero, so a fresh flow is
    the identity map.
    """
    if dim < 2:
        raise ValueError("coupling flow needs dim >= 2")
    layers = []
    for i in range(depth):
        parity = i % 2
        n_cond = (dim + 1 - parity) // 2
        n_trans = dim - n_cond
        net = nn.init_mlp([n_cond, hidden, 2 * n_trans], seed=seed * 1000 + i)
        net.layers[-1].weight[:] = 0.0
        net.layers[-1].bias[:] = 0.0
        layers.append(CouplingLayer(parity, net, dim))
    return CouplingFlow(layers, dim)


def _split(out, n_trans, mls):
    raw = out[:, :n_trans]
    shift = out[:, n_trans:]
    th = np.tanh(raw)
    return th, mls * th, shift


def flow_forward(flow, x, with_cache=False):
    """Map data to latent space; returns (z, log_det) per element."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != flow.dim:
        raise ValueError(f"expected (n, {flow.dim}) input, got {x.shape}")
    log_det = np.zeros(x.shape[0])
    caches = []
    h = x
    for layer in flow.layers:
        ci, ti = layer.cond_idx, layer.trans_idx
        out, net_cache = nn.forward(layer.net, h[:, ci])
        th, scale, shift = _split(out, len(ti), flow.max_log_scale)
        x_trans = h[:, ti]
        y = h.copy()
        y[:, ti] = x_trans * np.exp(scale) + shift
        log_det += scale.sum(axis=1)
        caches.append((net_cache, x_trans, th, scale, shift))
        h = y
    if with_cache:
        return h, log_det, caches
    return h, log_det


def flow_inverse(flow, z, with_cache=False):
    """Map latents back to data space (exact inverse of flow_forward)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != flow.dim:
        raise ValueError(f"expected (n, {flow.dim}) input, got {z.shape}")
    caches = [None] * len(flow.layers)
    h = z
    for i in range(len(flow.layers) - 1, -1, -1):
        layer = flow.layers[i]
        ci, ti = layer.cond_idx, layer.trans_idx
        out, net_cache = nn.forward(layer.net, h[:, ci])
        th, scale, shift = _split(out, len(ti), flow.max_log_scale)
        y_trans = h[:, ti]
        x = h.copy()
        x[:, ti] = (y_trans - shift) * np.exp(-scale)
        caches[i] = (net_cache, y_trans, th, scale, shift, x[:, ti].copy())
        h = x
    if with_cache:
        return h, caches
    return h


def flow_logprob(flow, x):
    """ln p(x) per element via change of variables."""
    z, log_det = flow_forward(flow, x)
    base = -0.5 * np.sum(z * z, axis=1) - 0.5 * flow.dim * LOG_2PI
    return base + log_det


def flow_sample(flow, size, seed=None, rng=None, interval=None,
                temperature=1.0):
    """Draw a negative patch by inverting standard-normal latents.

    `size` is either a point count or an (H, W) pair; with an (lo, hi)
    `interval` each requested extent must fall inside it. A temperature
    above 1 widens the latent draw, biasing samples toward the boundary
    of the learned distribution.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    if np.isscalar(size):
        extents, n = (int(size),), int(size)
    else:
        extents = tuple(int(s) for s in size)
        n = int(np.prod(extents))
    if interval is not None:
        lo, hi = interval
        if any(not lo <= e <= hi for e in extents):
            raise ValueError(f"sample size {extents} outside interval [{lo}, {hi}]")
    latents = rng.standard_normal((n, flow.dim)) * temperature
    x = flow_inverse(flow, latents)
    if len(extents) == 2:
        return x.reshape(extents + (flow.dim,))
    return x


# -- parameter plumbing ------------------------------------------------------

def flow_params(flow):
    return np.concatenate([nn.net_params(l.net) for l in flow.layers])


def set_flow_params(flow, vec):
    off = 0
    for layer in flow.layers:
        off = nn.set_net_params(layer.net, vec, off)
    if off != vec.size:
        raise ValueError("parameter vector length mismatch")


def _zero_flow_grads(flow):
    return [nn.zero_grads(l.net) for l in flow.layers]


def flow_grads_vec(grads):
    return np.concatenate([nn.grads_to_vec(g) for g in grads])


# -- backward passes ---------------------------------------------------------

def _forward_path_backward(flow, caches, dz, dlog_det):
    """Gradients of a loss on (z, log_det) w.r.t. flow params and input."""
    grads = _zero_flow_grads(flow)
    dh = dz
    for i in range(len(flow.layers) - 1, -1, -1):
        layer = flow.layers[i]
        ci, ti = layer.cond_idx, layer.trans_idx
        net_cache, x_trans, th, scale, shift = caches[i]
        dy_trans = dh[:, ti]
        es = np.exp(scale)
        dscale = dy_trans * x_trans * es + dlog_det[:, None]
        draw = dscale * flow.max_log_scale * (1.0 - th * th)
        dout = np.concatenate([draw, dy_trans], axis=1)
        net_grads, dcond = nn.backward(layer.net, net_cache, dout)
        grads[i] = nn.add_grads(grads[i], net_grads)
        dx = np.zeros_like(dh)
        dx[:, ci] = dh[:, ci] + dcond
        dx[:, ti] = dy_trans * es
        dh = dx
    return grads, dh


def _inverse_path_backward(flow, caches, dx_out):
    """Gradients of a loss on generated data w.r.t. flow params.

    `caches` comes from flow_inverse(with_cache=True); layers are
    revisited in forward order because the inverse applied them reversed.
    """
    grads = _zero_flow_grads(flow)
    dh = dx_out
    for i, layer in enumerate(flow.layers):
        ci, ti = layer.cond_idx, layer.trans_idx
        net_cache, y_trans, th, scale, shift, x_trans = caches[i]
        dx_trans = dh[:, ti]
        ems = np.exp(-scale)
        dshift = -dx_trans * ems
        dscale = -dx_trans * x_trans
        draw = dscale * flow.max_log_scale * (1.0 - th * th)
        dout = np.concatenate([draw, dshift], axis=1)
        net_grads, dcond = nn.backward(layer.net, net_cache, dout)
        grads[i] = nn.add_grads(grads[i], net_grads)
        dy = np.zeros_like(dh)
        dy[:, ci] = dh[:, ci] + dcond
        dy[:, ti] = dx_trans * ems
        dh = dy
    return grads, dh


def _merge_grads(a, b):
    return [nn.add_grads(ga, gb) for ga, gb in zip(a, b)]


# -- losses --------------------------------------------------------------------

def loss_mle(flow, crops):
    """Mean negative log-likelihood of inlier crops, with flow gradients.

    Crops may be a flat (n, d) batch or an (H, W, d) patch.
    """
    crops = np.asarray(crops, dtype=np.float64)
    flat = crops.reshape(-1, crops.shape[-1])
    if flat.shape[0] == 0:
        raise ValueError("empty crop batch")
    z, log_det, caches = flow_forward(flow, flat, with_cache=True)
    n = flat.shape[0]
    value = float(np.mean(0.5 * np.sum(z * z, axis=1)
                          + 0.5 * flow.dim * LOG_2PI - log_det))
    grads, _ = _forward_path_backward(flow, caches, z / n,
                                      np.full(n, -1.0 / n))
    return value, grads


def _jsd_onehot(n_classes):
    k = float(n_classes)
    kl_p = math.log(2.0 * k / (k + 1.0))
    kl_u = (math.log(2.0 / (k + 1.0)) + (k - 1.0) * math.log(2.0)) / k
    return 0.5 * (kl_p + kl_u)


def jsd_to_uniform(posteriors):
    """Raw Jensen-Shannon divergence of each row to the uniform
    distribution (natural logs, 1/2 mixture convention)."""
    p = np.asarray(posteriors, dtype=np.float64)
    if p.ndim != 2 or np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("rows must be probability distributions")
    u = 1.0 / p.shape[1]
    m = 0.5 * (p + u)
    kl_p = np.sum(np.where(p > 0, p * np.log(np.maximum(p, 1e-300) / m), 0.0), axis=1)
    kl_u = np.sum(u * np.log(u / m), axis=1)
    return 0.5 * (kl_p + kl_u)


def loss_jsd(posteriors):
    """Mean divergence-to-uniform of the given class posteriors, scaled so
    the per-element value is 0 at uniform and exactly ln 2 at one-hot."""
    p = np.asarray(posteriors, dtype=np.float64)
    scale = math.log(2.0) / _jsd_onehot(p.shape[1])
    return float(np.mean(jsd_to_uniform(p)) * scale)


def boundary_loss(flow, model, latents, jsd_sign=1.0):
    """Confidence penalty on flow samples, differentiated back to the flow.

    Latents are inverted into negative elements, pushed through the
    model, and the scaled divergence-to-uniform of the class posterior is
    averaged. Gradients travel through the model's input and the inverse
    transform; model parameters are left untouched.
    """
    x_gen, inv_caches = flow_inverse(flow, latents, with_cache=True)
    _, logits, _, caches = forward_all(model, x_gen)
    p = softmax(logits, axis=-1)
    n, k = p.shape
    scale = math.log(2.0) / _jsd_onehot(k)
    value = float(np.mean(jsd_to_uniform(p)) * scale) * jsd_sign

    m = 0.5 * (p + 1.0 / k)
    dp = 0.5 * np.log(p / m) * (scale * jsd_sign / n)
    dlogits = p * (dp - np.sum(dp * p, axis=1, keepdims=True))
    _, dx = backward_all(model, caches, dlogits, np.zeros(n))
    grads, _ = _inverse_path_backward(flow, inv_caches, dx)
    return value, grads, x_gen


def flow_total_loss(flow, crops, model=None, lam=0.0, latents=None, jsd_sign=1.0):
    """Data term plus lam-weighted boundary term; returns (value, grads)."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    value, grads = loss_mle(flow, crops)
    if lam > 0:
        if model is None or latents is None:
            raise ValueError("boundary term needs a model and latents")
        b_value, b_grads, _ = boundary_loss(flow, model, latents, jsd_sign)
        value += lam * b_value
        grads = _merge_grads(grads, [[(lam * dw, lam * db) for dw, db in g]
                                     for g in b_grads])
    return value, grads


def alt_flow_loss(flow, model, crops, latents, weight_d=1.0, weight_x=1.0):
    """Ablated objective: the flow is steered by the detector losses at
    its own samples instead of the divergence-to-uniform term."""
    value, grads = loss_mle(flow, crops)
    if weight_d == 0 and weight_x == 0:
        return value, grads
    x_gen, inv_caches = flow_inverse(flow, latents, with_cache=True)
    _, logits, t, caches = forward_all(model, x_gen)
    n = x_gen.shape[0]
    value += weight_d * float(np.mean(softplus(t)))
    value += weight_x * float(np.mean(logsumexp(logits, axis=-1)))
    dlogits = softmax(logits, axis=-1) * (weight_x / n)
    dt = sigmoid(t) * (weight_d / n)
    _, dx = backward_all(model, caches, dlogits, dt)
    det_grads, _ = _inverse_path_backward(flow, inv_caches, dx)
    return value, _merge_grads(grads, det_grads)
