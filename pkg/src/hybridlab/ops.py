"""Numerically stable elementwise and reduction primitives.

Everything here operates on float64 arrays and stays finite for finite
inputs of any magnitude.
"""

import numpy as np


def logsumexp(values, axis=-1, keepdims=False):
    """ln(sum(exp(values))) along `axis`, computed via max-subtraction."""
    v = np.asarray(values, dtype=np.float64)
    if v.shape[axis] == 0:
        raise ValueError("logsumexp over an empty axis")
    m = np.max(v, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return out


def softmax(values, axis=-1):
    """Probabilities proportional to exp(values); sums to 1 along `axis`."""
    v = np.asarray(values, dtype=np.float64)
    if v.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    e = np.exp(v - np.max(v, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    """ln(1 + exp(x)) without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def log_sigmoid(x):
    """ln(sigmoid(x)) = -softplus(-x); safe near sigmoid saturation."""
    return -softplus(-np.asarray(x, dtype=np.float64))


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)
