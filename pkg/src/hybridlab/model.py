"""Hybrid anomaly scoring stack.

A closed-set classifier (feature extractor + affine class head) is
extended with a small head that predicts the probability that an element
belongs to the inlier dataset. Three anomaly scores fall out:

  s_disc = ln P(out | x)          from the dataset-posterior head
  s_gen  = -ln p_hat(x)           p_hat = sum of exponentiated logits
  s_hybrid = s_disc + s_gen       (higher = more anomalous)

Labels are 0-based class ids; an element flagged anomalous gets the extra
label `n_classes`, and VOID (-1) marks ignored elements.
"""

from dataclasses import dataclass

import numpy as np

from . import nn
from .ops import log_sigmoid, logsumexp, sigmoid, softmax

VOID = -1


@dataclass
class HybridModel:
    extractor: nn.MlpNetwork   # x -> pre-logits z
    classifier: nn.MlpNetwork  # z -> logits s, one affine layer
    posterior: nn.MlpNetwork   # z -> scalar logit of P(in | x)
    n_classes: int

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.classifier.in_dim != self.extractor.out_dim:
            raise ValueError("classifier head width does not match pre-logits")
        if self.posterior.in_dim != self.extractor.out_dim:
            raise ValueError("posterior head width does not match pre-logits")
        if self.classifier.out_dim != self.n_classes:
            raise ValueError("classifier head must emit one logit per class")
        if self.posterior.out_dim != 1:
            raise ValueError("posterior head must emit a single logit")

    @property
    def in_dim(self):
        return self.extractor.in_dim

    @property
    def param_count(self):
        return (self.extractor.param_count + self.classifier.param_count
                + self.posterior.param_count)


def build_hybrid_model(in_dim, n_classes, hidden=64, depth=3,
                       posterior_hidden=32, seed=0,
                       feature_activation="sigmoid"):
    """Fresh model: `depth` hidden ReLU layers, affine class head,
    affine-ReLU-affine posterior head.

    Pre-logits default to sigmoid so the feature scale stays bounded
    during open-set fine-tuning; the negative likelihood term otherwise
    drives an unbounded multiplicative runaway of the logits.
    """
    extractor = nn.init_mlp([in_dim] + [hidden] * depth, seed=seed,
                            final_activation=feature_activation)
    classifier = nn.init_mlp([hidden, n_classes], seed=seed + 1)
    posterior = nn.init_mlp([hidden, posterior_hidden, 1], seed=seed + 2)
    return HybridModel(extractor, classifier, posterior, n_classes)


# -- forward products --------------------------------------------------------

def forward_all(model, x):
    """Full forward pass on a flat batch (n, in_dim).

    Returns (z, logits, post_logit, caches): pre-logits, class logits,
    the scalar dataset-posterior logit per element, and the backward
    caches of the three sub-networks.
    """
    z, c_ext = nn.forward(model.extractor, x)
    logits, c_cls = nn.forward(model.classifier, z)
    t, c_post = nn.forward(model.posterior, z)
    return z, logits, t[:, 0], (c_ext, c_cls, c_post)


def backward_all(model, caches, dlogits, dpost_logit):
    """Backpropagate gradients w.r.t. logits and posterior logit.

    Returns ((extractor, classifier, posterior) grad lists, dx).
    """
    c_ext, c_cls, c_post = caches
    g_cls, dz_cls = nn.backward(model.classifier, c_cls, dlogits)
    g_post, dz_post = nn.backward(model.posterior, c_post,
                                  dpost_logit.reshape(-1, 1))
    g_ext, dx = nn.backward(model.extractor, c_ext, dz_cls + dz_post)
    return (g_ext, g_cls, g_post), dx


def model_params(model):
    return np.concatenate([nn.net_params(model.extractor),
                           nn.net_params(model.classifier),
                           nn.net_params(model.posterior)])


def set_model_params(model, vec):
    off = nn.set_net_params(model.extractor, vec, 0)
    off = nn.set_net_params(model.classifier, vec, off)
    off = nn.set_net_params(model.posterior, vec, off)
    if off != vec.size:
        raise ValueError("parameter vector length mismatch")


def model_grads_vec(grads):
    g_ext, g_cls, g_post = grads
    return np.concatenate([nn.grads_to_vec(g_ext), nn.grads_to_vec(g_cls),
                           nn.grads_to_vec(g_post)])


# -- scores -------------------------------------------------------------------

def class_posterior(logits):
    """Softmax class probabilities over the last axis."""
    return softmax(logits, axis=-1)


def unnormalized_loglikelihood(logits):
    """ln p_hat(x) = ln sum_y exp(s_y); shifts by exactly c when all
    logits shift by c."""
    return logsumexp(logits, axis=-1)


def dataset_posterior(pre_logits, head):
    """P(in | x) = sigmoid of the head's scalar output on pre-logits."""
    t, _ = nn.forward(head, pre_logits)
    return sigmoid(t[:, 0])


def discriminative_score(post_logit):
    """ln P(out | x), computed as log-sigmoid of the negated head logit so
    it stays finite when the posterior saturates."""
    return log_sigmoid(-np.asarray(post_logit, dtype=np.float64))


def generative_score(logits):
    """-ln p_hat(x)."""
    return -unnormalized_loglikelihood(logits)


def hybrid_score(logits, pre_logits, head, weight_disc=1.0, weight_gen=1.0):
    """Weighted sum of the two component scores (default 1:1 log-ratio)."""
    t, _ = nn.forward(head, np.asarray(pre_logits, dtype=np.float64))
    s_d = discriminative_score(t[:, 0])
    s_g = generative_score(logits)
    return weight_disc * s_d + weight_gen * s_g


@dataclass
class DenseScores:
    labels: np.ndarray    # closed-set argmax class per element
    hybrid: np.ndarray
    disc: np.ndarray      # ln P(out | x)
    gen: np.ndarray       # -ln p_hat(x)


def dense_scores(model, batch, weight_disc=1.0, weight_gen=1.0):
    """Closed-set labels plus hybrid/component score maps.

    `batch` may be a flat (n, d) batch or an (H, W, d) grid; score maps
    keep the element-grid shape. s_hybrid = w_d*s_disc + w_g*s_gen holds
    exactly per element.
    """
    batch = np.asarray(batch, dtype=np.float64)
    grid_shape = batch.shape[:-1]
    flat = batch.reshape(-1, batch.shape[-1])
    _, logits, t, _ = forward_all(model, flat)
    labels = np.argmax(logits, axis=-1)
    s_d = discriminative_score(t)
    s_g = generative_score(logits)
    s_h = weight_disc * s_d + weight_gen * s_g
    return DenseScores(labels.reshape(grid_shape), s_h.reshape(grid_shape),
                       s_d.reshape(grid_shape), s_g.reshape(grid_shape))


@dataclass
class OpenSetPrediction:
    labels: np.ndarray   # class id in 0..K-1, or K for detected anomalies
    threshold: float


def open_set_predict(closed_labels, scores, threshold, n_classes):
    """Override closed-set labels with the anomaly label where the score
    strictly exceeds the threshold; ties stay inliers."""
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    closed_labels = np.asarray(closed_labels)
    scores = np.asarray(scores, dtype=np.float64)
    if closed_labels.shape != scores.shape:
        raise ValueError("label/score shape mismatch")
    labels = np.where(scores > threshold, n_classes, closed_labels)
    return OpenSetPrediction(labels, float(threshold))
