"""Label targets and the adversarial / reconstruction losses.

Class indices are 1-based: real classes are 1..K and the FAKE class is K+1.
Every loss sums its per-class binary cross-entropy terms and averages over
the batch, working from logits so no probability is ever clamped.
"""
from __future__ import annotations

import numpy as np

from .tensor import DTYPE, sigmoid


def one_hot_real(k, K):
    """Discriminator target for a real image of class ``k``: length K+1, zero at FAKE."""
    if not 1 <= k <= K:
        raise ValueError(f"real class must be in 1..{K}, got {k}")
    y = np.zeros(K + 1, dtype=DTYPE)
    y[k - 1] = 1.0
    return y


def one_hot_fake(K):
    y = np.zeros(K + 1, dtype=DTYPE)
    y[K] = 1.0
    return y


def real_targets(ks, K):
    ks = np.asarray(ks)
    if ks.size and (ks.min() < 1 or ks.max() > K):
        raise ValueError(f"real class indices must be in 1..{K}")
    t = np.zeros((ks.shape[0], K + 1), dtype=DTYPE)
    t[np.arange(ks.shape[0]), ks - 1] = 1.0
    return t


def fake_targets(M, K):
    t = np.zeros((M, K + 1), dtype=DTYPE)
    t[:, K] = 1.0
    return t


def bce_terms(logits, targets):
    """Per-element binary cross-entropy divided by the batch size; these sum
    to the loss. Uses -log p = softplus(-l) and -log(1 - p) = softplus(l)."""
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.shape != targets.shape:
        raise ValueError(f"logits {logits.shape} and targets {targets.shape} differ in shape")
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    softplus = np.maximum(logits, 0.0) + np.log1p(np.exp(-np.abs(logits)))
    return (softplus - targets * logits) / logits.shape[0]


def bce_with_logits(logits, targets):
    """Batch mean of the class-summed binary cross-entropy, and its gradient."""
    terms = bce_terms(logits, targets)
    grad = (sigmoid(logits) - targets) / logits.shape[0]
    return float(np.sum(terms)), grad


def loss_d(real_logits, real_k, fake_logits):
    """Discriminator loss: real images toward their class, generated ones toward FAKE.

    Returns (loss, grad_real_logits, grad_fake_logits, real_term, fake_term).
    """
    K = real_logits.shape[1] - 1
    real_term, g_real = bce_with_logits(real_logits, real_targets(real_k, K))
    fake_term, g_fake = bce_with_logits(fake_logits, fake_targets(fake_logits.shape[0], K))
    return real_term + fake_term, g_real, g_fake, real_term, fake_term


def loss_adv(fake_logits, assigned_k):
    """Generator adversarial loss: generated images toward their assigned class
    and away from every other output, FAKE included. Returns (loss, grad)."""
    K = fake_logits.shape[1] - 1
    ks = np.asarray(assigned_k)
    if ks.size and ks.max() == K + 1:
        raise ValueError("the FAKE class cannot be assigned to a generated image")
    return bce_with_logits(fake_logits, real_targets(ks, K))


def loss_l2(recon, target):
    """Batch mean of the per-image squared L2 distance. Returns (loss, grad)."""
    if recon.shape != target.shape:
        raise ValueError(f"reconstruction {recon.shape} and target {target.shape} differ in shape")
    n = recon.shape[0]
    diff = recon - target
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def l2_terms(recon, target):
    """Per-pixel squared differences divided by the batch size; these sum to L_L2."""
    diff = recon - target
    return diff * diff / recon.shape[0]


def loss_g(adv, l2, lambda_rec=1.0):
    return adv + lambda_rec * l2
