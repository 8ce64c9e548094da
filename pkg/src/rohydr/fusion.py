"""Fusion of per-modality tokens and the adversarial refinement of the
fused vector.

Two fusion passes exist side by side during training: one over fully
observed tokens (the target distribution) and one where missing slots
were filled by the diffusion recovery.  A residual refiner nudges the
recovered fused vector toward the observed one; a small discriminator
supplies the adversarial signal that keeps refined vectors on the
observed manifold.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import MODALITIES
from .nn import (AttentionLayer, FeedForwardLayer, LayerNorm, Linear,
                 MLPHead, ResidualMLP)
from .tensor import DomainError, Tensor

PROB_EPS = 1e-7


class FusionNet:
    """Self-attention over the concatenated token sequence, mean-pool,
    linear projection down to the fused width."""

    def __init__(self, reg, rng, dim, n_heads, ff_hidden, d_fused,
                 n_blocks=1):
        self.type_emb = reg.add(
            "fusion", "fusion.type_emb",
            Tensor(0.02 * rng.standard_normal((3, dim)), requires_grad=True))
        self.blocks = []
        for i in range(n_blocks):
            self.blocks.append((
                AttentionLayer(reg, "fusion", f"fusion.b{i}.self", rng,
                               dim, n_heads),
                FeedForwardLayer(reg, "fusion", f"fusion.b{i}.ff", rng,
                                 dim, ff_hidden),
            ))
        self.out_norm = LayerNorm(reg, "fusion", "fusion.out_norm", rng, dim)
        self.proj = Linear(reg, "fusion", "fusion.proj", rng, dim, d_fused)

    def __call__(self, tokens_by_modality):
        parts = [tokens_by_modality[m] for m in MODALITIES]
        n = parts[0].shape[1]
        ids = np.repeat(np.arange(3), n)
        h = T.concat(parts, axis=1) + T.gather_rows(self.type_emb, ids)
        for attn, ff in self.blocks:
            h = ff(attn(h))
        return self.proj(self.out_norm(h).mean(axis=1))


class FusedRefiner:
    """Residual correction of the fused vector built from recovered
    tokens; identity at initialization."""

    def __init__(self, reg, rng, d_fused, hidden):
        self.net = ResidualMLP(reg, "multimodal_recon", "refine_fused", rng,
                               d_fused, hidden)

    def __call__(self, f):
        return self.net(f)


class Discriminator:
    """Scores a fused vector as coming from fully observed data.

    Output probabilities are clamped away from {0, 1} so the log losses
    stay finite no matter how confident the net gets.
    """

    def __init__(self, reg, rng, d_fused, hidden):
        self.net = MLPHead(reg, "discriminator", "disc", rng, d_fused,
                           hidden, 1)

    def __call__(self, f):
        p = T.sigmoid(self.net(f))
        return T.clip(p, PROB_EPS, 1.0 - PROB_EPS).reshape(-1)


class Classifier:
    """Regression head from the fused vector to the scalar label."""

    def __init__(self, reg, rng, d_fused, hidden):
        self.net = MLPHead(reg, "classifier", "cls", rng, d_fused, hidden, 1)

    def __call__(self, f):
        return self.net(f).reshape(-1)


# ---- losses ----

def reconstruction_loss(f_rec, f_gt):
    """Squared distance between the two fused vectors, summed per
    instance and averaged over the batch.  The observed-side vector is a
    fixed target; gradients only reach the recovery path."""
    diff = f_rec - f_gt.detach()
    return (diff * diff).sum(axis=1).mean()


def discriminator_loss(p_gt, p_rec):
    """Binary cross entropy for real-vs-recovered probabilities."""
    return -(T.log(p_gt).mean()) - T.log(1.0 - p_rec).mean()


def adversarial_loss(p_rec):
    """Generator-side score: recovered vectors should look observed."""
    return -(T.log(p_rec).mean())


def mr_loss(adv, rec, lam_adv):
    """Blend of adversarial and reconstruction pressure on the refiner."""
    if not 0.0 <= lam_adv <= 1.0:
        raise DomainError(f"adversarial weight {lam_adv} outside [0, 1]")
    return adv * lam_adv + rec * (1.0 - lam_adv)


def classification_loss(pred, y):
    """Mean squared error against the scalar sentiment labels."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if tuple(pred.shape) != y.shape:
        raise DomainError(f"prediction shape {pred.shape} does not match "
                          f"labels {y.shape}")
    diff = pred - Tensor(y)
    return (diff * diff).mean()
