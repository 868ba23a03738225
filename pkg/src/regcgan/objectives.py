"""GAN, regularizer and classification losses, and the per-player compositions.

Each player minimizes its own composed loss:

* discriminator (and classifier): ``gan_d + beta * reg_d [+ gamma * cls]``
* generator: ``gan_g + lambda * reg_g``

``reg_d`` is the positive feature distance between generated pairs; the
discriminator *minimizes* it, which is the same thing as maximizing the
negated distance inside the shared minimax value. It is evaluated on
generator outputs detached from the generator, so it never reaches the
generator's parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    log_softmax,
    mul,
    negate,
    reduce_mean,
    reduce_sum,
    scale,
    softplus,
    squared_l2,
)

STANDARD = "standard"
LEAST_SQUARES = "least_squares"
VARIANTS = (STANDARD, LEAST_SQUARES)


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.1
    beta: float = 0.004
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("lam", "beta", "gamma"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {getattr(self, name)}")


def _check_variant(variant: str) -> None:
    if variant not in VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}; expected one of {VARIANTS}")


def _check_scores(*scores: Tensor) -> None:
    for s in scores:
        if s.ndim != 2 or s.shape[1] != 1:
            raise ShapeError(f"scores must be [b x 1], got {s.shape}")


def _half_mean_sq(s: Tensor, target: float) -> Tensor:
    # mean of 0.5 * (s - target)^2
    return scale(squared_l2(s, Tensor(np.full(s.shape, target))), 0.5 / s.shape[0])


def gan_d_loss(variant: str, score_real: Tensor, score_fake: Tensor) -> Tensor:
    """Discriminator GAN loss. Standard scores are logits."""
    _check_variant(variant)
    _check_scores(score_real, score_fake)
    if variant == STANDARD:
        # -log sigmoid(s) = softplus(-s); -log(1 - sigmoid(s)) = softplus(s)
        return reduce_mean(softplus(negate(score_real))) + reduce_mean(softplus(score_fake))
    return _half_mean_sq(score_real, 1.0) + _half_mean_sq(score_fake, 0.0)


def gan_g_loss(variant: str, score_fake: Tensor) -> Tensor:
    """Generator GAN loss (non-saturating for the standard variant)."""
    _check_variant(variant)
    _check_scores(score_fake)
    if variant == STANDARD:
        return reduce_mean(softplus(negate(score_fake)))
    return _half_mean_sq(score_fake, 1.0)


def _pair_distance(a: Tensor, b: Tensor, what: str) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: paired activations differ in shape, {a.shape} vs {b.shape}")
    return scale(squared_l2(a, b), 1.0 / a.shape[0])


def reg_g(h0_d0: Tensor, h0_d1: Tensor) -> Tensor:
    """Batch mean of per-sample squared distances between first-layer generator
    activations for the two domains."""
    return _pair_distance(h0_d0, h0_d1, "reg_g")


def reg_d(hi_d0: Tensor, hi_d1: Tensor) -> Tensor:
    """Batch mean of per-sample squared distances between last-hidden
    discriminator features of generated pairs (positive; D minimizes it)."""
    return _pair_distance(hi_d0, hi_d1, "reg_d")


def cls_loss(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cls_loss: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.eye(k)[labels]
    return scale(reduce_sum(mul(log_softmax(logits), Tensor(onehot))), -1.0 / logits.shape[0])


@dataclass
class DLossTerms:
    total: Tensor
    gan: float
    reg: float
    cls: Optional[float] = None
    acc: Optional[float] = None


@dataclass
class GLossTerms:
    total: Tensor
    gan: float
    reg: float


def compose_d_loss(variant: str, w: LossWeights, scores: dict, taps: Optional[dict] = None,
                   logits: Optional[Tensor] = None, labels=None) -> DLossTerms:
    """Discriminator objective.

    ``scores`` maps ``real0, real1, fake0, fake1`` to [b x 1] score tensors;
    ``taps`` maps ``fake0, fake1`` to D_hi features of the generated pair.
    ``logits``/``labels`` (source-domain real samples) switch on the
    classification term.
    """
    gan = scale(gan_d_loss(variant, scores["real0"], scores["fake0"])
                + gan_d_loss(variant, scores["real1"], scores["fake1"]), 0.5)
    total = gan
    reg_val = 0.0
    if w.beta > 0:
        if not taps or "fake0" not in taps or "fake1" not in taps:
            raise KeyError("compose_d_loss: D_hi taps of the generated pair are required when beta > 0")
        reg = reg_d(taps["fake0"], taps["fake1"])
        reg_val = reg.item()
        total = total + scale(reg, w.beta)
    elif taps and "fake0" in taps and "fake1" in taps:
        reg_val = reg_d(taps["fake0"].detach(), taps["fake1"].detach()).item()

    cls_val = acc = None
    if logits is not None:
        cls = cls_loss(logits, labels)
        cls_val = cls.item()
        acc = float(np.mean(np.argmax(logits.data, axis=1) == np.asarray(labels)))
        total = total + scale(cls, w.gamma)
    return DLossTerms(total, gan.item(), reg_val, cls_val, acc)


def compose_g_loss(variant: str, w: LossWeights, scores_fake: dict, taps: Optional[dict] = None) -> GLossTerms:
    """Generator objective: mean over both domains of the GAN term plus
    ``lambda * reg_g`` on the first-layer taps ``taps['fake0'/'fake1']``."""
    gan = scale(gan_g_loss(variant, scores_fake["fake0"]) + gan_g_loss(variant, scores_fake["fake1"]), 0.5)
    total = gan
    reg_val = 0.0
    if w.lam > 0:
        if not taps or "fake0" not in taps or "fake1" not in taps:
            raise KeyError("compose_g_loss: G_h0 taps are required when lambda > 0")
        reg = reg_g(taps["fake0"], taps["fake1"])
        reg_val = reg.item()
        total = total + scale(reg, w.lam)
    elif taps and "fake0" in taps and "fake1" in taps:
        reg_val = reg_g(taps["fake0"].detach(), taps["fake1"].detach()).item()
    return GLossTerms(total, gan.item(), reg_val)
