"""Training losses: multi-class cross-entropy, mixup construction and its
interpolated loss, and the adversarial / discriminator pair.

Mixup mixes only the images; the integer label maps are never interpolated.
The labels enter through the loss instead, as a lambda-weighted sum of the
cross-entropy against each member of the pair. The discriminator labels are
fixed: source domain <-> 0, target domain <-> 1, and the adversarial term
pushes target-domain predictions toward the source label 0. Binary
cross-entropy is evaluated from raw logits in the numerically stable form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .networks import DomainDiscriminator, PredictionBatch


@dataclass
class LabeledBatch:
    images: torch.Tensor  # (batch, 1, rows, cols)
    targets: torch.Tensor  # (batch, rows, cols) integer labels

    def __post_init__(self):
        if self.images.dim() != 4 or self.targets.dim() != 3:
            raise ShapeError(f"bad batch shapes {tuple(self.images.shape)}, {tuple(self.targets.shape)}")
        if self.images.shape[0] != self.targets.shape[0] or self.images.shape[2:] != self.targets.shape[1:]:
            raise ShapeError("image/target shapes inconsistent")


@dataclass
class UnlabeledBatch:
    images: torch.Tensor

    def __post_init__(self):
        if self.images.dim() != 4:
            raise ShapeError(f"expected 4D images, got {tuple(self.images.shape)}")
        if not torch.isfinite(self.images).all():
            raise ShapeError("unlabeled batch contains non-finite values")


@dataclass
class MixupDraw:
    lam: float
    permutation: torch.Tensor
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        perm = self.permutation
        if sorted(perm.tolist()) != list(range(len(perm))):
            raise ConfigError("permutation is not a bijection of the batch indices")


@dataclass(frozen=True)
class UdaLossWeights:
    gamma_segm: float = 1.0
    gamma_adv: float = 1e-3
    aux_gamma_segm: float = 1e-1
    aux_gamma_adv: float = 2e-4

    def __post_init__(self):
        if min(self.gamma_segm, self.gamma_adv, self.aux_gamma_segm, self.aux_gamma_adv) < 0:
            raise ConfigError("loss weights must be nonnegative")


def _probs(predictions: Union[PredictionBatch, torch.Tensor]) -> torch.Tensor:
    return predictions.probabilities if isinstance(predictions, PredictionBatch) else predictions


def mce_loss(predictions: Union[PredictionBatch, torch.Tensor], targets: torch.Tensor) -> torch.Tensor:
    """Mean over batch and pixels of -log p(true class)."""
    p = _probs(predictions)
    if p.dim() != 4 or targets.dim() != 3 or p.shape[0] != targets.shape[0] or p.shape[2:] != targets.shape[1:]:
        raise ShapeError(f"prediction {tuple(p.shape)} vs targets {tuple(targets.shape)}")
    picked = p.gather(1, targets.long().unsqueeze(1)).squeeze(1)
    return -torch.log(picked).mean()


def make_mixup(
    images: torch.Tensor, alpha: float, rng: np.random.Generator, lam_override: Optional[float] = None
) -> tuple[torch.Tensor, MixupDraw]:
    """Mix each image with a permuted partner: lam*X + (1-lam)*X[perm].

    One lambda ~ Beta(alpha, alpha) per batch. `lam_override` pins lambda
    (the permutation is still drawn, keeping the stream aligned).
    """
    if alpha <= 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    if images.dim() != 4 or images.shape[0] < 1:
        raise ShapeError(f"expected a nonempty 4D batch, got {tuple(images.shape)}")
    lam = float(rng.beta(alpha, alpha))
    perm = torch.from_numpy(rng.permutation(images.shape[0]))
    if lam_override is not None:
        lam = float(lam_override)
    mixed = lam * images + (1.0 - lam) * images[perm]
    return mixed, MixupDraw(lam=lam, permutation=perm, alpha=alpha)


def mixup_loss(
    predictions: Union[PredictionBatch, torch.Tensor], targets: torch.Tensor, draw: MixupDraw
) -> torch.Tensor:
    """lam * MCE(pred, Y) + (1 - lam) * MCE(pred, Y[perm])."""
    if len(draw.permutation) != targets.shape[0]:
        raise ShapeError("mixup draw is inconsistent with the batch size")
    return draw.lam * mce_loss(predictions, targets) + (1.0 - draw.lam) * mce_loss(
        predictions, targets[draw.permutation]
    )


def _bce_with_constant_target(logits: torch.Tensor, target_value: float) -> torch.Tensor:
    target = torch.full_like(logits, target_value)
    return F.binary_cross_entropy_with_logits(logits, target)


def adv_loss(
    discriminator: DomainDiscriminator, predictions_target: Union[PredictionBatch, torch.Tensor]
) -> torch.Tensor:
    """BCE(0, D(S(target))): drives target-domain predictions toward the
    source label."""
    logits = discriminator(_probs(predictions_target))
    return _bce_with_constant_target(logits, 0.0)


def discr_loss(
    discriminator: DomainDiscriminator,
    predictions_source: Union[PredictionBatch, torch.Tensor],
    predictions_target: Union[PredictionBatch, torch.Tensor],
) -> torch.Tensor:
    """BCE(0, D(source predictions)) + BCE(1, D(target predictions))."""
    src_logits = discriminator(_probs(predictions_source))
    tgt_logits = discriminator(_probs(predictions_target))
    return _bce_with_constant_target(src_logits, 0.0) + _bce_with_constant_target(tgt_logits, 1.0)


def segmenter_criterion(
    l_segm: torch.Tensor,
    l_adv: Optional[torch.Tensor],
    weights: UdaLossWeights,
    aux_l_segm: Optional[torch.Tensor] = None,
    aux_l_adv: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Weighted sum of the segmentation and adversarial terms; the auxiliary
    pair must be given together (two-level adaptation) or not at all."""
    if (aux_l_segm is None) != (aux_l_adv is None):
        raise ConfigError("auxiliary loss terms must be supplied together")
    total = weights.gamma_segm * l_segm
    if l_adv is not None:
        total = total + weights.gamma_adv * l_adv
    if aux_l_segm is not None:
        total = total + weights.aux_gamma_segm * aux_l_segm + weights.aux_gamma_adv * aux_l_adv
    return total
