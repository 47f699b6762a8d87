"""Adversarial, reconstruction and water-constraint losses."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np

from ..autodiff import functional as F
from ..autodiff.tensor import Tensor, as_tensor
from ..exceptions import NumericError, ValidationError

OVERLAP_THRESHOLD = 0.5


@dataclass(frozen=True)
class LossReport:
    cgan_d: float
    cgan_g: float
    l1: float
    constr: float
    overlap_rate: float

    def as_dict(self) -> dict:
        return asdict(self)


def overlap_rate(built: np.ndarray, water: np.ndarray, threshold: float = OVERLAP_THRESHOLD) -> float:
    """Fraction of all pixels that are both built (> threshold) and water."""
    built = np.asarray(built)
    water = np.asarray(water)
    if built.shape != water.shape:
        raise ValidationError(f"shape mismatch {built.shape} vs {water.shape}")
    return float(np.mean((built > threshold) & (water > 0.5)))


def constraint_penalty(built, water, alpha: float) -> Tuple[Tensor, float]:
    """Soft water constraint ``alpha * mean(built * water)`` and the hard overlap rate.

    ``built`` may be a Tensor (the loss is then differentiable in it); ``water``
    is a constant binary mask of the same shape.
    """
    built = as_tensor(built)
    water = np.asarray(water.data if isinstance(water, Tensor) else water)
    if built.shape != water.shape:
        raise ValidationError(f"shape mismatch {built.shape} vs {water.shape}")
    if alpha < 0:
        raise ValidationError("alpha must be >= 0")
    loss = F.scale(F.mean(F.mul(built, water.astype(built.dtype))), alpha)
    return loss, overlap_rate(built.data, water)


def discriminator_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """Real patches labelled 1, generated patches labelled 0, averaged."""
    return F.scale(F.add(F.bce_with_logits(d_real, 1.0), F.bce_with_logits(d_fake, 0.0)), 0.5)


def generator_loss(d_fake: Tensor, real_built, fake_built: Tensor, water, l1_weight: float,
                   alpha: float) -> Tuple[Tensor, dict]:
    """Adversarial term (fake labelled 1) + l1_weight * L1 + water constraint."""
    if l1_weight < 0:
        raise ValidationError("l1_weight must be >= 0")
    adv = F.bce_with_logits(d_fake, 1.0)
    l1 = F.l1_loss(fake_built, as_tensor(real_built))
    constr, overlap = constraint_penalty(fake_built, water, alpha)
    total = F.add(F.add(adv, F.scale(l1, l1_weight)), constr)
    parts = {"cgan_g": float(adv.data), "l1": float(l1.data), "constr": float(constr.data),
             "overlap_rate": overlap}
    return total, parts


def composite_loss(d_real: Tensor, d_fake: Tensor, real_built, fake_built: Tensor, water,
                   l1_weight: float, alpha: float) -> Tuple[Tensor, Tensor, LossReport]:
    """Both players' objectives from one set of discriminator outputs.

    Returns ``(d_total, g_total, report)``. During training the D objective is
    evaluated on a detached generator output and the G objective is re-evaluated
    after the D update; this helper is for evaluation and tests.
    """
    d_total = discriminator_loss(d_real, d_fake)
    g_total, parts = generator_loss(d_fake, real_built, fake_built, water, l1_weight, alpha)
    report = LossReport(cgan_d=float(d_total.data), **parts)
    check_finite(report)
    return d_total, g_total, report


def check_finite(report: LossReport) -> None:
    bad = [k for k, v in report.as_dict().items() if not math.isfinite(v)]
    if bad:
        raise NumericError(f"non-finite loss components: {', '.join(bad)} ({report})")
