"""Segmentation, self-training and adversarial losses and their weighted sum."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Union

import torch
import torch.nn.functional as F

from .metrics import IGNORE_INDEX

Scalar = Union[torch.Tensor, float]

DEFAULT_LAMBDA = 0.25
DEFAULT_BETA = 0.005


class NonFiniteLossError(FloatingPointError):
    pass


def seg_loss(logits: torch.Tensor, label: torch.Tensor, ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    """Pixel-mean cross-entropy over non-ignored pixels.

    ``logits`` is ``[B, K, H, W]`` (or ``[K, H, W]``) and ``label`` the matching
    index map. A label with every pixel ignored yields 0 and a warning.
    """
    if logits.dim() == 3:
        logits, label = logits.unsqueeze(0), label.unsqueeze(0)
    label = label.long()
    if logits.shape[0] != label.shape[0] or logits.shape[2:] != label.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} and label {tuple(label.shape)} do not align")
    if not (label != ignore_index).any():
        warnings.warn("every pixel is ignored; segmentation loss set to 0", RuntimeWarning, stacklevel=2)
        return logits.sum() * 0.0
    return F.cross_entropy(logits, label, ignore_index=ignore_index, reduction="mean")


def st_loss(logits: torch.Tensor, pseudo) -> torch.Tensor:
    """Cross-entropy against a teacher pseudo-label (a :class:`PseudoLabel` or index map)."""
    labels = getattr(pseudo, "labels", pseudo)
    return seg_loss(logits, labels.detach())


def adversarial_losses(disc_out_real: torch.Tensor, disc_out_fake: torch.Tensor):
    """Returns ``(generator_term, discriminator_term)`` on patch logit maps.

    The discriminator term is the mean BCE of real->1 and fake->0, averaged
    over the two halves. The generator term is the non-saturating BCE of
    fake->1.
    """
    if disc_out_real.shape != disc_out_fake.shape:
        raise ValueError(f"discriminator outputs differ in shape: {tuple(disc_out_real.shape)} vs {tuple(disc_out_fake.shape)}")
    ones = torch.ones_like(disc_out_fake)
    zeros = torch.zeros_like(disc_out_fake)
    d_term = 0.5 * (
        F.binary_cross_entropy_with_logits(disc_out_real, ones)
        + F.binary_cross_entropy_with_logits(disc_out_fake, zeros)
    )
    g_term = F.binary_cross_entropy_with_logits(disc_out_fake, ones)
    return g_term, d_term


def generator_loss(disc_out_fake: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(disc_out_fake, torch.ones_like(disc_out_fake))


def discriminator_loss(disc_out_real: torch.Tensor, disc_out_fake: torch.Tensor) -> torch.Tensor:
    return adversarial_losses(disc_out_real, disc_out_fake)[1]


_PARTS = ("seg_S", "seg_T", "st_S", "st_T", "adv_S", "adv_T", "disc_S", "disc_T")


@dataclass
class LossBundle:
    seg_S: Scalar = 0.0
    seg_T: Scalar = 0.0
    st_S: Scalar = 0.0
    st_T: Scalar = 0.0
    adv_S: Scalar = 0.0
    adv_T: Scalar = 0.0
    disc_S: Scalar = 0.0
    disc_T: Scalar = 0.0
    combined: Scalar = 0.0
    lam: float = DEFAULT_LAMBDA
    beta: float = DEFAULT_BETA

    def record(self) -> dict:
        """Detached float copy of every term, for logging."""
        out = {}
        for name in _PARTS + ("combined",):
            v = getattr(self, name)
            out[name] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        return out


def combine(parts: dict, lam: float = DEFAULT_LAMBDA, beta: float = DEFAULT_BETA) -> LossBundle:
    """``(seg_S + seg_T) + lam * (st_S + st_T) + beta * (adv_S + adv_T)``.

    Discriminator terms are carried for logging but not summed. Missing parts
    count as 0. Raises :class:`NonFiniteLossError` naming the offending terms.
    """
    unknown = set(parts) - set(_PARTS)
    if unknown:
        raise KeyError(f"unknown loss parts: {sorted(unknown)}")
    values = {name: parts.get(name, 0.0) for name in _PARTS}
    nums = {n: float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for n, v in values.items()}
    bad = [n for n, v in nums.items() if not math.isfinite(v)]
    if bad:
        diag = ", ".join(f"{n}={nums[n]}" for n in _PARTS)
        raise NonFiniteLossError(f"non-finite loss terms {bad}: {diag}")
    combined = (
        (values["seg_S"] + values["seg_T"])
        + lam * (values["st_S"] + values["st_T"])
        + beta * (values["adv_S"] + values["adv_T"])
    )
    return LossBundle(**values, combined=combined, lam=lam, beta=beta)

