"""Training objective: weighted sum of whole-image L1, foreground L1 and
the region contrastive term."""

from dataclasses import dataclass, field

import torch

from .errors import ConfigError, NumericError, ShapeError


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.4
    lambda2: float = 0.5
    lambda3: float = 0.1

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class LossReport:
    l1: float
    l_pixel: float
    l_hcl: float
    total: float
    skipped_contrastive: int = 0
    # Differentiable total for the backward pass; dropped on serialization.
    total_tensor: torch.Tensor = field(default=None, repr=False, compare=False)

    def to_dict(self):
        return {
            "l1": self.l1,
            "l_pixel": self.l_pixel,
            "l_hcl": self.l_hcl,
            "total": self.total,
            "skipped_contrastive": self.skipped_contrastive,
        }


def l1_whole(h, gt):
    """Mean absolute difference over all pixels and channels."""
    if h.shape != gt.shape:
        raise ShapeError(f"{tuple(h.shape)} vs {tuple(gt.shape)}")
    return (h - gt).abs().mean()


def l_pixel(h, gt, mask):
    """Foreground-weighted mean absolute error.

    Soft-mask weighted numerator, normalized by the masked pixel mass times
    the channel count (floored at one so an empty mask gives zero).
    """
    if h.shape != gt.shape:
        raise ShapeError(f"{tuple(h.shape)} vs {tuple(gt.shape)}")
    if mask.shape[-2:] != h.shape[-2:]:
        raise ShapeError(f"mask {tuple(mask.shape)} vs image {tuple(h.shape)}")
    channels = h.shape[-3]
    num = ((h - gt).abs() * mask).sum()
    den = (mask.sum() * channels).clamp(min=1.0)
    return num / den


def total_loss(h, gt, mask, weights, contrastive_result=None, include_pixel=True):
    """Assemble the full objective and report every component.

    ``contrastive_result`` is ``(loss_tensor, skipped_count)`` or None when
    the term is disabled or degenerate for the whole batch; a disabled term
    contributes zero and no gradient.
    """
    term_l1 = l1_whole(h, gt)
    term_pixel = l_pixel(h, gt, mask) if include_pixel else h.new_zeros(())
    skipped = 0
    if contrastive_result is None:
        term_hcl = h.new_zeros(())
    else:
        term_hcl, skipped = contrastive_result
    for name, term in (("l1", term_l1), ("l_pixel", term_pixel), ("l_hcl", term_hcl)):
        if not torch.isfinite(term):
            raise NumericError(
                f"loss component {name} is non-finite "
                f"(l1={float(term_l1)}, l_pixel={float(term_pixel)}, l_hcl={float(term_hcl)})"
            )
    total = weights.lambda1 * term_l1 + weights.lambda2 * term_pixel + weights.lambda3 * term_hcl
    return LossReport(
        l1=float(term_l1.detach()),
        l_pixel=float(term_pixel.detach()),
        l_hcl=float(term_hcl.detach()),
        total=float(total.detach()),
        skipped_contrastive=skipped,
        total_tensor=total,
    )
