"""Background-guided style fusion applied to decoder features.

Each decoder stage splits its feature map into foreground and background
branches using the rescaled composite mask. The foreground branch is
standardized with background statistics taken from the *encoder* feature of
the same stage (external guidance); the background branch is standardized
with its own statistics. Both branches then pass through a learned
per-channel re-weighting and are stitched back together on their disjoint
supports.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EmptyRegionError, ShapeError

STD_EPS = 1e-5


@dataclass
class RegionStats:
    """Per-channel mean/std of a feature map over a masked region."""

    mean: torch.Tensor  # (B, C)
    std: torch.Tensor  # (B, C), floored at eps
    eps: float
    pixel_count: torch.Tensor  # (B,)


def _as_batched(x, channels_dim=3):
    if x.dim() == channels_dim:
        return x.unsqueeze(0), True
    if x.dim() == channels_dim + 1:
        return x, False
    raise ShapeError(f"expected {channels_dim}-D or {channels_dim + 1}-D tensor, got {x.dim()}-D")


def binarize_mask(mask):
    """Hard region membership: 1 where mask >= 0.5, else 0."""
    return (mask >= 0.5).to(mask.dtype)


def rescale_mask(mask, target):
    """Area-interpolate a soft mask down to ``target`` (h, w).

    Block averaging preserves the [0, 1] range and, for integer ratios,
    equals the mean of each source block.
    """
    h, w = target
    if h < 1 or w < 1:
        raise ValueError(f"target size must be positive, got {target}")
    m, squeeze = _as_batched(mask)
    if h > m.shape[-2] or w > m.shape[-1]:
        raise ValueError(f"can only rescale down: {tuple(m.shape[-2:])} -> {target}")
    out = F.adaptive_avg_pool2d(m, (h, w))
    return out.squeeze(0) if squeeze else out


def _masked_stats(feature, active, eps):
    """Mean/std over active pixels; empty rows give mean 0, std eps.

    Safe for autograd even on empty regions (no 0/0, no sqrt(0)).
    """
    count = active.sum(dim=(2, 3))  # (B, 1)
    denom = count.clamp(min=1.0)
    mean = (feature * active).sum(dim=(2, 3)) / denom
    centered = (feature - mean.unsqueeze(-1).unsqueeze(-1)) * active
    var = centered.pow(2).sum(dim=(2, 3)) / denom
    std = torch.sqrt(var.clamp(min=eps * eps))
    return mean, std, count.squeeze(1)


def region_stats(feature, mask, eps=STD_EPS):
    """Per-channel statistics of ``feature`` over pixels with mask >= 0.5.

    ``feature`` is typically an already mask-multiplied map; membership is
    decided by the hard-thresholded mask, the values are used as given.
    Raises EmptyRegionError when any sample has no active pixel.
    """
    f, squeeze = _as_batched(feature)
    m, _ = _as_batched(mask)
    if m.shape[-2:] != f.shape[-2:]:
        raise ShapeError(f"mask {tuple(m.shape)} does not match feature {tuple(f.shape)}")
    active = binarize_mask(m)
    mean, std, count = _masked_stats(f, active, eps)
    if (count < 1).any():
        raise EmptyRegionError("region has no pixels with mask >= 0.5")
    return RegionStats(mean=mean, std=std, eps=eps, pixel_count=count)


def normalize_phi(feature_region, stats, active=None):
    """Standardize a masked feature branch: (x - mean) / std on active pixels.

    Pixels outside ``active`` are zeroed; with ``active=None`` the whole map
    is treated as active.
    """
    f, squeeze = _as_batched(feature_region)
    mean = stats.mean.unsqueeze(-1).unsqueeze(-1)
    std = stats.std.unsqueeze(-1).unsqueeze(-1)
    out = (f - mean) / std
    if active is not None:
        a, _ = _as_batched(active)
        out = out * a
    return out.squeeze(0) if squeeze else out


class FusionHeads(nn.Module):
    """Per-channel scale/bias heads conditioned on the pooled branch feature.

    Both heads are zero-initialized so the fusion starts as the identity.
    """

    def __init__(self, channels, stage=0):
        super().__init__()
        self.stage = stage
        self.scale_head = nn.Linear(channels, channels)
        self.bias_head = nn.Linear(channels, channels)
        for head in (self.scale_head, self.bias_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, pooled):
        return self.scale_head(pooled), self.bias_head(pooled)


def fuse_psi(normalized, heads, active=None):
    """Re-weight a standardized branch: x * (1 + s(x)) + b(x).

    ``s`` and ``b`` are per-channel outputs of the heads applied to the
    globally pooled branch (pooled over active pixels when a mask is given).
    Zero-initialized heads make this the identity. When ``active`` is given
    the output is restricted to the active support.
    """
    x, squeeze = _as_batched(normalized)
    if active is not None:
        a, _ = _as_batched(active)
        count = a.sum(dim=(2, 3)).clamp(min=1.0)
        pooled = (x * a).sum(dim=(2, 3)) / count
    else:
        a = None
        pooled = x.mean(dim=(2, 3))
    scale, bias = heads(pooled)
    out = x * (1.0 + scale.unsqueeze(-1).unsqueeze(-1)) + bias.unsqueeze(-1).unsqueeze(-1)
    if a is not None:
        out = out * a
    return out.squeeze(0) if squeeze else out


class StyleFusionLayer(nn.Module):
    """One decoder-stage fusion of external background style guidance.

    forward(dec, enc, mask) with dec/enc of equal shape (B, C, h, w) and a
    soft mask (B, 1, h, w) already rescaled to (h, w). A branch whose region
    is empty at this scale (or whose reference statistics are unavailable)
    passes its soft masked product through unchanged.
    """

    def __init__(self, channels, stage=0, eps=STD_EPS):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.heads = FusionHeads(channels, stage=stage)

    def forward(self, dec, enc, mask):
        d, squeeze = _as_batched(dec)
        e, _ = _as_batched(enc)
        m, _ = _as_batched(mask)
        if d.shape != e.shape:
            raise ShapeError(f"decoder {tuple(d.shape)} vs encoder {tuple(e.shape)}")
        if m.shape[-2:] != d.shape[-2:] or m.shape[1] != 1:
            raise ShapeError(f"mask {tuple(m.shape)} does not match features {tuple(d.shape)}")

        fg_bin = binarize_mask(m)
        bg_bin = 1.0 - fg_bin
        d_fg = d * m
        d_bg = d * (1.0 - m)
        e_bg = e * (1.0 - m)

        e_mean, e_std, bg_count = _masked_stats(e_bg, bg_bin, self.eps)
        d_mean, d_std, _ = _masked_stats(d_bg, bg_bin, self.eps)
        fg_count = fg_bin.sum(dim=(2, 3)).squeeze(1)

        fg_stats = RegionStats(e_mean, e_std, self.eps, bg_count)
        bg_stats = RegionStats(d_mean, d_std, self.eps, bg_count)
        fg_fused = fuse_psi(normalize_phi(d_fg, fg_stats, fg_bin), self.heads, fg_bin)
        bg_fused = fuse_psi(normalize_phi(d_bg, bg_stats, bg_bin), self.heads, bg_bin)

        # The foreground branch borrows encoder-background statistics, so it
        # needs both regions populated; the background branch only itself.
        fg_ok = ((fg_count > 0) & (bg_count > 0)).view(-1, 1, 1, 1)
        bg_ok = (bg_count > 0).view(-1, 1, 1, 1)
        out = torch.where(fg_ok, fg_fused, d_fg) + torch.where(bg_ok, bg_fused, d_bg)
        return out.squeeze(0) if squeeze else out


def style_fusion_layer(dec, enc, mask, layer):
    """Functional alias for StyleFusionLayer.forward."""
    return layer(dec, enc, mask)
