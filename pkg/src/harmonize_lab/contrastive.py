"""Region-wise contrastive objective.

Negatives are patches of the harmonized foreground, positives are patches
of the ground-truth background. Both regions are masked, area-downsampled
into sampling maps, randomly sampled at K locations, cropped into small
patches and embedded by one shared two-layer MLP. The loss pushes the
background query toward its positives against the foreground negatives;
its denominator holds exactly one positive term plus the K negative terms.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DegenerateQueryError, EmptyRegionError, NumericError, ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContrastiveConfig:
    K: int = 256
    tau: float = 0.07
    patch_size: int = 8
    downsample_factor: int = 4
    embed_dim: int = 256
    hidden_dim: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if not self.tau > 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if self.patch_size < 1 or self.downsample_factor < 1:
            raise ConfigError("patch_size and downsample_factor must be >= 1")

    @property
    def patch_dim(self):
        return 3 * self.patch_size**2


@dataclass
class SamplingMap:
    """Masked, downsampled image from which patch locations are drawn."""

    map: torch.Tensor  # (3, H/f, W/f)
    region_mask: torch.Tensor  # (1, H/f, W/f)
    origin: str  # "harmonized_foreground" | "groundtruth_background"


@dataclass
class PatchEmbeddings:
    vectors: torch.Tensor  # (K, embed_dim), unit L2 norm
    role: str  # "positive" | "negative"
    locations: np.ndarray  # (K, 2) row/col on the sampling map


class PatchEmbedder(nn.Module):
    """Shared two-layer MLP mapping flattened patches to unit vectors."""

    def __init__(self, cfg: ContrastiveConfig):
        super().__init__()
        self.in_dim = cfg.patch_dim
        self.mlp = nn.Sequential(
            nn.Linear(self.in_dim, cfg.hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(cfg.hidden_dim, cfg.embed_dim),
        )

    def forward(self, patches):
        flat = patches.reshape(patches.shape[0], -1)
        if flat.shape[1] != self.in_dim:
            raise ShapeError(f"expected patch dim {self.in_dim}, got {flat.shape[1]}")
        return F.normalize(self.mlp(flat), dim=1)


def build_sampling_map(image, mask, cfg, origin="harmonized_foreground"):
    """Area-downsample the masked image and its mask by the config factor."""
    if image.dim() != 3 or mask.dim() != 3:
        raise ShapeError("build_sampling_map expects single (3,H,W) image and (1,H,W) mask")
    h, w = image.shape[-2:]
    f = cfg.downsample_factor
    if h % f != 0 or w % f != 0:
        raise ValueError(f"image size {(h, w)} not divisible by downsample factor {f}")
    if mask.shape[-2:] != (h, w):
        raise ShapeError(f"mask {tuple(mask.shape)} does not match image {tuple(image.shape)}")
    masked = image * mask
    smap = F.adaptive_avg_pool2d(masked.unsqueeze(0), (h // f, w // f)).squeeze(0)
    region = F.adaptive_avg_pool2d(mask.unsqueeze(0), (h // f, w // f)).squeeze(0)
    return SamplingMap(map=smap, region_mask=region, origin=origin)


def sample_patch_locations(smap, cfg, rng):
    """Draw K active-pixel locations, clamped so patch windows stay in-bounds.

    Distinct locations when the region has at least K active pixels,
    otherwise uniform with replacement. Deterministic for a given rng.
    """
    hm, wm = smap.region_mask.shape[-2:]
    p = cfg.patch_size
    if hm < p or wm < p:
        raise ValueError(f"sampling map {(hm, wm)} smaller than patch size {p}")
    region = smap.region_mask.detach().cpu().numpy()[0]
    active = np.argwhere(region >= 0.5)
    if active.shape[0] == 0:
        raise EmptyRegionError(f"no active pixels in {smap.origin} sampling map")
    replace = active.shape[0] < cfg.K
    idx = rng.choice(active.shape[0], size=cfg.K, replace=replace)
    locs = active[idx].copy()
    locs[:, 0] = np.minimum(locs[:, 0], hm - p)
    locs[:, 1] = np.minimum(locs[:, 1], wm - p)
    return locs


def crop_patches(smap, locations, patch_size):
    """Cut the patch window anchored at each (row, col) location."""
    return torch.stack(
        [smap.map[:, r : r + patch_size, c : c + patch_size] for r, c in locations]
    )


def embed_patches(head, patches, role="negative", locations=None):
    """Embed patches with the shared head into unit vectors."""
    vectors = head(patches)
    return PatchEmbeddings(vectors=vectors, role=role, locations=locations)


def region_query(vectors):
    """Unit-normalized mean of a region's patch embeddings."""
    mean = vectors.mean(dim=0)
    norm = mean.norm()
    if float(norm.detach()) < 1e-8:
        raise DegenerateQueryError("patch embeddings cancel; query direction undefined")
    return mean / norm


def _check_loss_inputs(tau, *tensors):
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite input to contrastive loss")


def contrastive_pair_loss(v_bg, v_fg, positives, negatives, tau):
    """Average over positives of -log p(positive | positive + all negatives).

    Positive logits pair the background query with each positive vector;
    negative logits pair the foreground query with each negative vector.
    Each softmax denominator contains exactly one positive term plus the K
    negative terms. Computed in log-sum-exp form.
    """
    _check_loss_inputs(tau, v_bg, v_fg, positives, negatives)
    pos_logits = positives @ v_bg / tau  # (K,)
    neg_logits = negatives @ v_fg / tau  # (K,)
    neg_lse = torch.logsumexp(neg_logits, dim=0)
    return (torch.logaddexp(pos_logits, neg_lse) - pos_logits).mean()


def moco_infonce(q, k_pos, k_negs, tau):
    """Standard InfoNCE with the positive included in the denominator.

    Reference formulation used for differential tests only: a single query
    scores both the positive and every negative key.
    """
    _check_loss_inputs(tau, q, k_pos, k_negs)
    pos_logit = (q @ k_pos / tau).reshape(1)
    if k_negs.numel() == 0:
        return (pos_logit - pos_logit).sum()
    neg_logits = k_negs @ q / tau
    all_logits = torch.cat([pos_logit, neg_logits])
    return torch.logsumexp(all_logits, dim=0) - pos_logit[0]


def harmonization_contrastive_loss(h_batch, gt_batch, masks, head, cfg, rng):
    """Batch-mean region contrastive loss.

    Per sample: foreground sampling map from the harmonized output, background
    sampling map from the ground truth, K patches each, shared embedding,
    mean-embedding queries, then the pair loss. Samples whose regions are
    empty (or whose queries degenerate) are skipped; returns
    ``(loss, skipped_count)`` and a zero loss if every sample was skipped.
    Gradients reach the generator only through the harmonized output.
    """
    if h_batch.dim() != 4 or h_batch.shape[0] == 0:
        raise ValueError("expected a non-empty batch of harmonized images")
    losses = []
    skipped = 0
    for b in range(h_batch.shape[0]):
        try:
            s_fg = build_sampling_map(h_batch[b], masks[b], cfg, origin="harmonized_foreground")
            s_bg = build_sampling_map(
                gt_batch[b], 1.0 - masks[b], cfg, origin="groundtruth_background"
            )
            neg_locs = sample_patch_locations(s_fg, cfg, rng)
            pos_locs = sample_patch_locations(s_bg, cfg, rng)
            negatives = embed_patches(
                head, crop_patches(s_fg, neg_locs, cfg.patch_size), "negative", neg_locs
            ).vectors
            positives = embed_patches(
                head, crop_patches(s_bg, pos_locs, cfg.patch_size), "positive", pos_locs
            ).vectors
            v_fg = region_query(negatives)
            v_bg = region_query(positives)
            losses.append(contrastive_pair_loss(v_bg, v_fg, positives, negatives, cfg.tau))
        except (EmptyRegionError, DegenerateQueryError):
            skipped += 1
    if not losses:
        log.warning("contrastive loss skipped for the whole batch (%d samples)", skipped)
        return h_batch.new_zeros(()), skipped
    return torch.stack(losses).mean(), skipped
