"""Evaluation metrics on the 0-255 scale: MSE, PSNR, SSIM and their
foreground-restricted variants fMSE and fSSIM.

Images are stored in [0, 1]; every metric internally rescales residuals by
255 so reported magnitudes match the 8-bit convention. SSIM is reported
x100. PSNR of identical images is capped at a finite ceiling via an MSE
floor instead of returning infinity.
"""

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.signal import correlate2d

from .errors import EmptyRegionError, ShapeError

log = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0
_MSE_FLOOR = 255.0**2 / 10.0 ** (PSNR_CAP_DB / 10.0)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_C1 = (0.01 * 255.0) ** 2
_C2 = (0.03 * 255.0) ** 2


@dataclass
class MetricReport:
    mse: float
    psnr: float
    ssim: float
    fmse: float | None
    fssim: float | None
    resolution: int

    def to_dict(self):
        return asdict(self)


def _to_chw(img):
    arr = np.asarray(img.detach().cpu() if isinstance(img, torch.Tensor) else img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"expected (C,H,W) image, got shape {arr.shape}")
    return arr


def _pair(h, gt):
    a, b = _to_chw(h), _to_chw(gt)
    if a.shape != b.shape:
        raise ShapeError(f"{a.shape} vs {b.shape}")
    return a, b


def _fg_mask(mask, shape):
    m = _to_chw(mask)[0]
    if m.shape != shape:
        raise ShapeError(f"mask {m.shape} vs image plane {shape}")
    return m >= 0.5


def mse(h, gt):
    """Mean squared error of the 255-scaled residual."""
    a, b = _pair(h, gt)
    return float(np.mean((255.0 * (a - b)) ** 2))


def psnr(h, gt):
    """Peak signal-to-noise ratio in dB, capped for identical images."""
    return float(10.0 * np.log10(255.0**2 / max(mse(h, gt), _MSE_FLOOR)))


def _gaussian_1d(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    return g / g.sum()


def _window_mean(x, g):
    # Separable valid-mode correlation with the normalized Gaussian window.
    return correlate2d(correlate2d(x, g[None, :], mode="valid"), g[:, None], mode="valid")


def _ssim_local_map(x, y):
    """Local SSIM at every position where the full window fits (valid mode)."""
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = _gaussian_1d()
    mu_x = _window_mean(x, g)
    mu_y = _window_mean(y, g)
    var_x = _window_mean(x * x, g) - mu_x**2
    var_y = _window_mean(y * y, g) - mu_y**2
    cov = _window_mean(x * y, g) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + _C1) * (2.0 * cov + _C2)
    den = (mu_x**2 + mu_y**2 + _C1) * (var_x + var_y + _C2)
    return num / den


def _gray255(img):
    return _to_chw(img).mean(axis=0) * 255.0


def ssim(h, gt):
    """Mean local SSIM on the channel-averaged 0-255 image, reported x100."""
    a, b = _pair(h, gt)
    return float(np.mean(_ssim_local_map(a.mean(axis=0) * 255.0, b.mean(axis=0) * 255.0)) * 100.0)


def fmse(h, gt, mask):
    """MSE restricted to pixels with mask >= 0.5."""
    a, b = _pair(h, gt)
    fg = _fg_mask(mask, a.shape[1:])
    if not fg.any():
        raise EmptyRegionError("foreground is empty")
    return float(np.mean((255.0 * (a[:, fg] - b[:, fg])) ** 2))


def fssim(h, gt, mask):
    """Mean of local SSIM values whose window center is a foreground pixel."""
    a, b = _pair(h, gt)
    fg = _fg_mask(mask, a.shape[1:])
    local = _ssim_local_map(a.mean(axis=0) * 255.0, b.mean(axis=0) * 255.0)
    half = SSIM_WINDOW // 2
    centers = fg[half : half + local.shape[0], half : half + local.shape[1]]
    if not centers.any():
        raise EmptyRegionError("no foreground window centers")
    return float(np.mean(local[centers]) * 100.0)


def image_report(h, gt, mask, resolution):
    """Full per-image MetricReport; foreground metrics absent when empty."""
    try:
        f_mse, f_ssim = fmse(h, gt, mask), fssim(h, gt, mask)
    except EmptyRegionError:
        f_mse, f_ssim = None, None
    return MetricReport(
        mse=mse(h, gt),
        psnr=psnr(h, gt),
        ssim=ssim(h, gt),
        fmse=f_mse,
        fssim=f_ssim,
        resolution=resolution,
    )


def _resize(img, size):
    t = img if isinstance(img, torch.Tensor) else torch.as_tensor(img)
    if t.shape[-2:] == (size, size):
        return t
    return F.interpolate(t.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False)[0]


def composite_baseline(composite, mask):
    """Identity model: the composite is returned unharmonized."""
    return composite


def evaluate_dataset(model, samples, resolution):
    """Per-image metrics at the requested resolution plus their mean.

    ``model`` is a callable (composite (1,3,R,R), mask (1,1,R,R)) ->
    harmonized (1,3,R,R). Per-item failures are recorded, not fatal.
    Aggregation averages each metric over the images reporting it (per-image
    PSNR is averaged, not recomputed from pooled MSE).
    """
    records = []
    for sample in samples:
        try:
            comp = _resize(sample.composite, resolution)
            mask = _resize(sample.mask, resolution).clamp(0.0, 1.0)
            target = _resize(sample.target, resolution)
            with torch.no_grad():
                out = model(comp.unsqueeze(0), mask.unsqueeze(0))[0]
            report = image_report(out, target, mask, resolution)
            records.append({"id": sample.id, **report.to_dict()})
        except Exception as exc:  # per-item isolation
            log.warning("evaluation failed for %s: %s", getattr(sample, "id", "?"), exc)
            records.append({"id": getattr(sample, "id", "?"), "error": str(exc)})
    scored = [r for r in records if "error" not in r]
    if not scored:
        raise ValueError("no sample could be evaluated")

    def _mean(key):
        vals = [r[key] for r in scored if r[key] is not None]
        return float(np.mean(vals)) if vals else None

    aggregate = MetricReport(
        mse=_mean("mse"),
        psnr=_mean("psnr"),
        ssim=_mean("ssim"),
        fmse=_mean("fmse"),
        fssim=_mean("fssim"),
        resolution=resolution,
    )
    return records, aggregate


def write_report(path, records, aggregate):
    """JSON-lines report: one record per image, then one aggregate block."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({"kind": "image", **rec}) + "\n")
        fh.write(
            json.dumps({"kind": "aggregate", "count": len(records), **aggregate.to_dict()}) + "\n"
        )


def read_report(path):
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    images = [r for r in rows if r.get("kind") == "image"]
    aggregates = [r for r in rows if r.get("kind") == "aggregate"]
    return images, aggregates[-1] if aggregates else None
