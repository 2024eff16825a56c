"""Built-in verification suite runnable from the CLI.

Each check pits an implementation against an independent route: scalar
loop oracles for the losses, central finite differences for gradients,
closed forms for the metrics, and the layer table for shapes.
"""

import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import metrics
from .contrastive import (
    ContrastiveConfig,
    PatchEmbedder,
    build_sampling_map,
    contrastive_pair_loss,
    moco_infonce,
    sample_patch_locations,
)
from .errors import ConfigError, EmptyRegionError
from .model import NetworkConfig, build_network
from .objectives import l_pixel
from .style_fusion import FusionHeads, StyleFusionLayer, fuse_psi, normalize_phi, region_stats


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def central_difference_grad(fn, x, h=1e-5):
    """Elementwise central finite differences of a scalar function."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn(x))
            flat[i] = orig - h
            down = float(fn(x))
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_relative_grad_error(fn, x, h=1e-5):
    """Compare autograd against central differences; scale-aware error."""
    xg = x.detach().clone().requires_grad_(True)
    fn(xg).backward()
    analytic = xg.grad
    numeric = central_difference_grad(fn, x, h)
    denom = torch.maximum(
        torch.maximum(analytic.abs(), numeric.abs()), torch.ones_like(analytic)
    )
    return float(((analytic - numeric).abs() / denom).max())


def _loop_pair_loss(v_bg, v_fg, pos, neg, tau):
    """Direct scalar evaluation of the region pair loss."""
    k = len(pos)
    total = 0.0
    neg_sum = sum(math.exp(sum(a * b for a, b in zip(v_fg, n)) / tau) for n in neg)
    for p in pos:
        p_term = math.exp(sum(a * b for a, b in zip(v_bg, p)) / tau)
        total += -math.log(p_term / (p_term + neg_sum))
    return total / k


def _loop_moco(q, k_pos, k_negs, tau):
    num = math.exp(sum(a * b for a, b in zip(q, k_pos)) / tau)
    den = num + sum(math.exp(sum(a * b for a, b in zip(q, n)) / tau) for n in k_negs)
    return -math.log(num / den)


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def check_pair_loss_oracle(n_instances=25, rng=None):
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for _ in range(n_instances):
        k = int(rng.integers(1, 9))
        d = int(rng.integers(2, 6))
        tau = float(rng.uniform(0.2, 2.0))
        v_bg, v_fg = _unit(rng, d), _unit(rng, d)
        pos = np.stack([_unit(rng, d) for _ in range(k)])
        neg = np.stack([_unit(rng, d) for _ in range(k)])
        ours = float(
            contrastive_pair_loss(
                torch.from_numpy(v_bg), torch.from_numpy(v_fg),
                torch.from_numpy(pos), torch.from_numpy(neg), tau,
            )
        )
        ref = _loop_pair_loss(v_bg, v_fg, pos, neg, tau)
        worst = max(worst, abs(ours - ref) / max(abs(ref), 1e-300))
    return CheckResult("pair-loss-oracle", worst <= 1e-10, f"max rel err {worst:.2e}")


def check_moco_oracle(n_instances=25, rng=None):
    rng = rng or np.random.default_rng(1)
    worst = 0.0
    for _ in range(n_instances):
        k = int(rng.integers(0, 9))
        d = int(rng.integers(2, 6))
        tau = float(rng.uniform(0.2, 2.0))
        q, k_pos = _unit(rng, d), _unit(rng, d)
        negs = np.stack([_unit(rng, d) for _ in range(k)]) if k else np.zeros((0, d))
        ours = float(
            moco_infonce(torch.from_numpy(q), torch.from_numpy(k_pos), torch.from_numpy(negs), tau)
        )
        ref = _loop_moco(q, k_pos, negs, tau)
        worst = max(worst, abs(ours - ref) / max(abs(ref), 1.0))
    return CheckResult("moco-oracle", worst <= 1e-10, f"max rel err {worst:.2e}")


def check_uniform_logits():
    worst = 0.0
    for k in (1, 2, 256):
        d = 4
        v = torch.zeros(d, dtype=torch.float64)
        v[0] = 1.0
        orth = torch.zeros(d, dtype=torch.float64)
        orth[1] = 1.0  # every dot product is exactly zero
        pos = orth.repeat(k, 1)
        neg = orth.repeat(k, 1)
        ours = float(contrastive_pair_loss(v, v, pos, neg, 0.07))
        moco = float(moco_infonce(v, orth, neg, 0.07))
        worst = max(worst, abs(ours - math.log(1 + k)), abs(moco - math.log(1 + k)))
    return CheckResult("uniform-logits", worst <= 1e-12, f"max abs err {worst:.2e}")


def _gradient_cases(rng):
    heads = FusionHeads(2).double()
    with torch.no_grad():
        for p in heads.parameters():
            p.copy_(torch.from_numpy(rng.uniform(-0.3, 0.3, size=p.shape)))
    layer = StyleFusionLayer(2).double()
    with torch.no_grad():
        for p in layer.parameters():
            p.copy_(torch.from_numpy(rng.uniform(-0.3, 0.3, size=p.shape)))
    mask = torch.from_numpy((rng.random((1, 4, 4)) > 0.5).astype(np.float64))
    if float(mask.sum()) in (0.0, 16.0):
        mask[0, 0, 0] = 1.0
        mask[0, 3, 3] = 0.0
    feat = torch.from_numpy(rng.standard_normal((2, 4, 4)))
    enc = torch.from_numpy(rng.standard_normal((2, 4, 4)))

    def phi_fn(x):
        return normalize_phi(x, region_stats(x, torch.ones(1, 4, 4, dtype=torch.float64))).sum()

    def psi_fn(x):
        return fuse_psi(x, heads).pow(2).sum()

    def fusion_fn(x):
        return layer(x, enc, mask).pow(2).sum()

    k = 3
    pos = torch.from_numpy(np.stack([_unit(rng, 4) for _ in range(k)]))
    neg_base = torch.from_numpy(np.stack([_unit(rng, 4) for _ in range(k)]))
    v_bg = torch.from_numpy(_unit(rng, 4))
    v_fg = torch.from_numpy(_unit(rng, 4))

    def pair_fn(x):
        return contrastive_pair_loss(v_bg, v_fg, pos, x, 0.5)

    gt = torch.from_numpy(rng.random((3, 4, 4)))
    lmask = torch.from_numpy(rng.random((1, 4, 4)))

    def lpixel_fn(x):
        return l_pixel(x, gt, lmask)

    return [
        ("phi", phi_fn, feat),
        ("psi", psi_fn, feat),
        ("style-fusion", fusion_fn, feat),
        ("pair-loss", pair_fn, neg_base),
        ("l-pixel", lpixel_fn, gt + 0.1 * torch.from_numpy(rng.standard_normal((3, 4, 4)))),
    ]


def check_gradients(n_instances=3, tol=1e-3, rng=None):
    rng = rng or np.random.default_rng(2)
    worst = {}
    for _ in range(n_instances):
        for name, fn, x in _gradient_cases(rng):
            err = max_relative_grad_error(fn, x)
            worst[name] = max(worst.get(name, 0.0), err)
    bad = {k: v for k, v in worst.items() if v > tol}
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    return CheckResult("gradient-checks", not bad, detail)


def check_shape_conformance():
    cfg = NetworkConfig(base_width=8, stages=2, interlayer_width=32, image_size=64)
    net = build_network(cfg)
    net.eval()
    pyramid, bottleneck = net.encode(torch.rand(1, 3, 64, 64), torch.rand(1, 1, 64, 64))
    ok = pyramid.shapes() == [(1, 16, 32, 32), (1, 8, 64, 64)]
    ok = ok and tuple(bottleneck.shape) == (1, 32, 16, 16)
    paper = build_network(NetworkConfig())
    count = paper.parameter_count()
    ok = ok and abs(count - 28.37e6) / 28.37e6 <= 0.15
    return CheckResult("shape-conformance", ok, f"{count / 1e6:.2f}M params")


def check_metric_identities():
    rng = np.random.default_rng(3)
    img = rng.random((3, 16, 16))
    issues = []
    if metrics.mse(img, img) != 0.0:
        issues.append("mse(x,x) != 0")
    if metrics.psnr(img, img) != metrics.PSNR_CAP_DB:
        issues.append("psnr cap")
    if abs(metrics.ssim(img, img) - 100.0) > 1e-9:
        issues.append("ssim(x,x) != 100")
    shifted = np.zeros((3, 16, 16))
    base = shifted + 16.0 / 255.0
    if metrics.mse(base, shifted) != 256.0:
        issues.append("uniform residual mse != 256")
    if abs(metrics.psnr(base, shifted) - 10 * math.log10(255.0**2 / 256.0)) > 1e-9:
        issues.append("psnr closed form")
    full = np.ones((1, 16, 16))
    if metrics.fmse(img, shifted, full) != metrics.mse(img, shifted):
        issues.append("full-mask fmse != mse")
    return CheckResult("metric-identities", not issues, "; ".join(issues) or "all identities hold")


def check_temperature_validation(cfg=None):
    cfg = cfg or ContrastiveConfig()
    if not cfg.tau > 0:
        return CheckResult("temperature-validation", False, f"config tau={cfg.tau} is not positive")
    v = torch.zeros(2, dtype=torch.float64)
    try:
        contrastive_pair_loss(v, v, v.repeat(1, 1), v.repeat(1, 1), -1.0)
        return CheckResult("temperature-validation", False, "negative tau was accepted")
    except ConfigError:
        pass
    try:
        ContrastiveConfig(tau=0.0)
        return CheckResult("temperature-validation", False, "tau=0 config was accepted")
    except ConfigError:
        return CheckResult("temperature-validation", True, "tau > 0 enforced")


def check_sampling_contract(cfg=None):
    cfg = cfg or ContrastiveConfig(K=16, patch_size=4, downsample_factor=2, embed_dim=32, hidden_dim=32)
    rng = np.random.default_rng(4)
    torch.manual_seed(4)
    head = PatchEmbedder(cfg)
    image = torch.rand(3, 64, 64)
    mask = torch.zeros(1, 64, 64)
    mask[:, 8:40, 8:40] = 1.0
    smap = build_sampling_map(image, mask, cfg)
    locs = sample_patch_locations(smap, cfg, rng)
    issues = []
    if locs.shape != (cfg.K, 2):
        issues.append(f"got {locs.shape[0]} locations")
    hm, wm = smap.map.shape[-2:]
    if (locs[:, 0] > hm - cfg.patch_size).any() or (locs[:, 1] > wm - cfg.patch_size).any():
        issues.append("window out of bounds")
    from .contrastive import crop_patches

    vectors = head(crop_patches(smap, locs, cfg.patch_size))
    if (vectors.norm(dim=1) - 1.0).abs().max() > 1e-5:
        issues.append("embedding norms off unit")
    try:
        sample_patch_locations(build_sampling_map(image, torch.zeros(1, 64, 64), cfg), cfg, rng)
        issues.append("empty region not signalled")
    except EmptyRegionError:
        pass
    return CheckResult("sampling-contract", not issues, "; ".join(issues) or "ok")


def run_selftest(contrastive_cfg=None):
    """Run every check; returns the list of CheckResults."""
    started = time.time()
    results = [
        check_pair_loss_oracle(),
        check_moco_oracle(),
        check_uniform_logits(),
        check_gradients(),
        check_shape_conformance(),
        check_metric_identities(),
        check_temperature_validation(contrastive_cfg),
        check_sampling_contract(),
    ]
    results.append(
        CheckResult("runtime", True, f"{time.time() - started:.1f}s")
    )
    return results


def format_results(results):
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name.ljust(width)}  {status}  {r.detail}")
    return "\n".join(lines)
