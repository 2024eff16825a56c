"""Dataset ingestion and the procedural toy dataset.

Real datasets follow the composite_images/ masks/ real_images/ layout where
a composite named ``name_maskid_variantid.ext`` resolves to mask
``name_maskid.png`` and target ``name.ext``. The toy generator renders
smooth backgrounds, cuts a rectangle or ellipse foreground and perturbs the
foreground colors, writing lossless files in the same layout.
"""

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ManifestError

COMPOSITE_DIR = "composite_images"
MASK_DIR = "masks"
TARGET_DIR = "real_images"

CROP_CANVAS_RATIO = 1.125
FLIP_PROBABILITY = 0.5


@dataclass
class Sample:
    composite: torch.Tensor  # (3, H, W) in [0, 1]
    mask: torch.Tensor  # (1, H, W) in [0, 1]
    target: torch.Tensor  # (3, H, W) in [0, 1]
    id: str


@dataclass
class ManifestEntry:
    composite: Path
    mask: Path
    target: Path
    id: str


@dataclass
class DatasetManifest:
    root: Path
    split: str
    entries: list[ManifestEntry] = field(default_factory=list)
    subset: str = ""

    def __len__(self):
        return len(self.entries)


def resolve_triplet(composite_filename):
    """Map a composite filename to its (mask, target) filenames.

    Strips one underscore-delimited suffix for the mask (always .png) and
    two for the target (same extension as the composite).
    """
    stem, ext = os.path.splitext(composite_filename)
    parts = stem.split("_")
    if len(parts) < 3:
        raise ManifestError(
            f"composite name {composite_filename!r} is not of the form name_maskid_variantid.ext"
        )
    mask_name = "_".join(parts[:-1]) + ".png"
    target_name = "_".join(parts[:-2]) + ext
    return mask_name, target_name


def build_manifest(root, split="train", subset=""):
    """Resolve every composite under the root into an existing triplet.

    Uses the ``<split>.txt`` file list when present, otherwise all files in
    composite_images/. Missing files fail fast with every offender listed.
    """
    root = Path(root)
    comp_dir = root / COMPOSITE_DIR
    if not comp_dir.is_dir():
        raise ManifestError(f"missing {comp_dir}")
    split_file = root / f"{split}.txt"
    if split_file.exists():
        names = [line.strip() for line in split_file.read_text().splitlines() if line.strip()]
    else:
        names = sorted(p.name for p in comp_dir.iterdir() if p.suffix.lower() in (".jpg", ".jpeg", ".png"))
    entries, problems = [], []
    for name in names:
        try:
            mask_name, target_name = resolve_triplet(name)
        except ManifestError as exc:
            problems.append(str(exc))
            continue
        entry = ManifestEntry(
            composite=comp_dir / name,
            mask=root / MASK_DIR / mask_name,
            target=root / TARGET_DIR / target_name,
            id=os.path.splitext(name)[0],
        )
        missing = [str(p) for p in (entry.composite, entry.mask, entry.target) if not p.exists()]
        if missing:
            problems.append(f"{name}: missing {', '.join(missing)}")
        else:
            entries.append(entry)
    if problems:
        raise ManifestError(f"{len(problems)} unresolved triplets: " + "; ".join(problems[:10]))
    return DatasetManifest(root=root, split=split, entries=entries, subset=subset)


def save_manifest(manifest, path):
    payload = {
        "root": str(manifest.root),
        "split": manifest.split,
        "subset": manifest.subset,
        "entries": [
            {"composite": str(e.composite), "mask": str(e.mask), "target": str(e.target), "id": e.id}
            for e in manifest.entries
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_manifest(path):
    payload = json.loads(Path(path).read_text())
    entries = [
        ManifestEntry(Path(e["composite"]), Path(e["mask"]), Path(e["target"]), e["id"])
        for e in payload["entries"]
    ]
    return DatasetManifest(
        root=Path(payload["root"]), split=payload["split"], entries=entries, subset=payload["subset"]
    )


def _load_image(path, gray=False):
    try:
        with Image.open(path) as img:
            img = img.convert("L" if gray else "RGB")
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except Exception as exc:
        raise ManifestError(f"failed to decode {path}: {exc}") from exc
    if gray:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(arr.copy())


def load_triplet(entry):
    """Raw triplet at native resolution, no augmentation."""
    return Sample(
        composite=_load_image(entry.composite),
        mask=_load_image(entry.mask, gray=True),
        target=_load_image(entry.target),
        id=entry.id,
    )


def _resize(t, size):
    return F.interpolate(t.unsqueeze(0), size=size, mode="bilinear", align_corners=False)[0]


def load_and_augment(entry, train_mode, image_size, rng):
    """Load a triplet and apply one shared geometric transform.

    Resizes to a slightly larger canvas, then random crop + random flip in
    train mode or center crop in eval mode. The mask stays soft after the
    bilinear resize.
    """
    raw = load_triplet(entry)
    canvas = max(image_size, int(round(image_size * CROP_CANVAS_RATIO)))
    comp = _resize(raw.composite, (canvas, canvas))
    mask = _resize(raw.mask, (canvas, canvas)).clamp(0.0, 1.0)
    target = _resize(raw.target, (canvas, canvas))
    if train_mode:
        top = int(rng.integers(0, canvas - image_size + 1))
        left = int(rng.integers(0, canvas - image_size + 1))
        flip = bool(rng.random() < FLIP_PROBABILITY)
    else:
        top = left = (canvas - image_size) // 2
        flip = False
    sl = (slice(None), slice(top, top + image_size), slice(left, left + image_size))
    comp, mask, target = comp[sl], mask[sl], target[sl]
    if flip:
        comp, mask, target = comp.flip(-1), mask.flip(-1), target.flip(-1)
    return Sample(composite=comp, mask=mask, target=target, id=raw.id)


class HarmonyDataset:
    """Indexable view over a manifest with per-item deterministic loading."""

    def __init__(self, manifest, image_size, train_mode=True):
        self.manifest = manifest
        self.image_size = image_size
        self.train_mode = train_mode

    def __len__(self):
        return len(self.manifest)

    def load(self, index, rng):
        return load_and_augment(
            self.manifest.entries[index], self.train_mode, self.image_size, rng
        )

    def load_raw(self, index):
        return load_triplet(self.manifest.entries[index])

    def iter_raw(self):
        for i in range(len(self)):
            yield self.load_raw(i)


def item_rng(seed, *stream):
    """Deterministic per-item generator from a seed and stream coordinates."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF] + [int(s) & 0xFFFFFFFF for s in stream])


def _render_background(size, rng):
    """Smooth color gradient plus a few soft blobs."""
    base = rng.uniform(0.15, 0.85, size=(3, 4, 4)).astype(np.float32)
    img = F.interpolate(
        torch.from_numpy(base).unsqueeze(0), size=(size, size), mode="bilinear", align_corners=True
    )[0].numpy()
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32) / size
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        radius = rng.uniform(0.1, 0.3)
        blob = np.exp(-(((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * radius**2)))
        color = rng.uniform(-0.25, 0.25, size=3).astype(np.float32)
        img += color[:, None, None] * blob[None]
    return np.clip(img, 0.0, 1.0)


def _render_mask(size, rng):
    """Random axis-aligned rectangle or ellipse covering 5-40% of the image."""
    while True:
        h = rng.uniform(0.25, 0.6) * size
        w = rng.uniform(0.25, 0.6) * size
        cy = rng.uniform(0.2, 0.8) * size
        cx = rng.uniform(0.2, 0.8) * size
        ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
        if rng.random() < 0.5:
            mask = (np.abs(ys - cy) <= h / 2) & (np.abs(xs - cx) <= w / 2)
        else:
            mask = ((ys - cy) / (h / 2)) ** 2 + ((xs - cx) / (w / 2)) ** 2 <= 1.0
        frac = mask.mean()
        if 0.05 <= frac <= 0.4:
            return mask.astype(np.float32)


def _perturb_foreground(target, mask, rng, magnitude):
    """Per-channel affine color jitter applied inside the mask."""
    gains = 1.0 + (rng.uniform(0.6, 1.4, size=3) - 1.0) * magnitude
    offsets = rng.uniform(-0.15, 0.15, size=3) * magnitude
    jittered = np.clip(
        target * gains[:, None, None].astype(np.float32)
        + offsets[:, None, None].astype(np.float32),
        0.0,
        1.0,
    )
    return np.where(mask[None] > 0.5, jittered, target)


def _save_png(path, array, gray=False):
    arr = np.clip(np.round(array * 255.0), 0, 255).astype(np.uint8)
    if gray:
        Image.fromarray(arr, mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def generate_toy_dataset(n, image_size, rng, out_dir, split="train", perturbation=1.0):
    """Render ``n`` synthetic triplets in the standard directory layout.

    The composite equals the target outside the mask bit-exactly (PNG,
    composited after quantization). Logs the set's composite-vs-target
    baseline PSNR to ``<split>_meta.json`` for round-trip checks.
    """
    from .metrics import psnr  # lazy: metrics pulls in scipy

    if n < 1:
        raise ValueError("need at least one sample")
    out_dir = Path(out_dir)
    for sub in (COMPOSITE_DIR, MASK_DIR, TARGET_DIR):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    names, baseline = [], []
    for i in range(n):
        target = _render_background(image_size, rng)
        mask = _render_mask(image_size, rng)
        target_q = np.round(np.clip(target, 0, 1) * 255.0) / 255.0
        composite = _perturb_foreground(target_q.astype(np.float32), mask, rng, perturbation)
        composite_q = np.round(np.clip(composite, 0, 1) * 255.0) / 255.0

        stem = f"{split}{i:04d}"
        comp_name = f"{stem}_0_0.png"
        mask_name, target_name = resolve_triplet(comp_name)
        _save_png(out_dir / COMPOSITE_DIR / comp_name, composite_q)
        _save_png(out_dir / MASK_DIR / mask_name, mask, gray=True)
        _save_png(out_dir / TARGET_DIR / target_name, target_q)
        names.append(comp_name)
        baseline.append(psnr(composite_q, target_q))
    (out_dir / f"{split}.txt").write_text("\n".join(names) + "\n")
    meta = {"n": n, "image_size": image_size, "baseline_psnr": float(np.mean(baseline))}
    (out_dir / f"{split}_meta.json").write_text(json.dumps(meta, indent=1))
    return build_manifest(out_dir, split=split, subset="toy")
