"""Command-line entry point.

Subcommands: make-toy-data, train, evaluate, ablate, harmonize, selftest.
Exit codes: 0 success, 1 usage/config error, 2 runtime/numeric error.
Config values come from an optional JSON file overridden by repeatable
``--override key=value`` flags (override wins, unknown keys rejected).
"""

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import HarmonyDataset, build_manifest, generate_toy_dataset, load_manifest
from .errors import ConfigError, ManifestError, NumericError
from .metrics import composite_baseline, evaluate_dataset, write_report
from .selftest import format_results, run_selftest
from .training import (
    FULL_SCALE_REFERENCE,
    TrainConfig,
    evaluate_state,
    format_grid_rows,
    load_checkpoint,
    loss_component_grid,
    patch_count_grid,
    run_ablation_grid,
    train_loop,
)

DATA_ENV = "HARMONIZE_LAB_DATA"


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _coerce(name, raw, typ):
    if typ is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean override {name}={raw!r}")
    try:
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse override {name}={raw!r} as {typ.__name__}") from exc


def load_config(config_path, overrides, toy_default=True):
    """Build a TrainConfig from file + overrides; unknown keys rejected."""
    data = {}
    if config_path:
        data = json.loads(Path(config_path).read_text())
    types = {f.name: type(getattr(TrainConfig.toy(), f.name)) for f in fields(TrainConfig)}
    parsed = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        if key not in types:
            raise ConfigError(f"unknown config key: {key}")
        parsed[key] = _coerce(key, raw, types[key])
    data.update(parsed)
    if config_path:
        return TrainConfig.from_dict(data)
    base = TrainConfig.toy() if toy_default else TrainConfig()
    unknown = sorted(set(data) - set(types))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    from dataclasses import replace

    return replace(base, **data)


def _run_dir(base, cfg):
    digest = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:8]
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = Path(base) / f"{stamp}-{digest}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _data_root(args):
    root = args.data or os.environ.get(DATA_ENV)
    if not root:
        raise ConfigError(f"no dataset root: pass --data or set {DATA_ENV}")
    return Path(root)


def _manifest(root, split):
    cache = Path(root) / f"manifest_{split}.json"
    if cache.exists():
        return load_manifest(cache)
    return build_manifest(root, split=split)


def cmd_make_toy_data(args):
    rng = np.random.default_rng(args.seed)
    manifest = generate_toy_dataset(
        args.n, args.size, rng, args.out, split=args.split, perturbation=args.perturbation
    )
    print(f"{len(manifest)} samples in {args.out} (split {args.split})")
    return 0


def cmd_train(args):
    cfg = load_config(args.config, args.override)
    root = _data_root(args)
    train_manifest = _manifest(root, "train")
    eval_manifest = None
    if (Path(root) / "test.txt").exists() or (Path(root) / "manifest_test.json").exists():
        eval_manifest = _manifest(root, "test")
    out_dir = _run_dir(args.out, cfg)
    state, ckpt_path, history = train_loop(cfg, train_manifest, eval_manifest, out_dir=out_dir)
    print(f"trained {state.step} steps; final loss {history[-1].total:.4f}")
    if eval_manifest is not None:
        agg = evaluate_state(state, eval_manifest)
        print(format_grid_rows([{"cell": "final", **agg.to_dict()}]))
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_evaluate(args):
    resolutions = args.resolution or [0]
    root = _data_root(args)
    manifest = _manifest(root, args.split)
    if args.baseline == "composite":
        model, image_size = composite_baseline, None
        label = "composite-baseline"
    else:
        if not args.checkpoint:
            raise ConfigError("--checkpoint required unless --baseline composite")
        state = load_checkpoint(args.checkpoint)
        state.net.eval()
        image_size = state.config.image_size

        def model(comp, mask):
            return state.net(comp, mask)

        label = "model"
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for res in resolutions:
        res = res or image_size or 256
        dataset = HarmonyDataset(manifest, res, train_mode=False)
        records, aggregate = evaluate_dataset(model, dataset.iter_raw(), res)
        report_path = out_dir / f"report-{label}-{res}.jsonl"
        write_report(report_path, records, aggregate)
        print(f"{label} @ {res}: " + format_grid_rows([{"cell": label, **aggregate.to_dict()}]))
        print(f"report: {report_path}")
    return 0


def cmd_ablate(args):
    cfg = load_config(args.config, args.override)
    root = _data_root(args)
    train_manifest = _manifest(root, "train")
    eval_manifest = _manifest(root, "test")
    grid = loss_component_grid() if args.grid == "flags" else patch_count_grid()
    out_dir = _run_dir(args.out, cfg)
    rows = run_ablation_grid(cfg, grid, train_manifest, eval_manifest, out_dir=out_dir)
    print(format_grid_rows(rows))
    reference = FULL_SCALE_REFERENCE["loss_grid" if args.grid == "flags" else "patch_grid"]
    print("\nfull-scale reference (documentation only):")
    print(format_grid_rows(reference))
    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=1))
    return 0


def _load_image_file(path, gray=False):
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L" if gray else "RGB"), dtype=np.float32) / 255.0
    t = torch.from_numpy(arr.copy())
    return t.unsqueeze(0) if gray else t.permute(2, 0, 1)


def _save_image_file(path, tensor):
    arr = np.clip(np.round(tensor.detach().numpy() * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def cmd_harmonize(args):
    import torch.nn.functional as F

    state = load_checkpoint(args.checkpoint)
    state.net.eval()
    comp = _load_image_file(args.composite)
    mask = _load_image_file(args.mask, gray=True)
    h, w = comp.shape[-2:]
    run_size = state.config.image_size
    comp_in = F.interpolate(comp[None], size=(run_size, run_size), mode="bilinear", align_corners=False)
    mask_in = F.interpolate(mask[None], size=(run_size, run_size), mode="bilinear", align_corners=False)
    with torch.no_grad():
        # run unblended at the network size, blend at native resolution after
        out = state.net(comp_in, mask_in.clamp(0, 1), blend=False)
    out = F.interpolate(out, size=(h, w), mode="bilinear", align_corners=False)[0]
    if not args.no_blend:
        out = out * mask + comp * (1.0 - mask)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _save_image_file(out_path, out.clamp(0, 1))
    print(f"harmonized image: {out_path} ({w}x{h})")
    if args.grid:
        grid = torch.cat([comp, mask.expand(3, -1, -1), out.clamp(0, 1)], dim=2)
        grid_path = out_path.with_name(out_path.stem + "-grid" + out_path.suffix)
        _save_image_file(grid_path, grid)
        print(f"grid: {grid_path}")
    return 0


def cmd_selftest(args):
    results = run_selftest()
    print(format_results(results))
    return 0 if all(r.passed for r in results) else 2


def build_parser():
    parser = _Parser(prog="harmonize-lab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy-data", help="generate a synthetic toy dataset")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.add_argument("--perturbation", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_make_toy_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON config file (defaults to the toy recipe)")
    p.add_argument("--override", action="append", metavar="KEY=VALUE")
    p.add_argument("--data", help=f"dataset root (default ${DATA_ENV})")
    p.add_argument("--out", default="runs")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint or baseline")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--resolution", type=int, action="append")
    p.add_argument("--baseline", choices=["composite"])
    p.add_argument("--out", default="reports")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--grid", choices=["flags", "k"], default="flags")
    p.add_argument("--config")
    p.add_argument("--override", action="append", metavar="KEY=VALUE")
    p.add_argument("--data")
    p.add_argument("--out", default="runs")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("harmonize", help="harmonize one composite image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--composite", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", action="store_true", help="also write composite|mask|output grid")
    p.add_argument("--no-blend", action="store_true")
    p.set_defaults(fn=cmd_harmonize)

    p = sub.add_parser("selftest", help="run the built-in verification suite")
    p.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (UsageError, ConfigError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
