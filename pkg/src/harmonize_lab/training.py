"""Optimization loop, checkpointing and the ablation grid driver.

Every random decision is derived from (seed, stream tag, step/epoch), so a
run is fully determined by its config and data order, and resuming from a
checkpoint reproduces the uninterrupted trajectory exactly.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from .contrastive import ContrastiveConfig, PatchEmbedder, harmonization_contrastive_loss
from .data import HarmonyDataset, item_rng
from .errors import ConfigError, NumericError
from .metrics import composite_baseline, evaluate_dataset
from .model import NetworkConfig, build_network
from .objectives import LossWeights, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "HARMONIZE-LAB-CKPT-1"

# rng stream tags: one independent stream family per consumer
_STREAM_ORDER = 11
_STREAM_ITEM = 13
_STREAM_CONTRASTIVE = 17


@dataclass(frozen=True)
class TrainConfig:
    # optimization
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0  # off unless positive
    steps: int = 0  # 0: derive from epochs
    epochs: int = 60
    seed: int = 0
    eval_every: int = 0  # 0: evaluate only at the end
    checkpoint_every: int = 0
    # objective
    lambda1: float = 0.4
    lambda2: float = 0.5
    lambda3: float = 0.1
    use_style_fusion: bool = True
    use_lhcl: bool = True
    use_lpixel: bool = True
    # contrastive sampling
    K: int = 256
    tau: float = 0.07
    patch_size: int = 8
    downsample_factor: int = 4
    embed_dim: int = 256
    hidden_dim: int = 256
    # network / data
    image_size: int = 256
    base_width: int = 32
    stages: int = 4
    blend_background_at_inference: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")

    def network_config(self):
        return NetworkConfig(
            in_channels=4,
            base_width=self.base_width,
            stages=self.stages,
            interlayer_width=self.base_width * 2**self.stages,
            image_size=self.image_size,
            blend_background_at_inference=self.blend_background_at_inference,
            use_style_fusion=self.use_style_fusion,
        )

    def contrastive_config(self):
        return ContrastiveConfig(
            K=self.K,
            tau=self.tau,
            patch_size=self.patch_size,
            downsample_factor=self.downsample_factor,
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            seed=self.seed,
        )

    def loss_weights(self):
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def toy(cls, **overrides):
        """Canonical desk-scale recipe: width 8, 64x64, K=16, 300 steps.

        Uses a higher learning rate and a softer contrastive temperature
        than the full-scale defaults: 300 steps underfit at 1e-3, and on
        low-texture synthetic foregrounds the 0.07 temperature turns the
        contrastive term into a de-homogenizing force that fights
        reconstruction.
        """
        base = dict(
            image_size=64,
            base_width=8,
            stages=2,
            K=16,
            patch_size=4,
            downsample_factor=2,
            embed_dim=64,
            hidden_dim=64,
            steps=300,
            eval_every=0,
            learning_rate=3e-3,
            tau=2.0,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainState:
    net: torch.nn.Module
    head: torch.nn.Module
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    step: int = 0


def init_state(cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    net = build_network(cfg.network_config())
    head = PatchEmbedder(cfg.contrastive_config())
    optimizer = torch.optim.AdamW(
        list(net.parameters()) + list(head.parameters()),
        lr=cfg.learning_rate,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    return TrainState(net=net, head=head, optimizer=optimizer, config=cfg)


def save_checkpoint(state: TrainState, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "magic": CHECKPOINT_MAGIC,
            "config": state.config.to_dict(),
            "step": state.step,
            "model_state": state.net.state_dict(),
            "head_state": state.head.state_dict(),
            "optimizer_state": state.optimizer.state_dict(),
            "torch_rng": torch.get_rng_state(),
        },
        path,
    )
    return path


def load_checkpoint(path) -> TrainState:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("magic") != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path} is not a {CHECKPOINT_MAGIC} checkpoint")
    cfg = TrainConfig.from_dict(payload["config"])
    state = init_state(cfg)
    state.net.load_state_dict(payload["model_state"])
    state.head.load_state_dict(payload["head_state"])
    state.optimizer.load_state_dict(payload["optimizer_state"])
    state.step = payload["step"]
    torch.set_rng_state(payload["torch_rng"])
    return state


def _stack_batch(samples):
    comp = torch.stack([s.composite for s in samples])
    mask = torch.stack([s.mask for s in samples])
    target = torch.stack([s.target for s in samples])
    return comp, mask, target


def train_step(state: TrainState, batch, cfg: TrainConfig):
    """One forward/backward/update over a (composite, mask, target) batch."""
    comp, mask, target = batch
    state.net.train()
    state.head.train()
    out = state.net(comp, mask)
    contrastive_result = None
    if cfg.use_lhcl and cfg.lambda3 != 0.0:
        rng = item_rng(cfg.seed, _STREAM_CONTRASTIVE, state.step)
        contrastive_result = harmonization_contrastive_loss(
            out, target, mask, state.head, cfg.contrastive_config(), rng
        )
    try:
        report = total_loss(
            out, target, mask, cfg.loss_weights(), contrastive_result, include_pixel=cfg.use_lpixel
        )
    except NumericError as exc:
        raise NumericError(f"aborting at step {state.step}: {exc}") from exc
    state.optimizer.zero_grad()
    report.total_tensor.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(
            [p for g in state.optimizer.param_groups for p in g["params"]], cfg.grad_clip
        )
    state.optimizer.step()
    state.step += 1
    return report


def _epoch_order(cfg, n_items, epoch):
    return item_rng(cfg.seed, _STREAM_ORDER, epoch).permutation(n_items)


def _load_batch(dataset, cfg, epoch, indices):
    samples = [
        dataset.load(int(i), item_rng(cfg.seed, _STREAM_ITEM, epoch, int(i))) for i in indices
    ]
    return _stack_batch(samples)


def steps_per_epoch(cfg, n_items):
    per = n_items // cfg.batch_size
    if per < 1:
        raise ConfigError(
            f"dataset of {n_items} items cannot fill a batch of {cfg.batch_size}"
        )
    return per


def total_steps(cfg, n_items):
    return cfg.steps if cfg.steps > 0 else cfg.epochs * steps_per_epoch(cfg, n_items)


def evaluate_state(state, eval_manifest, resolution=None):
    """Aggregate metrics of the current model on a manifest."""
    state.net.eval()
    resolution = resolution or state.config.image_size
    dataset = HarmonyDataset(eval_manifest, state.config.image_size, train_mode=False)

    def model(comp, mask):
        return state.net(comp, mask)

    _, aggregate = evaluate_dataset(model, dataset.iter_raw(), resolution)
    return aggregate


def train_loop(cfg: TrainConfig, train_manifest, eval_manifest=None, out_dir=None, resume_from=None):
    """Run the optimization; returns (state, checkpoint path, loss history).

    Deterministic given (seed, config, data). With ``resume_from`` the loop
    continues from the checkpoint's step and reproduces the records an
    uninterrupted run would have produced.
    """
    state = load_checkpoint(resume_from) if resume_from else init_state(cfg)
    if resume_from:
        cfg = state.config
    dataset = HarmonyDataset(train_manifest, cfg.image_size, train_mode=True)
    per_epoch = steps_per_epoch(cfg, len(dataset))
    n_steps = total_steps(cfg, len(dataset))
    out_dir = Path(out_dir) if out_dir else None
    log_fh = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
        log_fh = open(out_dir / "log.jsonl", "a")

    history = []
    started = time.time()
    try:
        while state.step < n_steps:
            epoch = state.step // per_epoch
            position = state.step % per_epoch
            order = _epoch_order(cfg, len(dataset), epoch)
            for b in range(position, per_epoch):
                if state.step >= n_steps:
                    break
                indices = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                batch = _load_batch(dataset, cfg, epoch, indices)
                report = train_step(state, batch, cfg)
                history.append(report)
                record = {"step": state.step, "epoch": epoch, **report.to_dict()}
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                if cfg.eval_every and eval_manifest and state.step % cfg.eval_every == 0:
                    agg = evaluate_state(state, eval_manifest)
                    log.info("step %d eval: psnr=%.3f mse=%.3f", state.step, agg.psnr, agg.mse)
                    if log_fh:
                        log_fh.write(
                            json.dumps({"step": state.step, "eval": agg.to_dict()}) + "\n"
                        )
                if cfg.checkpoint_every and out_dir and state.step % cfg.checkpoint_every == 0:
                    save_checkpoint(state, out_dir / f"checkpoint-{state.step:06d}.pt")
    finally:
        if log_fh:
            log_fh.close()
    log.info("trained %d steps in %.1fs", n_steps, time.time() - started)
    ckpt_path = save_checkpoint(state, (out_dir or Path(".")) / "checkpoint.pt") if out_dir else None
    return state, ckpt_path, history


# Reference results at full iHarmony4 scale (256px), for documentation and
# table layout only; desk-scale runs are not expected to reproduce them.
FULL_SCALE_REFERENCE = {
    "loss_grid": [
        {"cell": "l1_only", "mse": 54.55, "psnr": 34.56, "fssim": 85.68},
        {"cell": "l1+lpixel", "mse": 42.14, "psnr": 35.53, "fssim": 88.14},
        {"cell": "l1+lpixel+fusion", "mse": 29.08, "psnr": 37.01, "fssim": 90.03},
        {"cell": "full", "mse": 25.92, "psnr": 37.50, "fssim": 90.69},
    ],
    "patch_grid": [
        {"cell": "K=128", "mse": 29.06, "psnr": 37.00, "ssim": 98.92},
        {"cell": "K=256", "mse": 25.90, "psnr": 37.50, "ssim": 99.04},
        {"cell": "K=512", "mse": 30.87, "psnr": 36.79, "ssim": 98.88},
        {"cell": "K=1024", "mse": 30.35, "psnr": 36.69, "ssim": 98.83},
    ],
}


def loss_component_grid():
    """Ablation cells over {style fusion, contrastive, foreground-L1}."""
    return [
        {"cell": "l1_only", "use_lpixel": False, "use_style_fusion": False, "use_lhcl": False},
        {"cell": "l1+lpixel", "use_lpixel": True, "use_style_fusion": False, "use_lhcl": False},
        {"cell": "l1+lpixel+fusion", "use_lpixel": True, "use_style_fusion": True, "use_lhcl": False},
        {"cell": "full", "use_lpixel": True, "use_style_fusion": True, "use_lhcl": True},
    ]


def patch_count_grid(values=(128, 256, 512, 1024)):
    return [{"cell": f"K={k}", "K": k} for k in values]


def run_ablation_grid(base_cfg, grid, train_manifest, eval_manifest, out_dir=None):
    """One training + evaluation run per grid cell; failures are isolated."""
    rows = []
    for cell in grid:
        overrides = {k: v for k, v in cell.items() if k != "cell"}
        label = cell.get("cell") or ",".join(f"{k}={v}" for k, v in overrides.items())
        try:
            cfg = replace(base_cfg, **overrides)
            cell_dir = Path(out_dir) / label.replace("=", "") if out_dir else None
            state, _, _ = train_loop(cfg, train_manifest, out_dir=cell_dir)
            agg = evaluate_state(state, eval_manifest)
            rows.append({"cell": label, **agg.to_dict()})
        except Exception as exc:
            log.warning("ablation cell %s failed: %s", label, exc)
            rows.append({"cell": label, "error": str(exc)})
    return rows


def format_grid_rows(rows, columns=("mse", "psnr", "ssim", "fmse", "fssim")):
    """Fixed-width table in the cell-per-row layout used in docs."""
    header = ["cell".ljust(20)] + [c.upper().rjust(9) for c in columns]
    lines = ["".join(header)]
    for row in rows:
        if "error" in row:
            lines.append(f"{row['cell']:<20}ERROR: {row['error']}")
            continue
        cells = [f"{row['cell']:<20}"]
        for c in columns:
            val = row.get(c)
            cells.append(f"{val:9.2f}" if isinstance(val, (int, float)) else " " * 9)
        lines.append("".join(cells))
    return "\n".join(lines)


def baseline_psnr(eval_manifest, image_size):
    """Composite-vs-target PSNR of a manifest (the un-harmonized baseline)."""
    dataset = HarmonyDataset(eval_manifest, image_size, train_mode=False)
    _, agg = evaluate_dataset(composite_baseline, dataset.iter_raw(), image_size)
    return agg.psnr


TOY_TRAIN_SAMPLES = 64
TOY_EVAL_SAMPLES = 16
TOY_IMAGE_SIZE = 64
_TOY_TRAIN_SEED = 0
_TOY_EVAL_SEED = 10_000


def canonical_toy_data(root):
    """Generate (or reuse) the fixed toy train/test splits under ``root``."""
    from .data import build_manifest, generate_toy_dataset

    root = Path(root)
    if (root / "train.txt").exists():
        train = build_manifest(root, split="train")
    else:
        train = generate_toy_dataset(
            TOY_TRAIN_SAMPLES, TOY_IMAGE_SIZE, np.random.default_rng(_TOY_TRAIN_SEED), root, split="train"
        )
    if (root / "test.txt").exists():
        test = build_manifest(root, split="test")
    else:
        test = generate_toy_dataset(
            TOY_EVAL_SAMPLES, TOY_IMAGE_SIZE, np.random.default_rng(_TOY_EVAL_SEED), root, split="test"
        )
    return train, test
