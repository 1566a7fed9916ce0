"""Pretraining loop: augment, encode, match, contrast, AdamW step, EMA."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .augment import AugmentParams, sample_view_pair
from .checkpoint import load_container, save_container
from .contrast import LossConfig, sample_sparse, total_loss
from .geometry import correspondence_tables
from .model import HeadConfig, ModelPair, ViTConfig, prepare_images
from .types import PatchGrid, validate_granularities

log = logging.getLogger(__name__)

# rng stream tags; every draw comes from default_rng([seed, stream, step, item])
_AUGMENT, _SAMPLE, _SHUFFLE = 1, 2, 3


@dataclass
class TrainConfig:
    epochs: int = 800
    warmup_epochs: int = 10
    batch_size: int = 256
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    weight_decay: float = 0.05
    momentum: float = 0.996
    loss: LossConfig = field(default_factory=LossConfig)
    vit: ViTConfig = field(default_factory=ViTConfig.vit_small)
    heads: HeadConfig = field(default_factory=HeadConfig)
    augment: AugmentParams = field(default_factory=AugmentParams)
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1
    max_steps: Optional[int] = None
    grad_clip: Optional[float] = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.epochs and self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not (self.lr_max > 0 and self.lr_min > 0 and self.lr_min <= self.lr_max):
            raise ValueError("learning rates must be positive with lr_min <= lr_max")
        if self.weight_decay < 0 or not 0.0 <= self.momentum <= 1.0:
            raise ValueError("bad weight decay or momentum")
        if self.log_every < 1 or self.checkpoint_every < 0:
            raise ValueError("log_every must be >= 1 and checkpoint_every >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        validate_granularities(self.loss.granularities, self.grid)

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid.for_image(self.vit.image_side, self.vit.patch_size)

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Laptop-sized run: 64-dim ViT, batch 8, 100 steps, geometric augmentation only.

        At 100 steps the photometric ops keep the loss from moving measurably;
        the full preset keeps them.
        """
        base = dict(epochs=13, warmup_epochs=1, batch_size=8, max_steps=100,
                    vit=ViTConfig.desk(), heads=HeadConfig.desk(),
                    augment=AugmentParams.geometric(), log_every=1)
        base.update(kw)
        return cls(**base)

    def schedule(self, n_images: int) -> Tuple[int, int, int]:
        """(steps per epoch, warmup steps, total steps) for a dataset size."""
        spe = n_images // self.batch_size
        if spe < 1:
            raise ValueError(f"dataset of {n_images} images is smaller than one batch")
        total = self.epochs * spe
        if self.max_steps is not None:
            total = min(total, self.max_steps)
        return spe, self.warmup_epochs * spe, total


def lr_at(step: int, total_steps: int, warmup_steps: int, lr_max: float, lr_min: float) -> float:
    """Linear warmup from 0, then cosine decay from ``lr_max`` to ``lr_min``."""
    if step >= total_steps:
        return lr_min
    if warmup_steps > 0 and step <= warmup_steps:
        return lr_max * step / warmup_steps
    p = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * p))


def build_model(config: TrainConfig) -> ModelPair:
    torch.manual_seed(config.seed)
    model = ModelPair(config.vit, config.heads, config.momentum)
    return model.to(config.torch_dtype)


def _no_decay(name: str, p: torch.Tensor) -> bool:
    return p.ndim <= 1 or name.endswith("pos_embed") or name.endswith("cls_token")


def build_optimizer(model: ModelPair, config: TrainConfig) -> torch.optim.AdamW:
    decay, plain = [], []
    for name, p in model.named_base_parameters():
        (plain if _no_decay(name, p) else decay).append(p)
    groups = [{"params": decay, "weight_decay": config.weight_decay},
              {"params": plain, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=0.0, betas=(0.9, 0.999), eps=1e-8)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class StepResult:
    loss: float
    per_granularity: Dict[int, float]
    lr: float


def prepare_batch(images: Sequence[np.ndarray], config: TrainConfig, step: int):
    """Augment every image and build its view-1 -> view-2 targets.

    Returns (view-1 tensor, view-2 tensor, samples, swapped samples or None).
    """
    grid, grans = config.grid, config.loss.granularities
    v1, v2, samples, swapped = [], [], [], []
    sample_rng = np.random.default_rng([config.seed, _SAMPLE, step])
    for i, img in enumerate(images):
        pair = sample_view_pair(img, config.augment,
                                rng=np.random.default_rng([config.seed, _AUGMENT, step, i]))
        v1.append(pair.image1)
        v2.append(pair.image2)
        tables = correspondence_tables(pair.crop1, pair.crop2, grid, grans)
        samples.append(sample_sparse(tables, config.loss.sample_counts, sample_rng))
        if config.loss.symmetrize:
            back = correspondence_tables(pair.crop2, pair.crop1, grid, grans)
            swapped.append(sample_sparse(back, config.loss.sample_counts, sample_rng))
    dt = config.torch_dtype
    return (prepare_images(v1, config.vit, dt), prepare_images(v2, config.vit, dt),
            samples, swapped if config.loss.symmetrize else None)


def train_step(images: Sequence[np.ndarray], model: ModelPair, optimizer: torch.optim.Optimizer,
               config: TrainConfig, step: int, lr: float,
               batch_ids: Optional[Sequence[int]] = None) -> StepResult:
    model.train()
    x1, x2, samples, swapped = prepare_batch(images, config, step)
    out = total_loss(model, x1, x2, samples, config.loss, swapped)
    if not torch.isfinite(out.total):
        raise NonFiniteLossError(
            f"non-finite loss at step {step}: seed={config.seed} batch_ids={list(batch_ids or [])} "
            f"per_granularity={ {c: v.item() for c, v in out.per_granularity.items()} }")
    optimizer.zero_grad(set_to_none=True)
    out.total.backward()
    if config.grad_clip:
        torch.nn.utils.clip_grad_norm_(list(model.base_parameters()), config.grad_clip)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    model.ema_update(config.momentum)
    return StepResult(out.total.item(), {c: v.item() for c, v in out.per_granularity.items()}, lr)


# -- checkpoints ------------------------------------------------------------------

def config_to_dict(config: TrainConfig) -> dict:
    d = dataclasses.asdict(config)
    d["loss"]["sample_counts"] = {str(c): n for c, n in config.loss.sample_counts.items()}
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    loss = dict(d.pop("loss"))
    loss["sample_counts"] = {int(c): n for c, n in loss["sample_counts"].items()}
    vit = dict(d.pop("vit"))
    vit["pixel_mean"] = tuple(vit["pixel_mean"])
    vit["pixel_std"] = tuple(vit["pixel_std"])
    heads = {k: tuple(v) for k, v in d.pop("heads").items()}
    aug = {k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("augment").items()}
    return TrainConfig(loss=LossConfig(**loss), vit=ViTConfig(**vit), heads=HeadConfig(**heads),
                       augment=AugmentParams(**aug), **d)


def save_checkpoint(path, model: ModelPair, optimizer: Optional[torch.optim.Optimizer],
                    config: TrainConfig, step: int, extra: Optional[dict] = None) -> None:
    tensors = {f"model.{k}": v.detach().cpu().double().numpy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_base_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                for key, val in optimizer.state.get(p, {}).items():
                    tensors[f"optim.{names[id(p)]}.{key}"] = val.detach().cpu().double().numpy()
    meta = {"format": "mgc-checkpoint", "version": 1, "step": step,
            "config": config_to_dict(config),
            "rng": {"seed": config.seed, "scheme": "numpy default_rng([seed, stream, step, item])"}}
    if extra:
        meta.update(extra)
    save_container(path, tensors, meta)


def load_checkpoint(path, optimizer_too: bool = True):
    """Returns (model, optimizer or None, config, step, meta)."""
    tensors, meta = load_container(path)
    config = config_from_dict(meta["config"])
    model = build_model(config)
    state = model.state_dict()
    for k in state:
        src = tensors.get(f"model.{k}")
        if src is None or tuple(src.shape) != tuple(state[k].shape):
            raise ValueError(f"checkpoint does not match model at {k}")
        state[k] = torch.as_tensor(src).to(state[k].dtype)
    model.load_state_dict(state)
    optimizer = None
    if optimizer_too:
        optimizer = build_optimizer(model, config)
        for name, p in model.named_base_parameters():
            st = {key.split(".")[-1]: torch.as_tensor(arr, dtype=p.dtype)
                  for key, arr in tensors.items() if key.startswith(f"optim.{name}.")
                  and key[len(f"optim.{name}."):].count(".") == 0}
            if st:
                st["step"] = st["step"].reshape(())
                optimizer.state[p] = st
    return model, optimizer, config, meta["step"], meta


# -- fit ------------------------------------------------------------------------

@dataclass
class FitResult:
    losses: List[float]
    steps: int
    checkpoints: List[Path]
    metrics_path: Path


def _checkpoint_path(out: Path, step: int) -> Path:
    return out / f"ckpt_{step:08d}.mgc"


def fit(dataset, config: TrainConfig, out_dir, resume: Optional[str] = None,
        stop_after: Optional[int] = None) -> FitResult:
    """Train on ``dataset`` (len + integer indexing) writing checkpoints and metrics to ``out_dir``.

    ``stop_after`` ends the run early after that global step (used to produce
    mid-run checkpoints); the schedule is unaffected.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise OSError(f"output directory {out} is not writable: {e}") from None

    if resume:
        model, optimizer, saved, start, _ = load_checkpoint(resume)
        if config_to_dict(saved) != config_to_dict(config):
            raise ValueError("resume checkpoint was written with a different configuration")
    else:
        model, start = build_model(config), 0
        optimizer = build_optimizer(model, config)

    if config.epochs == 0:
        path = _checkpoint_path(out, 0)
        save_checkpoint(path, model, optimizer, config, 0)
        metrics = out / "metrics.jsonl"
        metrics.touch()
        return FitResult([], 0, [path], metrics)

    spe, warmup, total = config.schedule(len(dataset))
    metrics_path = out / "metrics.jsonl"
    checkpoints: List[Path] = []
    if not resume:
        metrics_path.write_text("")
        path = _checkpoint_path(out, 0)
        save_checkpoint(path, model, optimizer, config, 0)
        checkpoints.append(path)

    losses: List[float] = []
    t0 = time.perf_counter()
    step = start
    end = total if stop_after is None else min(total, stop_after)
    with metrics_path.open("a") as mf:
        while step < end:
            epoch, pos = divmod(step, spe)
            order = np.random.default_rng([config.seed, _SHUFFLE, epoch]).permutation(len(dataset))
            ids = [int(i) for i in order[pos * config.batch_size:(pos + 1) * config.batch_size]]
            lr = lr_at(step, total, warmup, config.lr_max, config.lr_min)
            res = train_step([dataset[i] for i in ids], model, optimizer, config, step, lr, ids)
            losses.append(res.loss)
            if step % config.log_every == 0:
                rec = {"step": step, "epoch": epoch, "lr": lr, "loss": res.loss,
                       "loss_per_granularity": {str(c): v for c, v in res.per_granularity.items()},
                       "wall_time": time.perf_counter() - t0}
                mf.write(json.dumps(rec) + "\n")
                mf.flush()
            step += 1
            if config.checkpoint_every and step % config.checkpoint_every == 0 and step < total:
                path = _checkpoint_path(out, step)
                save_checkpoint(path, model, optimizer, config, step)
                checkpoints.append(path)
            log.debug("step %d loss %.4f lr %.2e", step, res.loss, lr)
    if step == total or stop_after is not None:
        path = _checkpoint_path(out, step)
        if path not in checkpoints:
            save_checkpoint(path, model, optimizer, config, step)
            checkpoints.append(path)
    return FitResult(losses, step, checkpoints, metrics_path)
