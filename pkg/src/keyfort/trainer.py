"""Plain pre-training, full keyed fine-tuning and LoRA keyed fine-tuning."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data_io import Dataset
from .keyed_transform import InvalidKeyError, Key, generate_key, transform
from .model import ModelConfig, Pipeline, VisionTransformer, attach_lora
from .numerics import NonFiniteError, cross_entropy

log = logging.getLogger(__name__)

TRAIN_MODES = ("pretrain", "finetune_full", "finetune_lora")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_fraction: float = 0.1
    seed: int = 0
    label_smoothing: float = 0.1
    mode: str = "pretrain"
    hflip: bool = True
    lora_rank: int = 16
    lora_alpha: float = 16.0

    def validate(self) -> list[str]:
        errors = []
        if self.epochs < 0:
            errors.append(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            errors.append(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.label_smoothing < 1:
            errors.append(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if not 0 <= self.warmup_fraction < 1:
            errors.append(f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}")
        if self.mode not in TRAIN_MODES:
            errors.append(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            errors.append("beta1 and beta2 must be in [0, 1)")
        return errors

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: Optional[float]


@dataclass
class TrainReport:
    mode: str
    initial_loss: float
    epochs: list[EpochStats] = field(default_factory=list)
    wall_clock_s: Optional[float] = None
    checkpoint: Optional[str] = None

    @property
    def final_loss(self) -> float:
        return self.epochs[-1].train_loss if self.epochs else self.initial_loss

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "initial_loss": self.initial_loss,
            "epochs": [asdict(e) for e in self.epochs],
            "wall_clock_s": self.wall_clock_s,
            "checkpoint": self.checkpoint,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def append_csv(self, path) -> None:
        path = Path(path)
        new = not path.exists()
        with open(path, "a", newline="") as f:
            w = csv.writer(f)
            if new:
                w.writerow(["mode", "epoch", "train_loss", "train_acc", "val_acc"])
            for e in self.epochs:
                w.writerow([self.mode, e.epoch, repr(e.train_loss), repr(e.train_acc),
                            "" if e.val_acc is None else repr(e.val_acc)])


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        c = self.cfg
        self.t += 1
        b1, b2 = np.float32(c.beta1), np.float32(c.beta2)
        bc1 = 1 - c.beta1**self.t
        bc2 = 1 - c.beta2**self.t
        step = np.float32(lr * math.sqrt(bc2) / bc1)
        for k in sorted(self.m):
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            params[k] -= step * m / (np.sqrt(v) + np.float32(c.eps))


def lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    """Linear warmup over the first warmup_fraction of steps, then cosine to 0."""
    warm = int(round(cfg.warmup_fraction * total))
    if warm and step < warm:
        return cfg.lr * (step + 1) / warm
    span = max(1, total - warm)
    return 0.5 * cfg.lr * (1 + math.cos(math.pi * (step - warm) / span))


def _batches(n: int, bs: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, bs):
        yield order[i : i + bs]


def evaluate_accuracy(model: VisionTransformer, key: Optional[Key], data: Dataset, batch_size: int = 256) -> float:
    pred = Pipeline(model, key).predict(data.images, batch_size)
    return float(np.mean(pred == data.labels))


def mean_loss(model: VisionTransformer, key: Optional[Key], data: Dataset, smoothing: float, batch_size: int = 256) -> float:
    total = 0.0
    pipe = Pipeline(model, key)
    for i in range(0, len(data), batch_size):
        logits = pipe.logits(data.images[i : i + batch_size], batch_size)
        losses, _ = cross_entropy(logits, data.labels[i : i + batch_size], smoothing)
        total += float(losses.astype(np.float64).sum())
    return total / len(data)


def _check_compat(model: VisionTransformer, data: Dataset, key: Optional[Key]) -> None:
    cfg = model.config
    want = (cfg.channels, *cfg.image_size)
    if data.image_shape != want:
        raise ValueError(f"dataset images are {data.image_shape}, model expects {want}")
    if data.num_classes != cfg.num_classes:
        raise ValueError(f"dataset has {data.num_classes} classes, model has {cfg.num_classes}")
    if key is not None:
        if key.channels != cfg.channels:
            raise InvalidKeyError(f"key has {key.channels} channels, data has {cfg.channels}")
        h, w = cfg.image_size
        if h % key.block_size or w % key.block_size:
            raise InvalidKeyError(f"images {h}x{w} are not divisible by key block size {key.block_size}")


def train_loop(
    model: VisionTransformer,
    train: Dataset,
    cfg: TrainConfig,
    key: Optional[Key] = None,
    val: Optional[Dataset] = None,
) -> TrainReport:
    """Optimize ``model`` in place on t(x, key) (or x when key is None)."""
    _check_compat(model, train, key)
    t0 = time.perf_counter()
    names = model.trainable_names()
    sd = model.state_dict()
    params = {k: sd[k] for k in names}
    opt = Adam(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(cfg.mode, mean_loss(model, key, train, cfg.label_smoothing))
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    step = 0
    for epoch in range(cfg.epochs):
        loss_sum, correct = 0.0, 0
        for idx in _batches(len(train), cfg.batch_size, rng):
            x = train.images[idx]
            if cfg.hflip:
                flip = rng.random(len(idx)) < 0.5
                x = np.where(flip[:, None, None, None], x[..., ::-1], x)
            if key is not None:
                x = transform(x, key)
            y = train.labels[idx]
            logits = model.forward(x)
            losses, dlogits = cross_entropy(logits, y, cfg.label_smoothing)
            batch_loss = float(losses.astype(np.float64).mean())
            if not math.isfinite(batch_loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch} step {step}")
            model.zero_grad()
            model.backward(dlogits / np.float32(len(idx)))
            grads = model.grad_dict()
            opt.step(params, {k: grads[k] for k in names}, lr_at(step, total, cfg))
            loss_sum += batch_loss * len(idx)
            correct += int((logits.argmax(1) == y).sum())
            step += 1
        val_acc = evaluate_accuracy(model, key, val) if val is not None else None
        stats = EpochStats(epoch + 1, loss_sum / len(train), correct / len(train), val_acc)
        report.epochs.append(stats)
        log.info("%s epoch %d: loss %.4f train acc %.4f val acc %s", cfg.mode, stats.epoch,
                 stats.train_loss, stats.train_acc, "-" if val_acc is None else f"{val_acc:.4f}")
    report.wall_clock_s = time.perf_counter() - t0
    return report


def pretrain(train: Dataset, cfg: TrainConfig, model_cfg: ModelConfig, val: Optional[Dataset] = None):
    """Train the plain classifier M_o on untransformed images."""
    if cfg.mode != "pretrain":
        raise ValueError(f"pretrain needs mode 'pretrain', got {cfg.mode!r}")
    model = VisionTransformer(model_cfg, seed=cfg.seed)
    if train.mean is not None:
        model.set_normalization(train.mean, train.std)
    report = train_loop(model, train, cfg, None, val)
    return model, report


def finetune(m0: VisionTransformer, key: Key, train: Dataset, cfg: TrainConfig, val: Optional[Dataset] = None):
    """Fine-tune a copy of ``m0`` on images shuffled with ``key``.

    finetune_full updates every parameter. finetune_lora attaches adapters
    (unless ``m0`` already carries them) and updates adapters + head only.
    """
    if cfg.mode not in ("finetune_full", "finetune_lora"):
        raise ValueError(f"finetune needs mode finetune_full or finetune_lora, got {cfg.mode!r}")
    _check_compat(m0, train, key)
    if cfg.mode == "finetune_lora":
        model = m0.copy() if m0.mode == "lora" else attach_lora(m0, cfg.lora_rank, cfg.lora_alpha, seed=cfg.seed)
    else:
        if m0.mode == "lora":
            raise ValueError("finetune_full on a model with adapters; merge or use finetune_lora")
        model = m0.copy()
        model.mode = "full"
    model.key = key
    report = train_loop(model, train, cfg, key, val)
    return model, report


def proliferate(m0: VisionTransformer, seeds: list[int], train: Dataset, cfg: TrainConfig,
                block_size: int, val: Optional[Dataset] = None):
    """One key and one fine-tuned model per seed, all starting from ``m0``."""
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"duplicate seeds in {seeds}")
    out = []
    for s in seeds:
        key = generate_key(s, block_size, m0.config.channels)
        model, report = finetune(m0, key, train, cfg, val)
        out.append((key, model, report))
    return out
