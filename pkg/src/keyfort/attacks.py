"""Norm-bounded evasion attacks and the gray-box threat scenarios.

A *pipeline* is anything with ``predict(x)`` and ``loss_and_grad(x, y,
target=None)`` returning per-example losses and the gradient w.r.t. the plain
[0, 1] input; :class:`keyfort.model.Pipeline` is the one used in practice.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data_io import Dataset
from .keyed_transform import generate_key
from .metrics import EvalRow, accuracy
from .model import CKPT_MAGIC, Pipeline, VisionTransformer, lora_adapters
from .numerics import NonFiniteError

NORMS = ("inf", "2")
BUDGET_TOL = 1e-6


@dataclass
class AttackConfig:
    norm: str = "inf"
    epsilon: float = 4 / 255
    steps: int = 10
    step_size: Optional[float] = None  # defaults to epsilon / 4
    random_start: bool = True
    targeted: bool = False
    target: Optional[int] = None
    seed: int = 0
    batch_size: int = 256

    def __post_init__(self):
        self.norm = str(self.norm).lower().replace("linf", "inf").replace("l2", "2")
        errors = []
        if self.norm not in NORMS:
            errors.append(f"norm must be 'inf' or '2', got {self.norm!r}")
        if not self.epsilon >= 0:
            errors.append(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            errors.append(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None and not self.step_size > 0:
            errors.append(f"step_size must be > 0, got {self.step_size}")
        if self.targeted and self.target is None:
            errors.append("targeted attack needs a target label")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def eta(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 4

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown AttackConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "AttackConfig":
        return AttackConfig(**{**asdict(self), **kw})


@dataclass
class AdversarialBatch:
    x: np.ndarray
    delta: np.ndarray
    labels: np.ndarray
    success: np.ndarray
    norm: str
    epsilon: float

    @property
    def adversarial(self) -> np.ndarray:
        return np.clip(self.x + self.delta, 0.0, 1.0)

    def norms(self) -> np.ndarray:
        d = self.delta.reshape(len(self.delta), -1).astype(np.float64)
        return np.abs(d).max(axis=1) if self.norm == "inf" else np.sqrt((d * d).sum(axis=1))

    def check_feasible(self) -> None:
        bad = np.nonzero(self.norms() > self.epsilon + BUDGET_TOL)[0]
        if bad.size:
            raise AssertionError(f"{bad.size} perturbation(s) exceed the {self.norm} budget {self.epsilon}")
        xa = self.x + self.delta
        if np.any(xa < -BUDGET_TOL) or np.any(xa > 1 + BUDGET_TOL):
            raise AssertionError("x + delta leaves [0, 1]")


def _l2(d: np.ndarray) -> np.ndarray:
    flat = d.reshape(len(d), -1).astype(np.float64)
    return np.sqrt((flat * flat).sum(axis=1)).reshape((-1,) + (1,) * (d.ndim - 1))


def project(delta: np.ndarray, x: np.ndarray, norm: str, epsilon: float) -> np.ndarray:
    """Project onto the epsilon ball, then onto the pixel box x + delta in [0, 1]."""
    if norm == "inf":
        delta = np.clip(delta, -epsilon, epsilon)
    else:
        n = _l2(delta)
        # shrink by 1e-6 relative so float32 rounding cannot leave the ball,
        # which also makes a second projection a no-op
        scale = np.where(n > epsilon, (1 - 1e-6) * epsilon / np.maximum(n, 1e-30), 1.0)
        delta = np.where(n > epsilon, delta * scale.astype(delta.dtype), delta)
    # box step only shrinks |delta_i|, so the ball constraint survives it
    return np.clip(delta, -x, 1 - x).astype(x.dtype)


def _random_start(x, cfg: AttackConfig, rng: np.random.Generator) -> np.ndarray:
    if not cfg.random_start or cfg.epsilon == 0:
        return np.zeros_like(x)
    if cfg.norm == "inf":
        d = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
    else:
        g = rng.standard_normal(size=x.shape)
        g /= np.maximum(_l2(g), 1e-30)
        d = g * cfg.epsilon * rng.uniform(0, 1, size=(len(x),) + (1,) * (x.ndim - 1))
    return project(d.astype(x.dtype), x, cfg.norm, cfg.epsilon)


def _grad(pipeline, x, y, cfg: AttackConfig, where: str):
    target = None
    if cfg.targeted:
        target = np.full(len(x), cfg.target, dtype=np.int64)
    losses, g = pipeline.loss_and_grad(x, y, target)
    if not (np.all(np.isfinite(losses)) and np.all(np.isfinite(g))):
        raise NonFiniteError(f"non-finite loss or gradient {where}")
    return losses, g


def _success(pipeline, xa, y, cfg: AttackConfig) -> np.ndarray:
    pred = pipeline.predict(xa)
    return pred == cfg.target if cfg.targeted else pred != y


def _chunks(n: int, bs: int):
    for i in range(0, n, bs):
        yield slice(i, i + bs)


def fgsm(pipeline, x: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> AdversarialBatch:
    """delta = epsilon * sign(grad), then clipped so x + delta stays in [0, 1]."""
    if cfg.norm != "inf" or cfg.steps != 1:
        raise ValueError("fgsm is the one-step l_inf attack: use norm='inf', steps=1")
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    delta = np.zeros_like(x)
    for s in _chunks(len(x), cfg.batch_size):
        _, g = _grad(pipeline, x[s], y[s], cfg, "in fgsm")
        delta[s] = project((np.float32(cfg.epsilon) * np.sign(g)).astype(np.float32), x[s], "inf", cfg.epsilon)
    adv = AdversarialBatch(x, delta, y, _success(pipeline, x + delta, y, cfg), "inf", cfg.epsilon)
    return adv


def _pgd_chunk(pipeline, x, y, cfg: AttackConfig, rng: np.random.Generator) -> np.ndarray:
    eta = np.float32(cfg.eta)
    delta = _random_start(x, cfg, rng)
    best = delta.copy()
    best_loss = np.full(len(x), -np.inf)
    for step in range(cfg.steps + 1):
        losses, g = _grad(pipeline, x + delta, y, cfg, f"at pgd step {step}")
        improved = losses > best_loss
        best_loss = np.where(improved, losses, best_loss)
        best[improved] = delta[improved]
        if step == cfg.steps:
            break
        if cfg.norm == "inf":
            move = eta * np.sign(g)
        else:
            move = eta * g / np.maximum(_l2(g), 1e-12).astype(np.float32)
        delta = project((delta + move).astype(np.float32), x, cfg.norm, cfg.epsilon)
    return best


def pgd(pipeline, x: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> AdversarialBatch:
    """Projected gradient ascent on the loss; returns the best-loss iterate per example."""
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    if cfg.epsilon == 0:
        delta = np.zeros_like(x)
    else:
        rng = np.random.default_rng(cfg.seed)
        delta = np.concatenate([_pgd_chunk(pipeline, x[s], y[s], cfg, rng) for s in _chunks(len(x), cfg.batch_size)])
    return AdversarialBatch(x, delta, y, _success(pipeline, x + delta, y, cfg), cfg.norm, cfg.epsilon)


def craft(pipeline, x, y, cfg: AttackConfig, method: str = "pgd") -> AdversarialBatch:
    if method == "fgsm":
        return fgsm(pipeline, x, y, cfg.replace(steps=1, random_start=False))
    if method == "pgd":
        return pgd(pipeline, x, y, cfg)
    raise ValueError(f"unknown attack method {method!r}")


def save_adversarial_batch(batch: AdversarialBatch, path) -> None:
    """Dump an AdversarialBatch in the checkpoint tensor-container layout."""
    arrays = {"x": batch.x.astype("<f4"), "delta": batch.delta.astype("<f4"),
              "labels": batch.labels.astype("<f4"), "success": batch.success.astype("<f4")}
    tensors, off = [], 0
    for k, a in arrays.items():
        tensors.append({"name": k, "shape": list(a.shape), "offset": off, "nbytes": a.nbytes})
        off += a.nbytes
    header = json.dumps({"format": "keyfort-adversarial-batch", "version": 1, "norm": batch.norm,
                         "epsilon": batch.epsilon, "tensors": tensors}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for a in arrays.values():
            f.write(a.tobytes())


# scenarios


def model_row_fields(model_id: str, m: VisionTransformer) -> dict:
    key = m.key
    return {
        "model_id": model_id,
        "defense": "key" if key is not None else "plain",
        "block_size": key.block_size if key is not None else None,
        "finetune": {"plain": "no", "full": "full", "lora": "lora"}[m.mode] if key is not None else "no",
    }


def _row(model_id, m, scenario, cfg: Optional[AttackConfig], n, acc) -> EvalRow:
    norm = "none" if cfg is None else cfg.norm
    eps = 0.0 if cfg is None else float(cfg.epsilon)
    return EvalRow(**model_row_fields(model_id, m), scenario=scenario, norm=norm, epsilon=eps, n=n, accuracy=acc)


def clean_row(model_id: str, m: VisionTransformer, data: Dataset) -> EvalRow:
    acc = accuracy(Pipeline(m, m.key), data.images, data.labels)
    return _row(model_id, m, "clean", None, len(data), acc)


def scenario_non_adaptive(m_o: VisionTransformer, m_k: VisionTransformer, data: Dataset, cfg: AttackConfig,
                          model_id: str = "defended", method: str = "pgd", batch: Optional[AdversarialBatch] = None):
    """Craft on the plain pre-trained model, evaluate the defended model."""
    if m_o.config != m_k.config:
        raise ValueError("pre-trained and defended models have different architectures")
    if batch is None:
        batch = craft(Pipeline(m_o), data.images, data.labels, cfg, method)
    batch.check_feasible()
    acc = accuracy(Pipeline(m_k, m_k.key), batch.adversarial, data.labels)
    return [_row(model_id, m_k, "non_adaptive", cfg, len(data), acc)], batch


def scenario_adaptive(m_o: VisionTransformer, m_k: VisionTransformer, guessed_seed: int, data: Dataset,
                      cfg: AttackConfig, train: Optional[Dataset] = None, train_cfg=None,
                      surrogate: Optional[VisionTransformer] = None, model_id: str = "defended",
                      method: str = "pgd"):
    """Fine-tune M_o with a guessed key K' and transfer its white-box examples to M_K.

    Returns (rows, surrogate, batch). The second row is the diagnostic
    self-attack accuracy of the surrogate on its own examples.
    """
    if m_k.key is None:
        raise ValueError("adaptive scenario needs a keyed target model")
    if m_k.key.seed is not None and guessed_seed == m_k.key.seed:
        raise ValueError("guessed seed equals the defender's seed: not a gray-box scenario")
    guessed = generate_key(guessed_seed, m_k.key.block_size, m_k.key.channels)
    if guessed.perm == m_k.key.perm:
        raise ValueError("guessed key equals the defender's key: not a gray-box scenario")
    if surrogate is None:
        if train is None or train_cfg is None:
            raise ValueError("need train data and a train config to build the surrogate")
        from .trainer import finetune

        # same recipe as the defender: same mode and, for lora, the same rank and alpha
        over = {"mode": "finetune_lora" if m_k.mode == "lora" else "finetune_full"}
        if m_k.mode == "lora":
            ad = lora_adapters(m_k)[0]
            over.update(lora_rank=ad.rank, lora_alpha=ad.alpha)
        tc = type(train_cfg)(**{**train_cfg.to_dict(), **over})
        surrogate, _ = finetune(m_o, guessed, train, tc)
    elif surrogate.key is None or surrogate.key.perm != guessed.perm:
        raise ValueError("supplied surrogate was not fine-tuned with the guessed key")
    batch = craft(Pipeline(surrogate, surrogate.key), data.images, data.labels, cfg, method)
    batch.check_feasible()
    acc = accuracy(Pipeline(m_k, m_k.key), batch.adversarial, data.labels)
    self_acc = accuracy(Pipeline(surrogate, surrogate.key), batch.adversarial, data.labels)
    rows = [_row(model_id, m_k, "adaptive", cfg, len(data), acc),
            _row(f"{model_id}:surrogate", surrogate, "whitebox", cfg, len(data), self_acc)]
    return rows, surrogate, batch


def scenario_whitebox_oracle(m_k: VisionTransformer, data: Dataset, cfg: AttackConfig,
                             model_id: str = "defended", method: str = "pgd"):
    """Attacker holds the true key: craft through M_K itself."""
    pipe = Pipeline(m_k, m_k.key)
    batch = craft(pipe, data.images, data.labels, cfg, method)
    batch.check_feasible()
    acc = accuracy(pipe, batch.adversarial, data.labels)
    return [_row(model_id, m_k, "whitebox", cfg, len(data), acc)], batch
