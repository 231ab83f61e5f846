"""Desk-scale vision transformer, the keyed pipeline and LoRA adapters."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .keyed_transform import InvalidKeyError, Key, backprop_through_transform, transform
from .numerics import (
    DTYPE,
    MLP,
    LayerNorm,
    Linear,
    MeanPool,
    Module,
    MultiHeadSelfAttention,
    ShapeError,
    check_finite,
    cross_entropy,
)

MODES = ("plain", "full", "lora")


@dataclass
class ModelConfig:
    image_size: tuple[int, int] = (32, 32)
    channels: int = 3
    vit_patch: int = 4
    embed_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 4
    mlp_ratio: int = 4
    num_classes: int = 10
    pooling: str = "mean"

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        h, w = self.image_size
        errors = []
        if h % self.vit_patch or w % self.vit_patch:
            errors.append(f"image_size {h}x{w} not divisible by vit_patch {self.vit_patch}")
        if self.embed_dim % self.num_heads:
            errors.append(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.pooling != "mean":
            errors.append(f"pooling {self.pooling!r} unsupported (only 'mean')")
        if self.num_classes < 2:
            errors.append("num_classes must be >= 2")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def num_tokens(self) -> int:
        h, w = self.image_size
        return (h // self.vit_patch) * (w // self.vit_patch)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.vit_patch**2

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


class Block(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.embed_dim
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadSelfAttention(d, cfg.num_heads, rng)
        self.norm2 = LayerNorm(d)
        self.mlp = MLP(d, d * cfg.mlp_ratio, rng)

    def forward(self, x):
        x = x + self.attn.forward(self.norm1.forward(x))
        return x + self.mlp.forward(self.norm2.forward(x))

    def backward(self, dy):
        dy = dy + self.norm2.backward(self.mlp.backward(dy))
        return dy + self.norm1.backward(self.attn.backward(dy))


class PositionEmbedding(Module):
    def __init__(self, tokens: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.params["weight"] = (rng.standard_normal((tokens, dim)) * 0.02).astype(DTYPE)

    def forward(self, x):
        return x + self.params["weight"]

    def backward(self, dy):
        self._accum("weight", dy.sum(axis=0))
        return dy


def patchify(x: np.ndarray, p: int) -> np.ndarray:
    """(N, C, H, W) -> (N, T, C*p*p), tokens row-major, patch vectors channel-major."""
    n, c, h, w = x.shape
    t = x.reshape(n, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
    return t.reshape(n, (h // p) * (w // p), c * p * p)


def unpatchify(t: np.ndarray, p: int, c: int, h: int, w: int) -> np.ndarray:
    n = t.shape[0]
    x = t.reshape(n, h // p, w // p, c, p, p).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(n, c, h, w)


class VisionTransformer(Module):
    """Classifier f. Inputs are [0, 1] images; standardization happens inside.

    ``mode`` is one of plain / full / lora and ``key`` is the key this model
    was fine-tuned with (None for the plain pre-trained model).
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = cfg
        rng = np.random.default_rng(seed)
        self.patch_embed = Linear(cfg.patch_dim, cfg.embed_dim, rng)
        self.pos_embed = PositionEmbedding(cfg.num_tokens, cfg.embed_dim, rng)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.num_blocks)]
        self.norm = LayerNorm(cfg.embed_dim)
        self.pool = MeanPool()
        self.head = Linear(cfg.embed_dim, cfg.num_classes, rng)
        self.mean = np.zeros(cfg.channels, dtype=DTYPE)
        self.std = np.ones(cfg.channels, dtype=DTYPE)
        self.mode = "plain"
        self.key: Optional[Key] = None
        self.merged = False

    def set_normalization(self, mean, std) -> None:
        mean = np.asarray(mean, dtype=DTYPE).reshape(-1)
        std = np.asarray(std, dtype=DTYPE).reshape(-1)
        if mean.shape != (self.config.channels,) or std.shape != (self.config.channels,):
            raise ShapeError("set_normalization", f"{self.config.channels} channel statistics", (mean.shape, std.shape))
        if np.any(std <= 0):
            raise ValueError("std must be positive")
        self.mean, self.std = mean, std

    def _check_input(self, x: np.ndarray) -> None:
        cfg = self.config
        want = (cfg.channels, *cfg.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != want:
            raise ShapeError("forward", f"(N, {want[0]}, {want[1]}, {want[2]})", x.shape)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Logits for a batch (N, C, H, W) of images already in model space."""
        self._check_input(x)
        check_finite(x, "input")
        p = self.config.vit_patch
        z = (x - self.mean[:, None, None]) / self.std[:, None, None]
        t = self.patch_embed.forward(patchify(z, p))
        t = self.pos_embed.forward(t)
        for blk in self.blocks:
            t = blk.forward(t)
        t = self.pool.forward(self.norm.forward(t))
        return check_finite(self.head.forward(t), "logits")

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        cfg = self.config
        d = self.norm.backward(self.pool.backward(self.head.backward(dlogits)))
        for blk in reversed(self.blocks):
            d = blk.backward(d)
        d = self.patch_embed.backward(self.pos_embed.backward(d))
        dz = unpatchify(d, cfg.vit_patch, cfg.channels, *cfg.image_size)
        return dz / self.std[:, None, None]

    # parameter bookkeeping
    def lora_layers(self) -> list[tuple[str, Linear]]:
        return [("patch_embed", self.patch_embed)] + [
            (f"blocks.{i}.attn.qkv", b.attn.qkv) for i, b in enumerate(self.blocks)
        ]

    def trainable_names(self) -> list[str]:
        names = [n for n, _, _ in self.named_parameters()]
        if self.mode != "lora":
            return names
        return [n for n in names if "lora_" in n or n.startswith("head.")]

    def num_parameters(self, trainable_only: bool = False) -> int:
        sd = self.state_dict()
        names = self.trainable_names() if trainable_only else sd.keys()
        return int(sum(sd[n].size for n in names))

    def copy(self) -> "VisionTransformer":
        from copy import deepcopy

        new = deepcopy(self)
        for _, mod in new.named_modules():
            for k in [a for a in vars(mod) if a.startswith("_")]:
                delattr(mod, k)
        return new


ModelState = VisionTransformer


class Pipeline:
    """M_K(x) = f(t(x, K)); with key=None this is the plain classifier f."""

    def __init__(self, model: VisionTransformer, key: Optional[Key] = None):
        if key is not None and key.channels != model.config.channels:
            raise InvalidKeyError(f"key has {key.channels} channels, model expects {model.config.channels}")
        self.model, self.key = model, key

    def _t(self, x):
        return x if self.key is None else transform(x, self.key)

    def logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        out = [self.model.forward(self._t(x[i : i + batch_size])) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.model.config.num_classes), DTYPE)

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return self.logits(x, batch_size).argmax(axis=1)

    def loss_and_grad(self, x: np.ndarray, y: np.ndarray, target: Optional[np.ndarray] = None):
        """Per-example cross-entropy and its gradient w.r.t. the plain input x.

        With ``target`` given the returned loss is the negated cross-entropy
        to the target class, so ascending it moves towards the target.
        """
        x = np.asarray(x)
        logits = self.model.forward(self._t(x))
        self.model.zero_grad()
        if target is None:
            losses, dlogits = cross_entropy(logits, y)
        else:
            losses, dlogits = cross_entropy(logits, target)
            losses, dlogits = -losses, -dlogits
        g = self.model.backward(dlogits)
        if self.key is not None:
            g = backprop_through_transform(g, self.key)
        return losses, check_finite(g, "input gradient")


def forward_plain(x: np.ndarray, m: VisionTransformer) -> np.ndarray:
    return Pipeline(m).logits(x)


def forward_defended(x: np.ndarray, m: VisionTransformer, key: Key) -> np.ndarray:
    return Pipeline(m, key).logits(x)


def attach_lora(m: VisionTransformer, r: int = 16, alpha: float = 16.0, seed: int = 0) -> VisionTransformer:
    """Attach adapters (B = 0) to the patch embedding and every qkv projection.

    Returns a copy in lora mode; the base weights are frozen from then on.
    """
    if m.mode == "lora":
        raise ValueError("model already has adapters")
    new = m.copy()
    rng = np.random.default_rng(seed)
    for _, layer in new.lora_layers():
        layer.add_lora(r, alpha, rng)
    new.mode = "lora"
    new.merged = False
    return new


def merge_lora(m: VisionTransformer) -> VisionTransformer:
    if m.mode != "lora":
        raise ValueError("merge_lora needs a model in lora mode" + (" (already merged)" if m.merged else ""))
    new = m.copy()
    for _, layer in new.lora_layers():
        layer.merge_lora()
    new.mode = "full"
    new.merged = True
    return new


@dataclass
class LoraAdapter:
    target: str
    rank: int
    alpha: float
    A: np.ndarray = field(repr=False)
    B: np.ndarray = field(repr=False)

    @property
    def delta(self) -> np.ndarray:
        return (self.alpha / self.rank) * (self.B @ self.A)


def lora_adapters(m: VisionTransformer) -> list[LoraAdapter]:
    return [
        LoraAdapter(name, layer.lora_rank, layer.lora_alpha, layer.params["lora_A"], layer.params["lora_B"])
        for name, layer in m.lora_layers()
        if layer.has_lora
    ]


def lora_layer_count(d_in: int, d_out: int, r: int) -> int:
    return r * (d_in + d_out)


def vit_parameter_count(cfg: ModelConfig, class_token: bool = False) -> int:
    """Closed-form parameter count of the architecture (plain, no adapters)."""
    d, hdim = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
    tokens = cfg.num_tokens + (1 if class_token else 0)
    n = cfg.patch_dim * d + d  # patch embedding
    n += tokens * d + (d if class_token else 0)
    per_block = 2 * (2 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (d * hdim + hdim) + (hdim * d + d)
    n += cfg.num_blocks * per_block
    n += 2 * d  # final norm
    n += d * cfg.num_classes + cfg.num_classes
    return n


def lora_trainable_count(cfg: ModelConfig, r: int) -> int:
    """Adapters on patch embedding + every qkv, plus the classifier head."""
    d = cfg.embed_dim
    n = lora_layer_count(cfg.patch_dim, d, r)
    n += cfg.num_blocks * lora_layer_count(d, 3 * d, r)
    return n + d * cfg.num_classes + cfg.num_classes


# checkpoint container
#
# bytes 0..7   b"KFCKPT\x00\x01"
# bytes 8..15  little-endian uint64 header length L
# next L       UTF-8 JSON header: config, mode, key, normalization, lora,
#              tensors: [{name, shape, offset, nbytes}] (offsets from data start)
# rest         raw little-endian float32 arrays, in manifest order

CKPT_MAGIC = b"KFCKPT\x00\x01"


def save_checkpoint(m: VisionTransformer, path, extra: Optional[dict] = None) -> None:
    sd = m.state_dict()
    tensors, offset = [], 0
    for name, arr in sd.items():
        nbytes = arr.size * 4
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    lora = {name: {"rank": layer.lora_rank, "alpha": layer.lora_alpha} for name, layer in m.lora_layers() if layer.has_lora}
    header = {
        "format": "keyfort-checkpoint",
        "version": 1,
        "config": m.config.to_dict(),
        "mode": m.mode,
        "merged": m.merged,
        "key": m.key.to_dict() if m.key is not None else None,
        "normalization": {"mean": [float(v) for v in m.mean], "std": [float(v) for v in m.std]},
        "lora": lora,
        "tensors": tensors,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for arr in sd.values():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as f:
        if f.read(8) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a keyfort checkpoint")
        (hlen,) = struct.unpack("<Q", f.read(8))
        return json.loads(f.read(hlen))


def load_checkpoint(path) -> VisionTransformer:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a keyfort checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    data = memoryview(raw)[16 + hlen :]
    m = VisionTransformer(ModelConfig.from_dict(header["config"]))
    for name, spec in header["lora"].items():
        layer = dict(m.lora_layers())[name]
        layer.add_lora(spec["rank"], spec["alpha"], np.random.default_rng(0))
    targets = {name: (mod, local) for name, mod, local in m.named_parameters()}
    if set(targets) != {t["name"] for t in header["tensors"]}:
        raise ValueError(f"{path}: tensor manifest does not match the configured architecture")
    for t in header["tensors"]:
        if t["offset"] + t["nbytes"] > len(data):
            raise ValueError(f"{path}: truncated tensor data for {t['name']}")
        arr = np.frombuffer(data[t["offset"] : t["offset"] + t["nbytes"]], dtype="<f4").astype(DTYPE)
        mod, local = targets[t["name"]]
        if arr.size != mod.params[local].size:
            raise ValueError(f"{path}: {t['name']} has {arr.size} values, expected {mod.params[local].size}")
        mod.params[local] = arr.reshape(t["shape"])
    m.mode = header["mode"]
    m.merged = header.get("merged", False)
    m.key = Key.from_dict(header["key"]) if header["key"] else None
    m.set_normalization(header["normalization"]["mean"], header["normalization"]["std"])
    return m
