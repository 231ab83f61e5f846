"""Secret-key block-wise pixel shuffling.

An image is tiled into non-overlapping P x P blocks. Every block is flattened
channel-major (all P*P pixels of channel 0, then channel 1, ...) into a vector
``b`` of length C*P*P, and the output block is ``b'[k] = b[perm[k]]`` with one
permutation shared by all blocks. The permutation is drawn by a Fisher-Yates
shuffle driven by SplitMix64, so a (seed, P, C) triple maps to the same key on
every platform.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

KEY_FORMAT_VERSION = 1
MASK64 = (1 << 64) - 1
MAX_PERM_LENGTH = 1 << 32  # perm entries are serialized as uint32


class InvalidKeyError(ValueError):
    """Invalid key, or a key that does not fit the image it is applied to."""


class KeySizeError(InvalidKeyError):
    pass


class BlockTilingError(ValueError):
    """Image height or width is not a multiple of the block size."""


class SplitMix64:
    """SplitMix64 generator (Steele, Lea & Flood 2014).

    state <- state + 0x9E3779B97F4A7C15
    z <- (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9
    z <- (z ^ (z >> 27)) * 0x94D049BB133111EB
    output z ^ (z >> 31)

    All arithmetic is mod 2**64.
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection: draws >= 2**64 - (2**64 % n) are redrawn."""
        if n <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n


def fisher_yates(n: int, rng: SplitMix64) -> list[int]:
    """Shuffle 0..n-1: for i = n-1 down to 1, swap i with rng.below(i + 1)."""
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def perm_crc32(perm: Sequence[int]) -> int:
    """CRC-32 over the little-endian uint32 encoding of ``perm``."""
    return zlib.crc32(np.asarray(perm, dtype="<u4").tobytes()) & 0xFFFFFFFF


@dataclass(frozen=True)
class Key:
    """A block size, a channel count and the shared in-block permutation."""

    block_size: int
    channels: int
    perm: tuple[int, ...]
    seed: Optional[int] = None
    version: int = KEY_FORMAT_VERSION
    checksum: int = field(default=-1, compare=False)

    def __post_init__(self):
        if self.block_size < 1 or self.channels < 1:
            raise InvalidKeyError(f"block_size and channels must be >= 1, got P={self.block_size}, C={self.channels}")
        perm = tuple(int(v) for v in self.perm)
        object.__setattr__(self, "perm", perm)
        n = self.channels * self.block_size**2
        if len(perm) != n:
            raise InvalidKeyError(f"perm has length {len(perm)}, expected C*P^2 = {n}")
        if sorted(perm) != list(range(n)):
            raise InvalidKeyError("perm is not a permutation of 0..C*P^2-1")
        crc = perm_crc32(perm)
        if self.checksum == -1:
            object.__setattr__(self, "checksum", crc)
        elif self.checksum != crc:
            raise InvalidKeyError(f"checksum mismatch: stored {self.checksum:#010x}, computed {crc:#010x}")

    @property
    def length(self) -> int:
        return len(self.perm)

    @property
    def perm_array(self) -> np.ndarray:
        return np.asarray(self.perm, dtype=np.intp)

    @property
    def inverse_perm(self) -> np.ndarray:
        return np.argsort(self.perm_array)

    def is_identity(self) -> bool:
        return all(i == v for i, v in enumerate(self.perm))

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "block_size": self.block_size,
            "channels": self.channels,
            "seed": self.seed,
            "perm": list(self.perm),
            "crc32": self.checksum,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "Key":
        if d.get("version") != KEY_FORMAT_VERSION:
            raise InvalidKeyError(f"unsupported key version {d.get('version')!r}")
        return cls(
            block_size=int(d["block_size"]),
            channels=int(d["channels"]),
            perm=tuple(d["perm"]),
            seed=d.get("seed"),
            version=d["version"],
            checksum=int(d["crc32"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "Key":
        return cls.from_dict(json.loads(Path(path).read_text()))


def generate_key(seed: int, block_size: int, channels: int) -> Key:
    if block_size < 1 or channels < 1:
        raise InvalidKeyError(f"block_size and channels must be >= 1, got P={block_size}, C={channels}")
    n = channels * block_size * block_size
    if n > MAX_PERM_LENGTH:
        raise KeySizeError(f"C*P^2 = {n} exceeds the uint32 index range")
    perm = fisher_yates(n, SplitMix64(seed))
    return Key(block_size=block_size, channels=channels, perm=tuple(perm), seed=seed & MASK64)


def identity_key(block_size: int, channels: int) -> Key:
    return Key(block_size, channels, tuple(range(channels * block_size * block_size)))


def _check(x: np.ndarray, key: Key) -> None:
    if x.ndim < 3:
        raise ValueError(f"expected (..., C, H, W) array, got shape {x.shape}")
    c, h, w = x.shape[-3:]
    if c != key.channels:
        raise InvalidKeyError(f"key is for {key.channels} channel(s), image has {c}")
    p = key.block_size
    if h % p or w % p:
        raise BlockTilingError(f"image {h}x{w} is not divisible by block size {p}")


def _apply_block_perm(x: np.ndarray, key: Key, index: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    _check(x, key)
    lead = x.shape[:-3]
    c, h, w = x.shape[-3:]
    p = key.block_size
    nh, nw = h // p, w // p
    # (..., C, nh, P, nw, P) -> (..., nh, nw, C, P, P) -> (..., nh, nw, C*P*P)
    blocks = x.reshape(*lead, c, nh, p, nw, p)
    k = len(lead)
    order = list(range(k)) + [k + 1, k + 3, k, k + 2, k + 4]
    flat = blocks.transpose(order).reshape(*lead, nh, nw, c * p * p)
    out = flat[..., index]
    out = out.reshape(*lead, nh, nw, c, p, p)
    back = list(range(k)) + [k + 2, k, k + 3, k + 1, k + 4]
    return np.ascontiguousarray(out.transpose(back).reshape(*lead, c, h, w))


def transform(x: np.ndarray, key: Key) -> np.ndarray:
    """Shuffle every P x P block of ``x`` (shape (..., C, H, W)) with ``key``."""
    return _apply_block_perm(x, key, key.perm_array)


def inverse_transform(x: np.ndarray, key: Key) -> np.ndarray:
    return _apply_block_perm(x, key, key.inverse_perm)


def backprop_through_transform(grad_out: np.ndarray, key: Key) -> np.ndarray:
    """Pull a gradient w.r.t. the shuffled image back to the plain image.

    The shuffle is a fixed permutation matrix, so its transpose is its inverse.
    """
    return _apply_block_perm(grad_out, key, key.inverse_perm)


def validate_image(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3 or min(x.shape) < 1:
        raise ValueError(f"image must be a non-empty (C, H, W) array, got shape {x.shape}")
    if not np.all((x >= 0) & (x <= 1)):
        raise ValueError("image values must lie in [0, 1]")
    return x
