"""Dense float32 layers with hand-written reverse-mode gradients.

Each layer caches what its backward pass needs during ``forward`` and, in
``backward``, accumulates parameter gradients into ``self.grads`` and returns
the gradient w.r.t. its input. Arrays are plain ``numpy.ndarray``; a layer
never mutates its input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    def __init__(self, op: str, expected, got):
        super().__init__(f"{op}: expected {expected}, got {got}")
        self.op, self.expected, self.got = op, expected, got


class NonFiniteError(FloatingPointError):
    pass


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """float32 copy-free view of ``x``; rejects NaN/Inf."""
    arr = np.asarray(x, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return arr


def check_finite(x: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return x


class Module:
    """Parameter container. Child modules are discovered from attributes."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[tuple[str, "Module", str]]:
        """Yields (qualified name, owning module, local name)."""
        for mod_name, mod in self.named_modules():
            for local in mod.params:
                yield (f"{mod_name}.{local}" if mod_name else local), mod, local

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: mod.params[local] for name, mod, local in self.named_parameters()}

    def grad_dict(self) -> dict[str, np.ndarray]:
        return {name: mod.grads[local] for name, mod, local in self.named_parameters()}

    def zero_grad(self) -> None:
        for _, mod in self.named_modules():
            for k, p in mod.params.items():
                mod.grads[k] = np.zeros_like(p)

    def _accum(self, name: str, g: np.ndarray) -> None:
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = g.astype(self.params[name].dtype, copy=True)


class Linear(Module):
    """y = x W^T + b over the last axis, with an optional low-rank adapter.

    With an adapter attached: y = x (W + s B A)^T + b, s = alpha / r, computed
    as x W^T + s (x A^T) B^T so W itself is never touched.
    """

    def __init__(self, d_in: int, d_out: int, rng: Optional[np.random.Generator] = None, std: float = 0.02):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = (rng.standard_normal((d_out, d_in)) * std).astype(DTYPE)
        self.params["bias"] = np.zeros(d_out, dtype=DTYPE)
        self.lora_rank = 0
        self.lora_alpha = 0.0

    @property
    def has_lora(self) -> bool:
        return self.lora_rank > 0

    @property
    def lora_scaling(self) -> float:
        return self.lora_alpha / self.lora_rank if self.lora_rank else 0.0

    def add_lora(self, r: int, alpha: float, rng: np.random.Generator, std: float = 0.02) -> None:
        if self.has_lora:
            raise ValueError("adapter already attached")
        if r <= 0 or r > min(self.d_in, self.d_out):
            raise ValueError(f"rank r={r} must satisfy 0 < r <= min(d_in={self.d_in}, d_out={self.d_out})")
        self.lora_rank, self.lora_alpha = int(r), float(alpha)
        self.params["lora_A"] = (rng.standard_normal((r, self.d_in)) * std).astype(DTYPE)
        self.params["lora_B"] = np.zeros((self.d_out, r), dtype=DTYPE)

    def merge_lora(self) -> None:
        if not self.has_lora:
            raise ValueError("no adapter attached")
        A, B = self.params.pop("lora_A"), self.params.pop("lora_B")
        self.grads.pop("lora_A", None)
        self.grads.pop("lora_B", None)
        self.params["weight"] = (self.params["weight"] + DTYPE(self.lora_scaling) * (B @ A)).astype(DTYPE)
        self.lora_rank, self.lora_alpha = 0, 0.0

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.d_in:
            raise ShapeError("linear", f"last dim {self.d_in}", x.shape)
        self._x = x
        y = x @ self.params["weight"].T + self.params["bias"]
        if self.has_lora:
            self._xa = x @ self.params["lora_A"].T
            y = y + DTYPE(self.lora_scaling) * (self._xa @ self.params["lora_B"].T)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        x2 = x.reshape(-1, self.d_in)
        dy2 = dy.reshape(-1, self.d_out)
        self._accum("weight", dy2.T @ x2)
        self._accum("bias", dy2.sum(axis=0))
        dx = dy @ self.params["weight"]
        if self.has_lora:
            s = DTYPE(self.lora_scaling)
            xa2 = self._xa.reshape(-1, self.lora_rank)
            self._accum("lora_B", s * (dy2.T @ xa2))
            dxa = s * (dy @ self.params["lora_B"])
            self._accum("lora_A", dxa.reshape(-1, self.lora_rank).T @ x2)
            dx = dx + dxa @ self.params["lora_A"]
        return dx


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.dim, self.eps = dim, eps
        self.params["weight"] = np.ones(dim, dtype=DTYPE)
        self.params["bias"] = np.zeros(dim, dtype=DTYPE)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.dim:
            raise ShapeError("layer_norm", f"last dim {self.dim}", x.shape)
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * rstd
        self._xhat, self._rstd = xhat, rstd
        return xhat * self.params["weight"] + self.params["bias"]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, rstd = self._xhat, self._rstd
        self._accum("weight", (dy * xhat).reshape(-1, self.dim).sum(axis=0))
        self._accum("bias", dy.reshape(-1, self.dim).sum(axis=0))
        dxhat = dy * self.params["weight"]
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return (dxhat - m1 - xhat * m2) * rstd


_GELU_C = math.sqrt(2.0 / math.pi)


class GELU(Module):
    """tanh approximation of GELU."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        self._t = np.tanh(DTYPE(_GELU_C) * (x + DTYPE(0.044715) * (x * x * x)))
        return 0.5 * x * (1.0 + self._t)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x, t = self._x, self._t
        dinner = DTYPE(_GELU_C) * (1.0 + DTYPE(3 * 0.044715) * x * x)
        return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray, axis: int = -1) -> np.ndarray:
    return probs * (dprobs - (dprobs * probs).sum(axis=axis, keepdims=True))


class Softmax(Module):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._p = softmax(x)
        return self._p

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return softmax_backward(self._p, dy)


class MultiHeadSelfAttention(Module):
    """Self-attention over (N, T, D) with one fused qkv projection."""

    def __init__(self, dim: int, num_heads: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if dim % num_heads:
            raise ShapeError("attention", f"embed dim divisible by {num_heads} heads", dim)
        self.dim, self.num_heads = dim, num_heads
        self.head_dim = dim // num_heads
        self.scale = DTYPE(self.head_dim**-0.5)
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ShapeError("attention", f"(N, T, {self.dim})", x.shape)
        n, t, _ = x.shape
        h, dh = self.num_heads, self.head_dim
        qkv = self.qkv.forward(x).reshape(n, t, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]  # (N, h, T, dh)
        att = softmax((q @ k.transpose(0, 1, 3, 2)) * self.scale)
        out = att @ v
        self._q, self._k, self._v, self._att = q, k, v, att
        return self.proj.forward(out.transpose(0, 2, 1, 3).reshape(n, t, self.dim))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        n, t, _ = dy.shape
        h, dh = self.num_heads, self.head_dim
        q, k, v, att = self._q, self._k, self._v, self._att
        dout = self.proj.backward(dy).reshape(n, t, h, dh).transpose(0, 2, 1, 3)
        datt = dout @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dout
        ds = softmax_backward(att, datt) * self.scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(n, t, 3 * self.dim)
        return self.qkv.backward(dqkv)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.act = GELU()
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.fc2.forward(self.act.forward(self.fc1.forward(x)))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return self.fc1.backward(self.act.backward(self.fc2.backward(dy)))


class MeanPool(Module):
    """Mean over the token axis: (N, T, D) -> (N, D)."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3:
            raise ShapeError("mean_pool", "(N, T, D)", x.shape)
        self._t = x.shape[1]
        return x.mean(axis=1)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.repeat(dy[:, None, :] / DTYPE(self._t), self._t, axis=1)


def cross_entropy(logits: np.ndarray, labels: np.ndarray, smoothing: float = 0.0):
    """Per-example cross-entropy and the gradient of their *sum* w.r.t. logits.

    With smoothing s the target is (1 - s) * onehot + s / k.
    """
    if logits.ndim != 2:
        raise ShapeError("cross_entropy", "(N, k) logits", logits.shape)
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", f"labels of shape ({logits.shape[0]},)", labels.shape)
    n, k = logits.shape
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    target = np.full((n, k), smoothing / k, dtype=logits.dtype)
    target[np.arange(n), labels] += 1.0 - smoothing
    losses = -(target * logp).sum(axis=1)
    grad = np.exp(logp) - target
    return losses, grad


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    max_abs_error: float
    tolerance: float
    probes: int
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)
    message: str = ""


def grad_check(
    fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    point: np.ndarray,
    tolerance: float = 1e-3,
    h: float = 1e-3,
    probe_dtype=np.float64,
    max_probes: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare ``fn``'s analytic gradient with central differences.

    ``fn(x)`` returns ``(value, grad)``. The analytic gradient is taken at the
    float32 point; the probes ``fn(x +/- h e_i)`` are evaluated with
    ``probe_dtype`` inputs. The reported error is
    ``max_i |g_i - n_i| / max_i |n_i|`` over the probed coordinates.
    """
    point = np.asarray(point, dtype=DTYPE)
    _, g = fn(point.copy())
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    flat = point.astype(probe_dtype).reshape(-1)
    idx = np.arange(flat.size)
    if max_probes is not None and flat.size > max_probes:
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, size=max_probes, replace=False))
    num = np.empty(idx.size, dtype=np.float64)
    for j, i in enumerate(idx):
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        fp, _ = fn(xp.reshape(point.shape))
        fm, _ = fn(xm.reshape(point.shape))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            return GradCheckReport(False, math.inf, math.inf, tolerance, j, g[idx], num[:j],
                                   message=f"non-finite value while probing coordinate {i}")
        num[j] = (float(fp) - float(fm)) / (2 * h)
    ga = g[idx]
    if not np.all(np.isfinite(ga)):
        return GradCheckReport(False, math.inf, math.inf, tolerance, idx.size, ga, num,
                               message="analytic gradient is not finite")
    abs_err = float(np.max(np.abs(ga - num))) if idx.size else 0.0
    scale = float(np.max(np.abs(num))) if idx.size else 0.0
    rel = abs_err / scale if scale > 0 else (0.0 if abs_err == 0 else math.inf)
    return GradCheckReport(rel < tolerance, rel, abs_err, tolerance, int(idx.size), ga, num)
