"""Attention building blocks that expose attention maps and post-attention features."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{k}."))
        return out

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None


def _param(arr: np.ndarray, name: str) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _param(xavier(rng, d_in, d_out), "weight")
        self.bias = _param(np.zeros(d_out), "bias") if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = _param(np.ones(d), "gamma")
        self.beta = _param(np.zeros(d), "beta")

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class Conv1d(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, kernel: int = 3, stride: int = 1):
        self.weight = _param(xavier(rng, kernel * d_in, d_out, (kernel, d_in, d_out)), "weight")
        self.kernel, self.stride = kernel, stride

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, stride=self.stride, padding="same")


def sinusoidal_pos_emb(length: int, d: int) -> Tensor:
    """Fixed sinusoidal table; even columns carry sine, odd columns cosine."""
    if d % 2:
        raise ConfigError(f"positional embedding width must be even, got {d}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((length, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return Tensor(pe)


@dataclass
class AttentionTrace:
    """Per-layer taps of one transformer stack, ordered from layer 1 to layer l.

    ``maps`` are head-averaged attention maps (B, T_q, T_kv); ``logits`` the
    scaled per-head scores (B, H, T_q, T_kv) they came from; ``post_attention``
    the output-projection features (B, T_q, d).
    """

    maps: list[Tensor] = field(default_factory=list)
    logits: list[Tensor] = field(default_factory=list)
    post_attention: list[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return max(len(self.maps), len(self.post_attention))

    def maps_at(self, t: float = 1.0) -> list[Tensor]:
        """Head-averaged maps recomputed from the logits at softmax temperature ``t``."""
        if t == 1.0:
            return list(self.maps)
        return [T.mean(T.row_softmax(lg, t), axis=1) for lg in self.logits]


class MultiheadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ConfigError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.q_proj = Linear(d_model, d_model, rng)
        # key bias omitted: softmax rows are invariant to it
        self.k_proj = Linear(d_model, d_model, rng, bias=False)
        self.v_proj = Linear(d_model, d_model, rng)
        self.out_proj = Linear(d_model, d_model, rng)
        self.d_model, self.n_heads = d_model, n_heads
        self.d_k = d_model // n_heads

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, self.n_heads, self.d_k).transpose(0, 2, 1, 3)

    def __call__(self, q_src: Tensor, kv_src: Tensor):
        """Returns (output, head-averaged map, per-head logits)."""
        if q_src.shape[-1] != self.d_model or kv_src.shape[-1] != self.d_model:
            raise DimensionError(
                f"attention width {self.d_model} vs inputs {q_src.shape} and {kv_src.shape}"
            )
        unbatched = q_src.ndim == 2
        if unbatched:
            q_src, kv_src = q_src.reshape(1, *q_src.shape), kv_src.reshape(1, *kv_src.shape)
        b, tq, _ = q_src.shape
        q = self._split(self.q_proj(q_src))
        k = self._split(self.k_proj(kv_src))
        v = self._split(self.v_proj(kv_src))
        logits = (q * (1.0 / math.sqrt(self.d_k))) @ k.T
        attn = T.row_softmax(logits)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, tq, self.d_model)
        out = self.out_proj(ctx)
        amap = T.mean(attn, axis=1)
        if unbatched:
            out, amap, logits = out[0], amap[0], logits[0]
        return out, amap, logits


class TransformerLayer(Module):
    """Pre-norm layer; the residual stream follows the query input."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, ffn_mult: int = 4):
        self.norm_attn = LayerNorm(d_model)
        self.attn = MultiheadAttention(d_model, n_heads, rng)
        self.norm_ffn = LayerNorm(d_model)
        self.ffn_in = Linear(d_model, ffn_mult * d_model, rng)
        self.ffn_out = Linear(ffn_mult * d_model, d_model, rng)

    def __call__(self, x_q: Tensor, x_kv: Tensor | None = None):
        hq = self.norm_attn(x_q)
        hkv = hq if x_kv is None else self.norm_attn(x_kv)
        a, amap, logits = self.attn(hq, hkv)
        y = x_q + a
        y = y + self.ffn_out(T.relu(self.ffn_in(self.norm_ffn(y))))
        return y, (amap, logits, a)


class TransformerStack(Module):
    """``n_layers`` transformer layers. Cross-attention stacks reuse the same key/value source at every layer."""

    def __init__(self, d_model: int, n_heads: int, n_layers: int, rng: np.random.Generator, ffn_mult: int = 4):
        if n_layers < 1:
            raise ConfigError(f"a stack needs at least one layer, got {n_layers}")
        self.layers = [TransformerLayer(d_model, n_heads, rng, ffn_mult) for _ in range(n_layers)]

    def __call__(self, x_q: Tensor, x_kv: Tensor | None = None) -> tuple[Tensor, AttentionTrace]:
        trace = AttentionTrace()
        y = x_q
        for layer in self.layers:
            y, (amap, logits, post) = layer(y, x_kv)
            trace.maps.append(amap)
            trace.logits.append(logits)
            trace.post_attention.append(post)
        return y, trace
