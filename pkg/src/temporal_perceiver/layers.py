"""Parameterised building blocks on top of the autodiff engine."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Parameter container; attributes that are parameters, modules or lists
    of modules are discovered in assignment order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"parameter names differ (missing={missing[:3]}, unexpected={extra[:3]})")
        for name, p in own.items():
            if p.values.shape != state[name].shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.values.shape}")
            p.values[...] = state[name]


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = ad.uniform_init(rng, d_in, (d_in, d_out))
        self.bias = ad.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else ad.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, width: int):
        self.gamma = ad.parameter(np.ones(width))
        self.beta = ad.parameter(np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, width: int, hidden: int):
        self.fc1 = Linear(rng, width, hidden)
        self.fc2 = Linear(rng, hidden, width)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention over (B, L, C) inputs.

    Returns the projected output and the per-head probabilities
    (B, H, Lq, Lk) as a tensor so losses can act on them.
    """

    def __init__(self, rng: np.random.Generator, width: int, heads: int):
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(rng, width, width)
        self.k_proj = Linear(rng, width, width)
        self.v_proj = Linear(rng, width, width)
        self.out_proj = Linear(rng, width, width)

    def _split(self, x: Tensor) -> Tensor:
        b, length, c = x.shape
        h = self.heads
        return ad.transpose(ad.reshape(x, (b, length, h, c // h)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, memory: Tensor, key_mask: np.ndarray | None = None, key_pos=None, query_pos=None):
        b, lq, c = query.shape
        q = self._split(self.q_proj(query if query_pos is None else ad.add(query, query_pos)))
        keys = memory if key_pos is None else ad.add(memory, key_pos)
        k = self._split(self.k_proj(keys))
        v = self._split(self.v_proj(memory))
        logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(c // self.heads))
        mask = None if key_mask is None else key_mask[:, None, None, :]
        probs = ad.softmax(logits, mask)
        ctx = ad.matmul(probs, v)
        merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, lq, c))
        return self.out_proj(merged), probs


class AttentionBlock(Module):
    """Pre-norm self-attention, cross-attention and feed-forward sublayers,
    each wrapped in a residual connection."""

    def __init__(self, rng: np.random.Generator, width: int, heads: int, ffn_mult: int = 4):
        self.norm_self = LayerNorm(width)
        self.self_attn = MultiHeadAttention(rng, width, heads)
        self.norm_cross = LayerNorm(width)
        self.cross_attn = MultiHeadAttention(rng, width, heads)
        self.norm_ffn = LayerNorm(width)
        self.ffn = FeedForward(rng, width, ffn_mult * width)

    def __call__(self, x: Tensor, memory: Tensor, memory_mask: np.ndarray | None = None, memory_pos=None, query_pos=None):
        h = self.norm_self(x)
        sa, self_probs = self.self_attn(h, h)
        x = ad.add(x, sa)
        ca, cross_probs = self.cross_attn(self.norm_cross(x), memory, memory_mask, memory_pos, query_pos)
        x = ad.add(x, ca)
        x = ad.add(x, self.ffn(self.norm_ffn(x)))
        return x, self_probs, cross_probs
