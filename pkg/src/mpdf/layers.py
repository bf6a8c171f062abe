"""Small transformer and normalization layers shared across the model.

Masked attention keys contribute exact zeros, so outputs at frame t are
bit-identical under perturbations of masked frames. Setting ``record_weights``
switches to an explicit softmax that keeps the attention weights.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def causal_mask(T: int, device=None) -> torch.Tensor:
    """Boolean (T, T) mask, True where attention is blocked (key index > query index)."""
    return torch.triu(torch.ones(T, T, dtype=torch.bool, device=device), diagonal=1)


def sinusoidal_encoding(T: int, d: int, dtype=torch.float32, device=None) -> torch.Tensor:
    pos = torch.arange(T, dtype=torch.float64, device=device)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64, device=device)
    freq = torch.exp(-math.log(10000.0) * i / d)
    pe = torch.zeros(T, d, dtype=torch.float64, device=device)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq[: d // 2])
    return pe.to(dtype)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.record_weights = False
        self.last_weights: torch.Tensor | None = None

    def forward(self, query, key, value, mask: torch.Tensor | None = None):
        B, Tq, _ = query.shape
        Tk = key.shape[1]
        h, dh = self.n_heads, self.d_model // self.n_heads
        q = self.q_proj(query).view(B, Tq, h, dh).transpose(1, 2)
        k = self.k_proj(key).view(B, Tk, h, dh).transpose(1, 2)
        v = self.v_proj(value).view(B, Tk, h, dh).transpose(1, 2)
        if self.record_weights:
            scores = q @ k.transpose(-2, -1) / math.sqrt(dh)
            if mask is not None:
                scores = scores.masked_fill(mask, float("-inf"))
            weights = torch.softmax(scores, dim=-1)
            self.last_weights = weights.detach()
            out = weights @ v
        else:
            # fused kernel; masked keys still contribute exact zeros
            out = F.scaled_dot_product_attention(q, k, v, attn_mask=None if mask is None else ~mask)
        out = out.transpose(1, 2).reshape(B, Tq, self.d_model)
        return self.out_proj(out)


class FeedForward(nn.Sequential):
    def __init__(self, d_model: int, d_ff: int, dropout: float = 0.0):
        super().__init__(
            nn.Linear(d_model, d_ff), nn.GELU(), nn.Dropout(dropout), nn.Linear(d_ff, d_model)
        )


class EncoderLayer(nn.Module):
    """Pre-norm transformer encoder layer; stacks add their own final LayerNorm."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.ff = FeedForward(d_model, d_ff, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask=None):
        h = self.norm1(x)
        x = x + self.drop(self.self_attn(h, h, h, mask))
        return x + self.drop(self.ff(self.norm2(x)))


class DecoderLayer(nn.Module):
    """Pre-norm transformer decoder layer: self-attention, cross-attention, feed-forward."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.ff = FeedForward(d_model, d_ff, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, memory, self_mask=None, cross_mask=None):
        h = self.norm1(x)
        x = x + self.drop(self.self_attn(h, h, h, self_mask))
        x = x + self.drop(self.cross_attn(self.norm2(x), memory, memory, cross_mask))
        return x + self.drop(self.ff(self.norm3(x)))


class FrameGroupNorm(nn.Module):
    """GroupNorm over channel groups computed independently at every frame.

    Input is (batch, T, C). Statistics never mix frames, unlike ``nn.GroupNorm``
    on a (batch, C, T) tensor, which would also pool over time.
    """

    def __init__(self, num_groups: int, num_channels: int, eps: float = 1e-5):
        super().__init__()
        if num_channels % num_groups:
            raise ValueError(f"{num_groups} groups do not divide {num_channels} channels")
        self.num_groups = num_groups
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))

    def forward(self, x):
        *lead, C = x.shape
        g = x.reshape(*lead, self.num_groups, C // self.num_groups)
        g = g - g.mean(dim=-1, keepdim=True)
        # explicit mean of squares; Tensor.var is slow for short reduction dims on CPU
        var = (g * g).mean(dim=-1, keepdim=True)
        g = g * torch.rsqrt(var + self.eps)
        return g.reshape(*lead, C) * self.weight + self.bias


class DepthwiseConv(nn.Module):
    """Depthwise temporal convolution on (batch, T, C) with symmetric zero padding."""

    def __init__(self, channels: int, kernel_size: int):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        self.conv = nn.Conv1d(
            channels, channels, kernel_size, padding=kernel_size // 2, groups=channels
        )

    def forward(self, x):
        return self.conv(x.transpose(1, 2)).transpose(1, 2)


def conv_out_len(T: int, stride: int = 2) -> int:
    """Output length of a k=3, padding=1 convolution with the given stride."""
    return -(-T // stride)


def max_pool_to(x: torch.Tensor, length: int) -> torch.Tensor:
    """Temporal max-pool (batch, T, C) down to `length` frames."""
    return F.adaptive_max_pool1d(x.transpose(1, 2), length).transpose(1, 2)
