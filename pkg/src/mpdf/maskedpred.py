"""Next-frame feature prediction with local convolutional cross-attention.

One :class:`MaskedPredictionModule` runs per stream (audio, visual, cross-modal):

    x --causal encoder--> E --causal decoder--> P_raw --shift--> P
    (P, E) --N conv-attention blocks--> O
"""
from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn

from .layers import (
    DecoderLayer,
    DepthwiseConv,
    EncoderLayer,
    FrameGroupNorm,
    causal_mask,
    sinusoidal_encoding,
)


class NonFiniteInput(ValueError):
    pass


class MaskedPredOutput(NamedTuple):
    attended: torch.Tensor  # O
    predicted: torch.Tensor  # P, shift-aligned
    actual: torch.Tensor  # E


class CausalEncoder(nn.Module):
    def __init__(self, d: int, n_layers: int = 3, n_heads: int = 4, ff_mult: int = 2, dropout: float = 0.0):
        super().__init__()
        self.d = d
        # Neither norm is affine: a learnable scale could shrink E towards a constant,
        # which makes every frame trivially predictable.
        self.in_norm = nn.LayerNorm(d, elementwise_affine=False)
        self.layers = nn.ModuleList(
            EncoderLayer(d, n_heads, ff_mult * d, dropout) for _ in range(n_layers)
        )
        self.out_norm = nn.LayerNorm(d, elementwise_affine=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise NonFiniteInput("causal encoder received non-finite input")
        T = x.shape[1]
        x = self.in_norm(x) + sinusoidal_encoding(T, self.d, dtype=x.dtype, device=x.device)
        mask = causal_mask(T, x.device)
        for layer in self.layers:
            x = layer(x, mask)
        return self.out_norm(x)


class CausalDecoder(nn.Module):
    """Consumes E as its own input sequence; row t predicts frame t+1 from frames <= t."""

    def __init__(self, d: int, n_layers: int = 3, n_heads: int = 4, ff_mult: int = 2, dropout: float = 0.0):
        super().__init__()
        self.d = d
        self.layers = nn.ModuleList(
            DecoderLayer(d, n_heads, ff_mult * d, dropout) for _ in range(n_layers)
        )
        self.out_norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, d)

    def forward(self, E: torch.Tensor) -> torch.Tensor:
        if E.shape[-1] != self.d:
            raise ValueError(f"decoder expects d={self.d}, got {E.shape[-1]}")
        mask = causal_mask(E.shape[1], E.device)
        h = E
        for layer in self.layers:
            h = layer(h, E, self_mask=mask, cross_mask=mask)
        return self.out(self.out_norm(h))


def shift_align(P_raw: torch.Tensor, E: torch.Tensor) -> torch.Tensor:
    """P[0] = E[0]; P[t] = P_raw[t-1]."""
    if P_raw.shape != E.shape:
        raise ValueError(f"shape mismatch {tuple(P_raw.shape)} vs {tuple(E.shape)}")
    return torch.cat([E[..., :1, :], P_raw[..., :-1, :]], dim=-2)


class ConvAttentionBlock(nn.Module):
    """Gated depthwise-conv window attention between predicted (P) and actual (E) frames.

    q = Linear(GN(P)), k = Conv_w(GN(E)), u = Conv_w'(GN(E)),
    out = GN(P + sigmoid(q * k / sqrt(d)) * u).
    """

    def __init__(self, d: int, kernel_size: int = 9, groups: int = 8):
        super().__init__()
        self.d = d
        self.norm_p = FrameGroupNorm(groups, d)
        self.norm_e = FrameGroupNorm(groups, d)
        self.query = nn.Linear(d, d)
        self.key = DepthwiseConv(d, kernel_size)
        self.value = DepthwiseConv(d, kernel_size)
        self.norm_out = FrameGroupNorm(groups, d)

    def gate(self, P: torch.Tensor, E: torch.Tensor) -> torch.Tensor:
        q = self.query(self.norm_p(P))
        k = self.key(self.norm_e(E))
        return torch.sigmoid(q * k / self.d**0.5)

    def forward(self, P: torch.Tensor, E: torch.Tensor) -> torch.Tensor:
        u = self.value(self.norm_e(E))
        return self.norm_out(P + self.gate(P, E) * u)


class ConvCrossAttention(nn.Module):
    def __init__(self, d: int, kernel_size: int = 9, n_blocks: int = 3, groups: int = 8):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel size w must be odd, got {kernel_size}")
        if d % groups:
            raise ValueError(f"GroupNorm groups {groups} must divide d={d}")
        self.kernel_size = kernel_size
        self.blocks = nn.ModuleList(ConvAttentionBlock(d, kernel_size, groups) for _ in range(n_blocks))

    @property
    def receptive_radius(self) -> int:
        return len(self.blocks) * (self.kernel_size - 1) // 2

    def forward(self, P: torch.Tensor, E: torch.Tensor) -> torch.Tensor:
        if P.shape != E.shape:
            raise ValueError(f"shape mismatch {tuple(P.shape)} vs {tuple(E.shape)}")
        for block in self.blocks:
            P = block(P, E)
        return P


class TransformerCrossAttention(nn.Module):
    """Ablation stand-in for the conv attention: full (non-windowed) decoder layers, query P, memory E."""

    def __init__(self, d: int, n_layers: int = 1, n_heads: int = 4, ff_mult: int = 2, dropout: float = 0.0):
        super().__init__()
        self.layers = nn.ModuleList(
            DecoderLayer(d, n_heads, ff_mult * d, dropout) for _ in range(n_layers)
        )
        self.out_norm = nn.LayerNorm(d)

    def forward(self, P: torch.Tensor, E: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            P = layer(P, E)
        return self.out_norm(P)


class MaskedPredictionModule(nn.Module):
    def __init__(
        self,
        d: int,
        kernel_size: int = 9,
        n_blocks: int = 3,
        groups: int = 8,
        n_layers: int = 3,
        n_heads: int = 4,
        attention_kind: str = "convolutional",
        dropout: float = 0.0,
    ):
        super().__init__()
        self.d = d
        self.encoder = CausalEncoder(d, n_layers, n_heads, dropout=dropout)
        self.decoder = CausalDecoder(d, n_layers, n_heads, dropout=dropout)
        if attention_kind == "convolutional":
            self.attention = ConvCrossAttention(d, kernel_size, n_blocks, groups)
        elif attention_kind in ("transformer-1", "transformer-3"):
            n = int(attention_kind.split("-")[1])
            self.attention = TransformerCrossAttention(d, n, n_heads, dropout=dropout)
        else:
            raise ValueError(f"unknown attention_kind {attention_kind!r}")

    def forward(self, x: torch.Tensor) -> MaskedPredOutput:
        E = self.encoder(x)
        P = shift_align(self.decoder(E), E)
        return MaskedPredOutput(self.attention(P, E), P, E)
