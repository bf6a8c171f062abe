"""Intra-/cross-modal feature mixing by alternating cross-attention."""
from __future__ import annotations

import torch
from torch import nn

from .layers import DecoderLayer, EncoderLayer


class FeatureMixer(nn.Module):
    """L levels; each level attends z to [V, A] then to [A, V]. Returns all L level outputs."""

    def __init__(self, f: int, n_levels: int = 3, n_heads: int = 4, ff_mult: int = 4, dropout: float = 0.0):
        super().__init__()
        if n_levels < 1:
            raise ValueError("need at least one mixing level")
        self.f = f
        d = 2 * f
        self.levels = nn.ModuleList(
            nn.ModuleList(
                [DecoderLayer(d, n_heads, ff_mult * f, dropout), DecoderLayer(d, n_heads, ff_mult * f, dropout)]
            )
            for _ in range(n_levels)
        )
        self.out_norms = nn.ModuleList(nn.LayerNorm(d) for _ in range(n_levels))

    def forward(self, C: torch.Tensor, A: torch.Tensor, V: torch.Tensor) -> list[torch.Tensor]:
        if C.shape[-1] != 2 * self.f or A.shape[-1] != self.f or V.shape[-1] != self.f:
            raise ValueError(
                f"expected C(.., {2 * self.f}), A/V(.., {self.f}); got "
                f"{tuple(C.shape)}, {tuple(A.shape)}, {tuple(V.shape)}"
            )
        if not (C.shape[:-1] == A.shape[:-1] == V.shape[:-1]):
            raise ValueError("C, A, V disagree on batch/time dimensions")
        mem_va = torch.cat([V, A], dim=-1)
        mem_av = torch.cat([A, V], dim=-1)
        z = C
        outs = []
        for (first, second), norm in zip(self.levels, self.out_norms):
            z = second(first(z, mem_va), mem_av)
            outs.append(norm(z))
        return outs


class SingleFeatureMixer(nn.Module):
    """Single-feature ablation path: 2 encoder layers per level in place of the two decoders."""

    def __init__(self, d: int, n_levels: int = 3, n_heads: int = 4, ff_mult: int = 2, dropout: float = 0.0):
        super().__init__()
        self.levels = nn.ModuleList(
            nn.ModuleList([EncoderLayer(d, n_heads, ff_mult * d, dropout), EncoderLayer(d, n_heads, ff_mult * d, dropout)])
            for _ in range(n_levels)
        )
        self.out_norms = nn.ModuleList(nn.LayerNorm(d) for _ in range(n_levels))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        outs = []
        for (first, second), norm in zip(self.levels, self.out_norms):
            x = second(first(x))
            outs.append(norm(x))
        return outs
