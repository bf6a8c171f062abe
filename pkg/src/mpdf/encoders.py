"""Frame-wise unimodal encoders and the stack-and-combine cross-modal fusion."""
from __future__ import annotations

import torch
from torch import nn


def _check_last_dim(x: torch.Tensor, expected: int, what: str) -> None:
    if x.shape[-1] != expected:
        raise ValueError(f"{what}: expected feature dimension {expected}, got {x.shape[-1]}")


class VisualEncoder(nn.Module):
    """Two-layer per-frame perceptron followed by a projection to ``f``.

    Every output frame depends on the matching input frame only.
    """

    def __init__(self, in_dim: int, f: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 2 * f
        self.in_dim = in_dim
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, hidden), nn.GELU()
        )
        self.proj = nn.Linear(hidden, f)

    def forward(self, visual_raw: torch.Tensor) -> torch.Tensor:
        _check_last_dim(visual_raw, self.in_dim, "visual input")
        return self.proj(self.mlp(visual_raw))


class AudioEncoder(nn.Module):
    """Per-step perceptron, mean-pooled over the ``r`` steps of each visual frame, projected to ``f``."""

    def __init__(self, n_bins: int, f: int, r: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 2 * f
        self.n_bins = n_bins
        self.r = r
        self.mlp = nn.Sequential(
            nn.Linear(n_bins, hidden), nn.GELU(), nn.Linear(hidden, hidden), nn.GELU()
        )
        self.proj = nn.Linear(hidden, f)

    def forward(self, audio_raw: torch.Tensor) -> torch.Tensor:
        _check_last_dim(audio_raw, self.n_bins, "audio input")
        *lead, T_a, _ = audio_raw.shape
        if T_a % self.r:
            raise ValueError(f"audio length {T_a} not divisible by r={self.r}")
        h = self.mlp(audio_raw)
        h = h.reshape(*lead, T_a // self.r, self.r, h.shape[-1]).mean(dim=-2)
        return self.proj(h)


class CrossModalFusion(nn.Module):
    """c' = [v, a]; m = Linear(c'); c = Linear_{2->1}(stack(m, c'))."""

    def __init__(self, f: int):
        super().__init__()
        self.f = f
        self.mix = nn.Linear(2 * f, 2 * f)
        self.combine = nn.Linear(2, 1)

    def forward(self, v: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        if v.shape != a.shape:
            raise ValueError(f"visual {tuple(v.shape)} and audio {tuple(a.shape)} shapes differ")
        _check_last_dim(v, self.f, "fusion input")
        c_prime = torch.cat([v, a], dim=-1)
        s = torch.stack([self.mix(c_prime), c_prime], dim=-1)
        return self.combine(s).squeeze(-1)
