"""Classification head and a reconstruction + feature-pyramid localization head."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .layers import EncoderLayer, conv_out_len, max_pool_to

N_PYRAMID_LEVELS = 5


# ---------------------------------------------------------------------------
# classification


class ClassificationHead(nn.Module):
    """Per-level Linear(d -> f), concat over levels, Linear(Lf -> 2f), four stride-2
    conv blocks with channels [2f, f, f/2, f/4], flatten, Linear(128), Linear(1).

    With ``pooled=True`` each level is max-pooled to ``pool_len`` frames first,
    which makes the head accept any sequence length.
    """

    def __init__(
        self,
        in_dim: int,
        f: int,
        n_levels: int,
        seq_len: int,
        pooled: bool = False,
        pool_len: int = 16,
    ):
        super().__init__()
        if f % 4:
            raise ValueError(f"f={f} must be divisible by 4")
        self.pooled = pooled
        self.pool_len = pool_len
        self.seq_len = seq_len
        length = pool_len if pooled else seq_len
        if length < 16 and not pooled:
            raise ValueError(f"sequence length {length} too short for four stride-2 stages (need >= 16)")
        self.level_proj = nn.ModuleList(nn.Linear(in_dim, f) for _ in range(n_levels))
        self.channel_proj = nn.Linear(n_levels * f, 2 * f)
        chans = [2 * f, 2 * f, f, f // 2, f // 4]
        self.convs = nn.ModuleList(
            nn.Conv1d(chans[i], chans[i + 1], 3, stride=2, padding=1) for i in range(4)
        )
        for _ in range(4):
            length = conv_out_len(length)
        self.flat_len = length
        self.fc1 = nn.Linear(chans[-1] * length, 128)
        self.fc2 = nn.Linear(128, 1)

    def forward(self, z_levels: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(z_levels) != len(self.level_proj):
            raise ValueError(f"expected {len(self.level_proj)} levels, got {len(z_levels)}")
        T = z_levels[0].shape[1]
        if not self.pooled and T != self.seq_len:
            raise ValueError(f"head built for T={self.seq_len}, got T={T}; use pooled=True")
        xs = [proj(z) for proj, z in zip(self.level_proj, z_levels)]
        if self.pooled:
            xs = [max_pool_to(x, self.pool_len) for x in xs]
        x = self.channel_proj(torch.cat(xs, dim=-1)).transpose(1, 2)
        for conv in self.convs:
            x = F.relu(conv(x))
        x = F.relu(self.fc1(x.flatten(1)))
        return self.fc2(x).squeeze(-1)


# ---------------------------------------------------------------------------
# localization


@dataclass
class PyramidOutputs:
    cls_logits: list[torch.Tensor]  # per level (batch, T_l)
    reg_offsets: list[torch.Tensor]  # per level (batch, T_l, 2), >= 0
    video_logit: torch.Tensor  # (batch,)
    features: torch.Tensor  # F, (batch, T, D)
    reconstructed: torch.Tensor  # F-hat, (batch, T, D)

    @property
    def level_lengths(self) -> list[int]:
        return [c.shape[1] for c in self.cls_logits]

    @property
    def seq_len(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class SegmentProposal:
    start: float
    end: float
    score: float


def pyramid_lengths(T: int, n_levels: int = N_PYRAMID_LEVELS) -> list[int]:
    return [-(-T // 2**level) for level in range(n_levels)]


def _conv(d_in, d_out, stride=1):
    return nn.Conv1d(d_in, d_out, 3, stride=stride, padding=1)


class LocalizationHead(nn.Module):
    """Simplified stand-in for a reconstruction-augmented temporal detector.

    1. reconstruction branch: two stride-2 convs then two nearest-upsample convs -> F-hat;
    2. fusion: Linear([F, F-hat, |F - F-hat|]) then one full transformer encoder layer;
    3. pyramid: level 0 is the fused sequence, levels 1..4 come from stride-2 convs;
    4. shared conv towers give per-position fake logits and softplus boundary offsets.
    """

    def __init__(self, in_dim: int, n_levels: int = N_PYRAMID_LEVELS, n_heads: int = 4, prior_prob: float = 0.01):
        super().__init__()
        D = in_dim
        self.n_levels = n_levels
        self.rec_enc = nn.ModuleList([_conv(D, D, 2), _conv(D, D, 2)])
        self.rec_dec = nn.ModuleList([_conv(D, D), _conv(D, D)])
        self.fuse = nn.Linear(3 * D, D)
        self.transformer = EncoderLayer(D, n_heads if D % n_heads == 0 else 1, 2 * D)
        self.down = nn.ModuleList(_conv(D, D, 2) for _ in range(n_levels - 1))
        self.cls_tower = nn.ModuleList([_conv(D, D), _conv(D, D)])
        self.reg_tower = nn.ModuleList([_conv(D, D), _conv(D, D)])
        self.cls_out = _conv(D, 1)
        self.reg_out = _conv(D, 2)
        nn.init.constant_(self.cls_out.bias, -math.log((1 - prior_prob) / prior_prob))

    def reconstruct(self, feats: torch.Tensor) -> torch.Tensor:
        T = feats.shape[1]
        x = feats.transpose(1, 2)
        for conv in self.rec_enc:
            x = F.relu(conv(x))
        for i, conv in enumerate(self.rec_dec):
            x = conv(F.interpolate(x, scale_factor=2, mode="nearest"))
            if i < len(self.rec_dec) - 1:
                x = F.relu(x)
        return x[..., :T].transpose(1, 2)

    @staticmethod
    def _tower(layers, x):
        for conv in layers:
            x = F.relu(conv(x))
        return x

    def forward(self, feats: torch.Tensor) -> PyramidOutputs:
        T = feats.shape[1]
        if T < 2 ** (self.n_levels - 1) * 2:
            raise ValueError(f"T={T} too short for a {self.n_levels}-level pyramid (need >= 32)")
        rec = self.reconstruct(feats)
        fused = self.fuse(torch.cat([feats, rec, (feats - rec).abs()], dim=-1))
        fused = self.transformer(fused)
        x = fused.transpose(1, 2)
        levels = [x]
        for conv in self.down:
            x = F.relu(conv(x))
            levels.append(x)
        cls_logits, reg_offsets = [], []
        for lvl in levels:
            cls_logits.append(self.cls_out(self._tower(self.cls_tower, lvl)).squeeze(1))
            reg = F.softplus(self.reg_out(self._tower(self.reg_tower, lvl)))
            reg_offsets.append(reg.transpose(1, 2))
        video_logit = cls_logits[0].max(dim=1).values
        return PyramidOutputs(cls_logits, reg_offsets, video_logit, feats, rec)


# ---------------------------------------------------------------------------
# label assignment and decoding


@dataclass
class LevelTargets:
    cls: np.ndarray  # (T_l,) {0, 1}
    reg: np.ndarray  # (T_l, 2) offsets in stride units, zero for negatives
    mask: np.ndarray  # (T_l,) bool, regression positions


def position_centers(length: int, level: int) -> np.ndarray:
    return (np.arange(length) + 0.5) * 2**level


def assign_targets(
    segments: Sequence[Sequence[float]], T: int, n_levels: int = N_PYRAMID_LEVELS
) -> list[LevelTargets]:
    """A position is positive iff its centre (i + 0.5) * 2^l lies strictly inside a GT segment."""
    segs = sorted((float(s), float(e)) for s, e in segments)
    for (s0, e0), (s1, _) in zip(segs, segs[1:]):
        if s1 < e0:
            raise ValueError(f"overlapping ground-truth segments: {segs}")
    out = []
    for level, length in enumerate(pyramid_lengths(T, n_levels)):
        stride = 2**level
        c = position_centers(length, level)
        cls = np.zeros(length, dtype=np.float32)
        reg = np.zeros((length, 2), dtype=np.float32)
        for s, e in segs:
            inside = (c > s) & (c < e)
            cls[inside] = 1.0
            reg[inside, 0] = (c[inside] - s) / stride
            reg[inside, 1] = (e - c[inside]) / stride
        out.append(LevelTargets(cls, reg, cls > 0))
    return out


def decode_offsets(level: int, index, d_start, d_end, T: float | None = None):
    """Decode stride-unit offsets at pyramid position (level, index) to frame boundaries."""
    stride = 2**level
    c = (np.asarray(index) + 0.5) * stride
    start = c - np.asarray(d_start) * stride
    end = c + np.asarray(d_end) * stride
    if T is not None:
        start = np.clip(start, 0.0, T)
        end = np.clip(end, 0.0, T)
    return start, end


def decode_proposals(
    outputs: PyramidOutputs,
    score_threshold: float = 0.1,
    pre_nms_topk: int = 100,
    batch_index: int = 0,
) -> list[SegmentProposal]:
    if not 0.0 < score_threshold < 1.0:
        raise ValueError(f"score_threshold must lie in (0, 1), got {score_threshold}")
    T = outputs.seq_len
    proposals: dict[tuple[float, float], float] = {}
    for level, (logits, offsets) in enumerate(zip(outputs.cls_logits, outputs.reg_offsets)):
        scores = torch.sigmoid(logits[batch_index].detach()).double().cpu().numpy()
        offs = offsets[batch_index].detach().double().cpu().numpy()
        keep = np.flatnonzero(scores > score_threshold)
        if keep.size == 0:
            continue
        keep = keep[np.argsort(-scores[keep], kind="stable")][:pre_nms_topk]
        starts, ends = decode_offsets(level, keep, offs[keep, 0], offs[keep, 1], T)
        for s, e, sc in zip(starts, ends, scores[keep]):
            if e <= s:
                continue
            key = (float(s), float(e))
            proposals[key] = max(proposals.get(key, 0.0), float(sc))
    return [SegmentProposal(s, e, sc) for (s, e), sc in proposals.items()]
