"""End-to-end networks: shared feature extractor plus classification or localization head."""
from __future__ import annotations

import torch
from torch import nn

from .config import ModelConfig
from .encoders import AudioEncoder, CrossModalFusion, VisualEncoder
from .heads import ClassificationHead, LocalizationHead, PyramidOutputs
from .maskedpred import MaskedPredictionModule, MaskedPredOutput
from .mixing import FeatureMixer, SingleFeatureMixer

# feature letter -> stream name used for masked-prediction modules and frame labels
STREAMS = {"C": "cross", "V": "visual", "A": "audio"}


class FeatureExtractor(nn.Module):
    """Frame-wise encoders, cross-modal fusion and one masked-prediction module per selected stream."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        feats = config.features
        f = config.f
        self.visual_encoder = VisualEncoder(config.D_v, f) if ("V" in feats or "C" in feats) else None
        self.audio_encoder = AudioEncoder(config.B, f, config.r) if ("A" in feats or "C" in feats) else None
        self.fusion = CrossModalFusion(f) if "C" in feats else None
        self.predictors = nn.ModuleDict(
            {
                STREAMS[x]: MaskedPredictionModule(
                    2 * f if x == "C" else f,
                    kernel_size=config.w,
                    n_blocks=config.N,
                    groups=config.groupnorm_groups,
                    n_layers=config.n_layers,
                    n_heads=config.n_heads,
                    attention_kind=config.attention_kind,
                    dropout=config.dropout,
                )
                for x in feats
            }
        )

    def encode(self, visual_raw: torch.Tensor, audio_raw: torch.Tensor) -> dict[str, torch.Tensor]:
        out = {}
        v = self.visual_encoder(visual_raw) if self.visual_encoder is not None else None
        a = self.audio_encoder(audio_raw) if self.audio_encoder is not None else None
        if v is not None:
            out["visual"] = v
        if a is not None:
            out["audio"] = a
        if self.fusion is not None:
            out["cross"] = self.fusion(v, a)
        return out

    def forward(self, visual_raw: torch.Tensor, audio_raw: torch.Tensor) -> dict[str, MaskedPredOutput]:
        encoded = self.encode(visual_raw, audio_raw)
        return {name: module(encoded[name]) for name, module in self.predictors.items()}

    @property
    def feature_dim(self) -> int:
        return sum(2 * self.config.f if x == "C" else self.config.f for x in self.config.features)


class ClassificationModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.extractor = FeatureExtractor(config)
        f = config.f
        if set(config.features) == {"C", "V", "A"}:
            self.mixer = FeatureMixer(f, config.L, config.n_heads, dropout=config.dropout)
            in_dim = 2 * f
        else:
            in_dim = self.extractor.feature_dim
            self.mixer = SingleFeatureMixer(in_dim, config.L, config.n_heads, dropout=config.dropout)
        self.head = ClassificationHead(in_dim, f, config.L, config.T_v, pooled=config.pooled)

    def mix(self, streams: dict[str, MaskedPredOutput]) -> list[torch.Tensor]:
        if isinstance(self.mixer, FeatureMixer):
            return self.mixer(
                streams["cross"].attended, streams["audio"].attended, streams["visual"].attended
            )
        x = torch.cat([streams[STREAMS[k]].attended for k in self.config.features], dim=-1)
        return self.mixer(x)

    def forward(self, visual_raw, audio_raw) -> tuple[torch.Tensor, dict[str, MaskedPredOutput]]:
        streams = self.extractor(visual_raw, audio_raw)
        return self.head(self.mix(streams)), streams


class LocalizationModel(nn.Module):
    """A, V, C outputs concatenated (no mixing stage) and fed to the pyramid head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.extractor = FeatureExtractor(config)
        self.head = LocalizationHead(self.extractor.feature_dim, n_heads=config.n_heads)

    def forward(self, visual_raw, audio_raw) -> tuple[PyramidOutputs, dict[str, MaskedPredOutput]]:
        streams = self.extractor(visual_raw, audio_raw)
        order = [x for x in ("A", "V", "C") if x in self.config.features]
        feats = torch.cat([streams[STREAMS[x]].attended for x in order], dim=-1)
        return self.head(feats), streams
