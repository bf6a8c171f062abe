"""Model / training hyperparameters and their YAML representation."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

FEATURES = ("C", "V", "A")
ATTENTION_KINDS = ("convolutional", "transformer-1", "transformer-3")


@dataclass
class ModelConfig:
    # architecture
    f: int = 32
    w: int = 9
    N: int = 3
    L: int = 3
    r: int = 4
    T_v: int = 64
    D_v: int = 48
    B: int = 64
    groupnorm_groups: int = 8
    n_heads: int = 4
    n_layers: int = 3
    dropout: float = 0.2
    feature_set: tuple[str, ...] = FEATURES
    attention_kind: str = "convolutional"
    pooled: bool = False
    # losses
    margin: float = 1.0
    contrastive_enabled: bool = True
    lambda_reg: float = 2.0
    lambda_rec: float = 1.0
    lambda_scls: float = 0.1
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    # optimisation
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    # proposal decoding
    score_threshold: float = 0.1
    pre_nms_topk: int = 100
    nms_iou: float = 0.5

    def __post_init__(self):
        self.feature_set = tuple(self.feature_set)
        self.validate()

    def validate(self) -> None:
        if self.w % 2 == 0 or self.w < 1:
            raise ValueError(f"kernel size w must be a positive odd integer, got {self.w}")
        for d in (self.f, 2 * self.f):
            if d % self.groupnorm_groups:
                raise ValueError(f"groupnorm_groups={self.groupnorm_groups} must divide f and 2f")
        if not self.feature_set or any(x not in FEATURES for x in self.feature_set):
            raise ValueError(f"feature_set must be a non-empty subset of {FEATURES}, got {self.feature_set}")
        if len(set(self.feature_set)) != len(self.feature_set):
            raise ValueError("feature_set has duplicates")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ValueError(f"attention_kind must be one of {ATTENTION_KINDS}")
        if self.N < 1 or self.L < 1:
            raise ValueError("N and L must be >= 1")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.f % 4:
            raise ValueError("f must be divisible by 4")

    @property
    def features(self) -> tuple[str, ...]:
        """Selected features in canonical C, V, A order."""
        return tuple(x for x in FEATURES if x in self.feature_set)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["feature_set"] = list(self.feature_set)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelConfig":
        flat = _flatten(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(flat) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**flat)

    def replace(self, **overrides) -> "ModelConfig":
        return dataclasses.replace(self, **overrides)


def _flatten(d: Mapping[str, Any]) -> dict[str, Any]:
    # config files may group keys in sections (model:, loss:, train:); section names are dropped
    out: dict[str, Any] = {}
    for k, v in d.items():
        if isinstance(v, Mapping):
            out.update(_flatten(v))
        else:
            out[k] = v
    return out


def load_config_file(path: str | Path) -> dict[str, Any]:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, Mapping):
        raise ValueError(f"{path}: expected a mapping at top level")
    return dict(data)


def load_model_config(path: str | Path | None, **overrides) -> ModelConfig:
    """Read a YAML config; every section except ``generator`` and ``dataset`` holds ModelConfig keys."""
    data = load_config_file(path) if path else {}
    data.pop("generator", None)
    data.pop("dataset", None)
    flat = _flatten(data)
    flat.update({k: v for k, v in overrides.items() if v is not None})
    return ModelConfig.from_dict(flat)
