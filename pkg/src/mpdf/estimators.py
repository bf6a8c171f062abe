"""scikit-learn compatible wrappers around the classification and localization pipelines.

``X`` is a sequence of :class:`~mpdf.synthdata.SyntheticSample` (frame labels and
segments are read from the samples) or a ``(visual, audio)`` pair of arrays shaped
``(n, T_v, D_v)`` and ``(n, r * T_v, B)``.
"""
from __future__ import annotations

import dataclasses

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig
from .evaluation import classification_report, evaluate_localization
from .trainer import Batch, fit, predict_proposals, predict_scores
from .validation import check_av_input


class _NextFramePredictionEstimator(BaseEstimator):
    _task: str = ""

    def __init__(
        self,
        f=32,
        w=9,
        N=3,
        L=3,
        r=4,
        T_v=64,
        D_v=48,
        B=64,
        groupnorm_groups=8,
        n_heads=4,
        n_layers=3,
        dropout=0.2,
        feature_set=("C", "V", "A"),
        attention_kind="convolutional",
        pooled=False,
        margin=1.0,
        contrastive_enabled=True,
        lambda_reg=2.0,
        lambda_rec=1.0,
        lambda_scls=0.1,
        focal_alpha=0.25,
        focal_gamma=2.0,
        lr=1e-3,
        batch_size=32,
        epochs=20,
        seed=0,
        score_threshold=0.1,
        pre_nms_topk=100,
        nms_iou=0.5,
    ):
        self.f = f
        self.w = w
        self.N = N
        self.L = L
        self.r = r
        self.T_v = T_v
        self.D_v = D_v
        self.B = B
        self.groupnorm_groups = groupnorm_groups
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.dropout = dropout
        self.feature_set = feature_set
        self.attention_kind = attention_kind
        self.pooled = pooled
        self.margin = margin
        self.contrastive_enabled = contrastive_enabled
        self.lambda_reg = lambda_reg
        self.lambda_rec = lambda_rec
        self.lambda_scls = lambda_scls
        self.focal_alpha = focal_alpha
        self.focal_gamma = focal_gamma
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.score_threshold = score_threshold
        self.pre_nms_topk = pre_nms_topk
        self.nms_iou = nms_iou

    def to_config(self) -> ModelConfig:
        return ModelConfig(**self.get_params())

    @classmethod
    def from_config(cls, config: ModelConfig):
        return cls(**{f.name: getattr(config, f.name) for f in dataclasses.fields(config)})

    def _validate(self, X, y=None, require_labels=False) -> Batch:
        return check_av_input(
            X, y, r=self.r, D_v=self.D_v, B=self.B, require_labels=require_labels, min_frames=self._min_frames()
        )

    def _min_frames(self) -> int:
        return 1

    def fit(self, X, y=None, X_val=None, y_val=None):
        config = self.to_config()
        train = self._validate(X, y, require_labels=True)
        held = self._validate(X_val, y_val, require_labels=True) if X_val is not None else None
        result = fit(self._task, config, train, held)
        self.model_ = result.model
        self.config_ = config
        self.history_ = result.log
        self.best_epoch_ = result.best_epoch
        self.n_features_in_ = config.D_v
        return self

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, self.config_, self._task, {"best_epoch": self.best_epoch_})

    @classmethod
    def load(cls, path):
        model, config, task, extra = load_checkpoint(path)
        if task != cls._task:
            raise ValueError(f"checkpoint holds a {task} model, not {cls._task}")
        est = cls.from_config(config)
        est.model_, est.config_ = model, config
        est.history_, est.best_epoch_ = [], extra.get("best_epoch", -1)
        est.n_features_in_ = config.D_v
        return est

    @torch.no_grad()
    def stream_features(self, X) -> list[dict[str, dict[str, np.ndarray]]]:
        """Per sample and stream: attended (O), predicted (P) and actual (E) frame features."""
        check_is_fitted(self, "model_")
        data = self._validate(X)
        self.model_.eval()
        dtype = next(self.model_.parameters()).dtype
        streams = self.model_.extractor(data.visual.to(dtype), data.audio.to(dtype))
        out = []
        for i in range(len(data)):
            out.append(
                {
                    name: {
                        "attended": o.attended[i].double().numpy(),
                        "predicted": o.predicted[i].double().numpy(),
                        "actual": o.actual[i].double().numpy(),
                    }
                    for name, o in streams.items()
                }
            )
        return out


class NextFrameDeepfakeClassifier(ClassifierMixin, _NextFramePredictionEstimator):
    """Video-level real/fake classifier built on next-frame feature prediction."""

    _task = "classification"

    def _min_frames(self) -> int:
        return 1 if self.pooled else 16

    def fit(self, X, y=None, X_val=None, y_val=None):
        super().fit(X, y, X_val, y_val)
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X) -> np.ndarray:
        p = self.predict_proba(X)[:, 1]
        p = np.clip(p, 1e-15, 1 - 1e-15)
        return np.log(p / (1 - p))

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        data = self._validate(X)
        p = predict_scores(self.model_, data)
        return np.column_stack([1 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def score(self, X, y=None, sample_weight=None) -> float:
        """Held-out ROC AUC."""
        data = self._validate(X, y, require_labels=True)
        return classification_report(self.predict_proba(X)[:, 1], data.labels.numpy())["AUC"]


class NextFrameDeepfakeLocalizer(_NextFramePredictionEstimator):
    """Temporal localization of manipulated segments; ``predict`` returns NMS-filtered proposals."""

    _task = "localization"

    def _min_frames(self) -> int:
        return 32

    def predict(self, X) -> list[list]:
        check_is_fitted(self, "model_")
        data = self._validate(X)
        props = predict_proposals(self.model_, data, self.config_)
        return [props[sid] for sid in data.sample_ids]

    def score(self, X, y=None) -> float:
        """Mean AP over IoU thresholds 0.5 / 0.75 / 0.95."""
        data = self._validate(X, y, require_labels=True)
        props = predict_proposals(self.model_, data, self.config_)
        return evaluate_localization(props, dict(zip(data.sample_ids, data.segments))).map_mean
