"""Training objectives: frame-level margin contrastive loss, the classification
objective (BCE + mean contrastive) and the localization objective
(focal + 2 * IoU + 1 * reconstruction + 0.1 * video focal + mean contrastive)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .heads import LevelTargets, PyramidOutputs

LAMBDA_REG = 2.0
LAMBDA_REC = 1.0
LAMBDA_SCLS = 0.1


@dataclass
class LossBreakdown:
    total: torch.Tensor
    components: dict[str, torch.Tensor] = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        out = {"total": float(self.total.detach())}
        out.update({k: float(v.detach()) for k, v in self.components.items()})
        return out


def contrastive_frame_loss(
    P: torch.Tensor,
    E: torch.Tensor,
    frame_labels: torch.Tensor,
    margin: float = 1.0,
    eps: float = 1e-6,
    center: bool = True,
) -> torch.Tensor:
    """Mean over frames of D^2 (real) or max(0, m - D)^2 (fake).

    D_t = ||P_t - E_t|| / (sqrt(d) * s), where s^2 is the temporal variance of the
    sample-specific part of E, averaged over channels. With ``center`` and a batch of
    two or more sequences, the sample-specific part is E minus its batch mean at each
    frame. Measuring the error against how much E actually moves with the input keeps
    two degenerate encoders from scoring well: a constant E and an E that only encodes
    position.
    """
    if P.shape != E.shape:
        raise ValueError(f"shape mismatch {tuple(P.shape)} vs {tuple(E.shape)}")
    if P.shape[-2] == 0:
        raise ValueError("empty sequence")
    if margin <= 0:
        raise ValueError("margin must be positive")
    content = E - E.mean(dim=0, keepdim=True) if center and E.dim() == 3 and E.shape[0] > 1 else E
    spread = content.var(dim=-2, unbiased=False, keepdim=True).mean(dim=-1) + eps
    d2 = ((P - E) ** 2).mean(dim=-1) / spread
    labels = frame_labels.to(d2.dtype).expand_as(d2)
    # sqrt has an infinite derivative at 0; route zero distances around it
    pos = d2 > 0
    dist = torch.where(pos, torch.sqrt(torch.where(pos, d2, torch.ones_like(d2))), torch.zeros_like(d2))
    per_frame = (1 - labels) * d2 + labels * torch.clamp(margin - dist, min=0.0) ** 2
    return per_frame.mean()


def bce_loss(logit: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logit, label.to(logit.dtype))


def focal_loss(
    logit: torch.Tensor, target: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0, reduction: str = "sum"
) -> torch.Tensor:
    target = target.to(logit.dtype)
    p = torch.sigmoid(logit)
    ce = F.binary_cross_entropy_with_logits(logit, target, reduction="none")
    p_t = p * target + (1 - p) * (1 - target)
    loss = ce * (1 - p_t) ** gamma
    if alpha >= 0:
        loss = (alpha * target + (1 - alpha) * (1 - target)) * loss
    if reduction == "sum":
        return loss.sum()
    if reduction == "mean":
        return loss.mean()
    return loss


def segment_iou_tensor(s1, e1, s2, e2) -> torch.Tensor:
    inter = torch.clamp(torch.minimum(e1, e2) - torch.maximum(s1, s2), min=0.0)
    union = (e1 - s1) + (e2 - s2) - inter
    return inter / union.clamp(min=1e-8)


def iou_reg_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean 1 - IoU over rows of (start, end) segment pairs."""
    if pred.numel() == 0:
        return pred.sum() * 0.0
    iou = segment_iou_tensor(pred[..., 0], pred[..., 1], target[..., 0], target[..., 1])
    return (1.0 - iou).mean()


def reconstruction_loss(features: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(reconstructed, features)


def mean_contrastive(terms: Mapping[str, torch.Tensor] | Sequence[torch.Tensor]) -> torch.Tensor | float:
    vals = list(terms.values()) if isinstance(terms, Mapping) else list(terms)
    if not vals:
        return 0.0
    return sum(vals) / len(vals)


def _contrast_components(contrast: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    names = {"audio": "contrast_a", "visual": "contrast_v", "cross": "contrast_av"}
    return {names.get(k, k): v for k, v in contrast.items()}


def total_cls_loss(
    logit: torch.Tensor, label: torch.Tensor, contrast: Mapping[str, torch.Tensor]
) -> LossBreakdown:
    bce = bce_loss(logit, label)
    total = bce + mean_contrastive(contrast)
    return LossBreakdown(total, {"bce": bce, **_contrast_components(contrast)})


def stack_targets(targets: Sequence[Sequence[LevelTargets]], dtype=torch.float32):
    """Batch per-sample level targets into per-level tensors (cls, reg, mask)."""
    n_levels = len(targets[0])
    out = []
    for level in range(n_levels):
        cls = torch.as_tensor(np.stack([t[level].cls for t in targets]), dtype=dtype)
        reg = torch.as_tensor(np.stack([t[level].reg for t in targets]), dtype=dtype)
        mask = torch.as_tensor(np.stack([t[level].mask for t in targets]))
        out.append((cls, reg, mask))
    return out


def total_reg_loss(
    outputs: PyramidOutputs,
    targets: Sequence[Sequence[LevelTargets]],
    video_labels: torch.Tensor,
    contrast: Mapping[str, torch.Tensor],
    alpha: float = 0.25,
    gamma: float = 2.0,
    lambda_reg: float = LAMBDA_REG,
    lambda_rec: float = LAMBDA_REC,
    lambda_scls: float = LAMBDA_SCLS,
) -> LossBreakdown:
    dtype = outputs.features.dtype
    stacked = stack_targets(targets, dtype)
    n_pos = sum(int(mask.sum()) for _, _, mask in stacked)
    norm = max(n_pos, 1)

    cls_u = sum(
        focal_loss(logits, cls, alpha, gamma, "sum") for logits, (cls, _, _) in zip(outputs.cls_logits, stacked)
    ) / norm

    pred_off = torch.cat([off[mask] for off, (_, _, mask) in zip(outputs.reg_offsets, stacked)])
    tgt_off = torch.cat([reg[mask] for _, reg, mask in stacked])
    if n_pos:
        # both segments share the position centre, so IoU can be taken in offset space
        zero = torch.zeros_like(pred_off[:, 0])
        reg_u = iou_reg_loss(
            torch.stack([zero - pred_off[:, 0], pred_off[:, 1]], dim=-1),
            torch.stack([zero - tgt_off[:, 0], tgt_off[:, 1]], dim=-1),
        )
    else:
        reg_u = torch.zeros((), dtype=dtype)

    rec_u = reconstruction_loss(outputs.features, outputs.reconstructed)
    scls_u = focal_loss(outputs.video_logit, video_labels, alpha, gamma, "mean")

    total = cls_u + lambda_reg * reg_u + lambda_rec * rec_u + lambda_scls * scls_u + mean_contrastive(contrast)
    comps = {"cls_U": cls_u, "reg_U": reg_u, "rec_U": rec_u, "scls_U": scls_u, **_contrast_components(contrast)}
    return LossBreakdown(total, comps)
