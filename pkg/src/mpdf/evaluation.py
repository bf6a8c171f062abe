"""Classification metrics (ACC / AP / AUC) and temporal localization metrics
(segment IoU, greedy NMS, AP at IoU thresholds, mAP)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .heads import SegmentProposal

IOU_THRESHOLDS = (0.5, 0.75, 0.95)


def segment_iou(a: Sequence[float], b: Sequence[float]) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def _as_proposal(p) -> SegmentProposal:
    if isinstance(p, SegmentProposal):
        return p
    if isinstance(p, Mapping):
        return SegmentProposal(float(p["start"]), float(p["end"]), float(p["score"]))
    s, e, sc = p
    return SegmentProposal(float(s), float(e), float(sc))


def nms(proposals: Sequence, iou_thresh: float = 0.5) -> list[SegmentProposal]:
    """Greedy NMS; ties broken by earlier start, then shorter length."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    props = sorted(
        (_as_proposal(p) for p in proposals), key=lambda p: (-p.score, p.start, p.end - p.start)
    )
    kept: list[SegmentProposal] = []
    for p in props:
        if all(segment_iou((p.start, p.end), (k.start, k.end)) < iou_thresh for k in kept):
            kept.append(p)
    return kept


def interpolated_ap(tp: np.ndarray, n_positive: int) -> float:
    """All-point interpolated area under the precision-recall curve of a ranked hit list."""
    if n_positive == 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=float)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_positive
    precision = ctp / (ctp + cfp)
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def ap_at_iou(
    proposals_by_sample: Mapping[str, Sequence],
    gts_by_sample: Mapping[str, Sequence[Sequence[float]]],
    thresh: float,
) -> float:
    """Global score ranking, greedy one-to-one matching per sample, all-point interpolated AP."""
    n_pos = sum(len(g) for g in gts_by_sample.values())
    ranked = []
    for sid in sorted(proposals_by_sample):
        for p in proposals_by_sample[sid]:
            p = _as_proposal(p)
            ranked.append((-p.score, sid, p.start, p.end))
    ranked.sort()
    matched = {sid: np.zeros(len(g), dtype=bool) for sid, g in gts_by_sample.items()}
    tp = np.zeros(len(ranked))
    for i, (_, sid, s, e) in enumerate(ranked):
        gts = gts_by_sample.get(sid, [])
        if not len(gts):
            continue
        ious = np.array([segment_iou((s, e), g) for g in gts])
        for j in np.argsort(-ious, kind="stable"):
            if ious[j] < thresh:
                break
            if matched[sid][j]:
                continue
            matched[sid][j] = True
            tp[i] = 1.0
            break
    return interpolated_ap(tp, n_pos)


@dataclass
class LocalizationResult:
    ap: dict[float, float] = field(default_factory=dict)

    @property
    def map_mean(self) -> float:
        return float(np.mean(list(self.ap.values()))) if self.ap else 0.0

    def as_dict(self) -> dict[str, float]:
        out = {f"AP@{t:g}": v for t, v in self.ap.items()}
        out["mAP"] = self.map_mean
        return out


def evaluate_localization(
    proposals_by_sample: Mapping[str, Sequence],
    gts_by_sample: Mapping[str, Sequence[Sequence[float]]],
    thresholds: Sequence[float] = IOU_THRESHOLDS,
) -> LocalizationResult:
    return LocalizationResult({t: ap_at_iou(proposals_by_sample, gts_by_sample, t) for t in thresholds})


# ---------------------------------------------------------------------------
# video-level classification metrics


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).astype(int).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    return scores, labels


def roc_auc(scores, labels) -> float:
    """AUC as the Mann-Whitney rank statistic, ties at midrank."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined when only one class is present")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-wise AP: sum over distinct thresholds of (recall gain) * precision."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    scores, labels = _check_binary(scores, labels)
    return float(np.mean((scores >= threshold).astype(int) == labels))


def classification_report(scores, labels) -> dict[str, float]:
    out = {"ACC": accuracy(scores, labels), "AP": average_precision(scores, labels)}
    try:
        out["AUC"] = roc_auc(scores, labels)
    except ValueError:
        out["AUC"] = float("nan")
    return out


# ---------------------------------------------------------------------------
# proposal dumps: one JSON object per line {"sample_id", "start", "end", "score"}


def write_proposals(path, proposals_by_sample: Mapping[str, Sequence]) -> None:
    with open(path, "w") as fh:
        for sid in sorted(proposals_by_sample):
            for p in proposals_by_sample[sid]:
                p = _as_proposal(p)
                fh.write(json.dumps({"sample_id": sid, "start": p.start, "end": p.end, "score": p.score}) + "\n")


def read_proposals(path) -> dict[str, list[SegmentProposal]]:
    out: dict[str, list[SegmentProposal]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                prop = SegmentProposal(float(rec["start"]), float(rec["end"]), float(rec["score"]))
                sid = str(rec["sample_id"])
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed proposal record ({exc})") from None
            out.setdefault(sid, []).append(prop)
    return out
