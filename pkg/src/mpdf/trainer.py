"""Training loops, prediction, ablation grids and gradient verification."""
from __future__ import annotations

import copy
import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .config import ModelConfig
from .evaluation import classification_report, evaluate_localization, nms
from .heads import SegmentProposal, assign_targets, decode_proposals
from .losses import LossBreakdown, contrastive_frame_loss, total_cls_loss, total_reg_loss
from .maskedpred import NonFiniteInput
from .model import ClassificationModel, LocalizationModel
from .synthdata import DatasetManifest, SyntheticSample

logger = logging.getLogger(__name__)

LOSS_COLUMNS = {
    "classification": ["total", "bce", "contrast_a", "contrast_v", "contrast_av"],
    "localization": ["total", "cls_U", "reg_U", "rec_U", "scls_U", "contrast_a", "contrast_v", "contrast_av"],
}
METRIC_COLUMNS = {
    "classification": ["ACC", "AP", "AUC"],
    "localization": ["AP@0.5", "AP@0.75", "AP@0.95", "mAP"],
}
SELECTION_METRIC = {"classification": "AUC", "localization": "mAP"}


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, loss: float, what: str = "loss"):
        super().__init__(f"non-finite {what} {loss} at epoch {epoch}, step {step}")
        self.epoch, self.step, self.loss = epoch, step, loss


def deterministic_mode() -> bool:
    return os.environ.get("MPDF_DETERMINISTIC", "0") == "1"


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic_mode():
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    visual: torch.Tensor
    audio: torch.Tensor
    labels: torch.Tensor
    frame_labels: dict[str, torch.Tensor]
    segments: list[list[tuple[int, int]]]
    sample_ids: list[str]

    def __len__(self) -> int:
        return self.visual.shape[0]

    def index(self, idx) -> "Batch":
        idx = np.asarray(idx)
        t = torch.as_tensor(idx, dtype=torch.long)
        return Batch(
            self.visual[t],
            self.audio[t],
            self.labels[t],
            {k: v[t] for k, v in self.frame_labels.items()},
            [self.segments[i] for i in idx],
            [self.sample_ids[i] for i in idx],
        )


def stack_samples(samples: Sequence[SyntheticSample], dtype=torch.float32) -> Batch:
    if not samples:
        raise ValueError("no samples")
    frame = [s.modality_frame_labels() for s in samples]
    return Batch(
        visual=torch.as_tensor(np.stack([s.visual_raw for s in samples]), dtype=dtype),
        audio=torch.as_tensor(np.stack([s.audio_raw for s in samples]), dtype=dtype),
        labels=torch.as_tensor([s.label for s in samples], dtype=dtype),
        frame_labels={
            k: torch.as_tensor(np.stack([fl[k] for fl in frame]), dtype=dtype) for k in ("audio", "visual", "cross")
        },
        segments=[list(s.segments) for s in samples],
        sample_ids=[s.sample_id for s in samples],
    )


def balanced_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of batches with equal real/fake counts (the smaller class is cycled)."""
    labels = np.asarray(labels).astype(int)
    n = len(labels)
    n_steps = max(1, math.ceil(n / batch_size))
    real, fake = np.flatnonzero(labels == 0), np.flatnonzero(labels == 1)
    if len(real) == 0 or len(fake) == 0:
        perm = rng.permutation(n)
        return [perm[i * batch_size : (i + 1) * batch_size] for i in range(n_steps)]
    half = batch_size // 2

    def stream(idx, k):
        reps = math.ceil(k / len(idx))
        return np.concatenate([rng.permutation(idx) for _ in range(reps)])[:k]

    r_all = stream(real, n_steps * half)
    f_all = stream(fake, n_steps * (batch_size - half))
    out = []
    for i in range(n_steps):
        b = np.concatenate([r_all[i * half : (i + 1) * half], f_all[i * (batch_size - half) : (i + 1) * (batch_size - half)]])
        out.append(rng.permutation(b))
    return out


# ---------------------------------------------------------------------------
# losses for one batch


def contrast_terms(streams, batch: Batch, config: ModelConfig) -> dict[str, torch.Tensor]:
    if not config.contrastive_enabled:
        return {}
    return {
        name: contrastive_frame_loss(out.predicted, out.actual, batch.frame_labels[name], config.margin)
        for name, out in streams.items()
    }


def classification_loss(model: ClassificationModel, batch: Batch, config: ModelConfig) -> LossBreakdown:
    logit, streams = model(batch.visual, batch.audio)
    return total_cls_loss(logit, batch.labels, contrast_terms(streams, batch, config))


def localization_loss(model: LocalizationModel, batch: Batch, config: ModelConfig) -> LossBreakdown:
    outputs, streams = model(batch.visual, batch.audio)
    T = batch.visual.shape[1]
    targets = [assign_targets(segs, T) for segs in batch.segments]
    return total_reg_loss(
        outputs,
        targets,
        batch.labels,
        contrast_terms(streams, batch, config),
        alpha=config.focal_alpha,
        gamma=config.focal_gamma,
        lambda_reg=config.lambda_reg,
        lambda_rec=config.lambda_rec,
        lambda_scls=config.lambda_scls,
    )


TASK_LOSS = {"classification": classification_loss, "localization": localization_loss}
TASK_MODEL = {"classification": ClassificationModel, "localization": LocalizationModel}


# ---------------------------------------------------------------------------
# prediction


@torch.no_grad()
def predict_scores(model: ClassificationModel, data: Batch, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(data), batch_size):
        b = data.index(np.arange(i, min(i + batch_size, len(data))))
        logit, _ = model(b.visual, b.audio)
        out.append(torch.sigmoid(logit).double().numpy())
    return np.concatenate(out)


@torch.no_grad()
def predict_proposals(
    model: LocalizationModel, data: Batch, config: ModelConfig, batch_size: int = 64
) -> dict[str, list[SegmentProposal]]:
    model.eval()
    out = {}
    for i in range(0, len(data), batch_size):
        b = data.index(np.arange(i, min(i + batch_size, len(data))))
        outputs, _ = model(b.visual, b.audio)
        for j, sid in enumerate(b.sample_ids):
            props = decode_proposals(outputs, config.score_threshold, config.pre_nms_topk, batch_index=j)
            out[sid] = nms(props, config.nms_iou)
    return out


def evaluate_model(model, task: str, data: Batch, config: ModelConfig) -> dict[str, float]:
    if task == "classification":
        return classification_report(predict_scores(model, data), data.labels.numpy())
    proposals = predict_proposals(model, data, config)
    gts = dict(zip(data.sample_ids, data.segments))
    return evaluate_localization(proposals, gts).as_dict()


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: torch.nn.Module
    config: ModelConfig
    task: str
    log: list[dict[str, float]] = field(default_factory=list)
    best_metrics: dict[str, float] = field(default_factory=dict)
    best_epoch: int = -1
    checkpoint_path: Path | None = None


def fit(
    task: str,
    config: ModelConfig,
    train: Sequence[SyntheticSample] | Batch,
    held_out: Sequence[SyntheticSample] | Batch | None = None,
    dtype=torch.float32,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Adam training with real/fake-balanced batches; keeps the best held-out checkpoint."""
    if task not in TASK_MODEL:
        raise ValueError(f"unknown task {task!r}")
    seed_everything(config.seed)
    model = TASK_MODEL[task](config).to(dtype)
    train_b = train if isinstance(train, Batch) else stack_samples(train, dtype)
    held_b = held_out if held_out is None or isinstance(held_out, Batch) else stack_samples(held_out, dtype)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    loss_fn = TASK_LOSS[task]
    sel = SELECTION_METRIC[task]

    result = TrainResult(model=model, config=config, task=task)
    best_state, best_score = None, -math.inf
    for epoch in range(config.epochs):
        model.train()
        sums: dict[str, float] = {}
        batches = balanced_batches(train_b.labels.numpy(), config.batch_size, rng)
        for step, idx in enumerate(batches):
            try:
                loss = loss_fn(model, train_b.index(idx), config)
            except NonFiniteInput:
                raise TrainingDiverged(epoch, step, math.nan, "activations, loss") from None
            val = float(loss.total.detach())
            if not math.isfinite(val):
                raise TrainingDiverged(epoch, step, val)
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            # a blown-up step shows as non-finite weights before the next loss does
            if not all(torch.isfinite(p).all() for p in model.parameters()):
                raise TrainingDiverged(epoch, step, val, "parameters after a loss of")
            for k, v in loss.as_floats().items():
                sums[k] = sums.get(k, 0.0) + v
        row = {"epoch": epoch, **{k: v / len(batches) for k, v in sums.items()}}
        if held_b is not None:
            row.update(evaluate_model(model, task, held_b, config))
            score = row.get(sel, -math.inf)
            if not math.isnan(score) and score > best_score:
                best_score, best_state = score, copy.deepcopy(model.state_dict())
                result.best_epoch, result.best_metrics = epoch, {k: row[k] for k in METRIC_COLUMNS[task] if k in row}
        result.log.append(row)
        logger.info("epoch %d: %s", epoch, {k: round(v, 4) for k, v in row.items() if k != "epoch"})
        if on_epoch is not None:
            on_epoch(row)
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result


def write_log(rows: Sequence[Mapping[str, float]], path: str | Path, task: str) -> None:
    cols = ["epoch"] + LOSS_COLUMNS[task] + METRIC_COLUMNS[task]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({c: row.get(c, "") for c in cols})


def _held_out_split(manifest: DatasetManifest) -> str:
    names = {e.split for e in manifest.entries}
    for name in ("test", "val"):
        if name in names:
            return name
    raise ValueError("manifest has no test/val split")


def _train_from_manifest(task: str, config: ModelConfig, manifest: DatasetManifest, out_dir) -> TrainResult:
    train = manifest.load_split("train")
    held = manifest.load_split(_held_out_split(manifest))
    if not train:
        raise ValueError("manifest has no train split")
    if task == "classification" and len({s.label for s in train}) < 2:
        raise ValueError("training split must contain both classes")
    result = fit(task, config, train, held)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint_path = out / "model.ckpt"
        save_checkpoint(result.checkpoint_path, result.model, config, task,
                        {"best_epoch": result.best_epoch, "best_metrics": result.best_metrics})
        write_log(result.log, out / "metrics.csv", task)
    return result


def train_classifier(config: ModelConfig, manifest: DatasetManifest, out_dir=None) -> TrainResult:
    return _train_from_manifest("classification", config, manifest, out_dir)


def train_localizer(config: ModelConfig, manifest: DatasetManifest, out_dir=None) -> TrainResult:
    return _train_from_manifest("localization", config, manifest, out_dir)


# ---------------------------------------------------------------------------
# ablation

KERNEL_GRID = [{"w": w} for w in (1, 3, 5, 7, 9, 11, 13, 15)]
DEPTH_GRID = [{"N": n} for n in (2, 3, 4, 5)]
ATTENTION_GRID = [
    {"attention_kind": "transformer-1", "N": 1},
    {"attention_kind": "transformer-3", "N": 3},
    {"attention_kind": "convolutional", "w": 9, "N": 3},
]
FEATURE_GRID = [
    {"feature_set": ("C",)},
    {"feature_set": ("V",)},
    {"feature_set": ("A",)},
    {"feature_set": ("V", "A")},
    {"feature_set": ("C", "V", "A"), "contrastive_enabled": False},
    {"feature_set": ("C", "V", "A"), "contrastive_enabled": True},
]
GRIDS = {"kernel": KERNEL_GRID, "depth": DEPTH_GRID, "attention": ATTENTION_GRID, "feature": FEATURE_GRID}


def _describe(overrides: Mapping) -> dict[str, str]:
    return {k: "+".join(v) if isinstance(v, (tuple, list)) else str(v) for k, v in overrides.items()}


def run_ablation(
    base_config: ModelConfig,
    grid: Iterable[Mapping],
    train: Sequence[SyntheticSample] | Batch,
    held_out: Sequence[SyntheticSample] | Batch,
    task: str = "classification",
    seeds: Sequence[int] | None = None,
    out_csv: str | Path | None = None,
) -> list[dict]:
    """Train/evaluate each grid cell with shared seeds; metrics are per-seed medians."""
    grid = [dict(g) for g in grid]
    seeds = list(seeds) if seeds is not None else [base_config.seed]
    train_b = train if isinstance(train, Batch) else stack_samples(train)
    held_b = held_out if isinstance(held_out, Batch) else stack_samples(held_out)
    rows = []
    for overrides in grid:
        per_seed = []
        for seed in seeds:
            cfg = base_config.replace(**overrides, seed=seed)
            res = fit(task, cfg, train_b, held_b)
            per_seed.append(res.best_metrics)
        metrics = {k: float(np.median([m[k] for m in per_seed])) for k in METRIC_COLUMNS[task]}
        rows.append({**_describe(overrides), **metrics, "seeds": len(seeds)})
    if out_csv is not None:
        write_ablation_csv(rows, out_csv)
    return rows


def write_ablation_csv(rows: Sequence[Mapping], path: str | Path) -> None:
    cols: list[str] = []
    for row in rows:
        cols += [k for k in row if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# gradient check


def tiny_config(**overrides) -> ModelConfig:
    base = dict(f=8, T_v=8, D_v=6, B=5, r=2, w=3, N=2, L=2, n_layers=1, groupnorm_groups=2, n_heads=2, pooled=True)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_batch(config: ModelConfig, n: int = 2, seed: int = 0, dtype=torch.float64) -> Batch:
    g = np.random.default_rng(seed)
    T = config.T_v
    samples = []
    for i in range(n):
        segs = [] if i % 2 == 0 else [(T // 4, T // 2 + 1)]
        samples.append(
            SyntheticSample(
                visual_raw=g.standard_normal((T, config.D_v)),
                audio_raw=g.standard_normal((T * config.r, config.B)),
                label=int(bool(segs)),
                modality_flags=(1, 1) if segs else (0, 0),
                segments=segs,
                sample_id=f"s{i}",
                r=config.r,
            )
        )
    return stack_samples(samples, dtype)


def grad_check(
    config: ModelConfig | None = None,
    epsilon: float = 1e-5,
    task: str = "classification",
    batch: Batch | None = None,
    model: torch.nn.Module | None = None,
    loss_fn: Callable | None = None,
    max_entries_per_param: int = 4,
    seed: int = 0,
) -> dict[str, float]:
    """Central finite differences vs autograd on the total loss, in double precision.

    Returns the worst relative error per parameter group (top-level submodule),
    with relative error |g_fd - g_ad| / max(|g_fd|, |g_ad|, 1e-6 * max(1, |L|)).
    The floor tracks the loss L because central-difference roundoff grows with
    it (about 1e-16 |L| / epsilon); smaller gradients are noise at this epsilon.
    """
    torch.manual_seed(seed)
    if config is None:
        config = tiny_config(T_v=32 if task == "localization" else 8)
    if model is None:
        model = TASK_MODEL[task](config)
    model = model.double()
    model.eval()
    if batch is None:
        batch = tiny_batch(config)
    if loss_fn is None:
        base_fn = TASK_LOSS[task]

        def loss_fn(m):
            return base_fn(m, batch, config).total

    model.zero_grad()
    loss = loss_fn(model)
    loss.backward()
    floor = 1e-6 * max(1.0, abs(loss.item()))
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.grad is None:
                continue
            group = name.split(".")[0] if not name.startswith("extractor.") else ".".join(name.split(".")[:3])
            flat = p.view(-1)
            grad = p.grad.view(-1)
            picks = rng.choice(flat.numel(), size=min(max_entries_per_param, flat.numel()), replace=False)
            for i in picks:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = loss_fn(model).item()
                flat[i] = orig - epsilon
                down = loss_fn(model).item()
                flat[i] = orig
                fd = (up - down) / (2 * epsilon)
                ad = grad[i].item()
                rel = abs(fd - ad) / max(abs(fd), abs(ad), floor)
                worst[group] = max(worst.get(group, 0.0), rel)
    return worst
