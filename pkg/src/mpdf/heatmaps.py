"""Per-frame |P - E| maps of a trained model and their real/fake separation.

A frame the model predicts well has a small difference between predicted (P) and
actual (E) features; manipulated frames should stand out. Frame 0 is excluded from
every statistic because P[0] is copied from E[0].
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .synthdata import SyntheticSample
from .trainer import Batch, stack_samples

STREAM_NAMES = ("audio", "visual", "cross")
# which streams a category manipulates, by modality flags (audio_fake, visual_fake)
_MANIPULATED = {(1, 0): ("audio",), (0, 1): ("visual",), (1, 1): ("audio", "visual")}


@torch.no_grad()
def difference_maps(model, data: Sequence[SyntheticSample] | Batch, batch_size: int = 64) -> list[dict[str, np.ndarray]]:
    """|P - E| per sample and stream, each a (T, d) array."""
    batch = data if isinstance(data, Batch) else stack_samples(data)
    model.eval()
    dtype = next(model.parameters()).dtype
    out: list[dict[str, np.ndarray]] = []
    for i in range(0, len(batch), batch_size):
        b = batch.index(np.arange(i, min(i + batch_size, len(batch))))
        streams = model.extractor(b.visual.to(dtype), b.audio.to(dtype))
        diffs = {k: (o.predicted - o.actual).abs().double().numpy() for k, o in streams.items()}
        for j in range(len(b)):
            out.append({k: v[j] for k, v in diffs.items()})
    return out


def frame_profile(diff: np.ndarray) -> np.ndarray:
    """Mean over channels: one value per frame."""
    return diff.mean(axis=-1)


def real_reference(maps: Sequence[Mapping[str, np.ndarray]]) -> dict[str, float]:
    """Mean |P - E| over frames 1.. of real samples, per stream."""
    ref = {}
    for k in maps[0]:
        ref[k] = float(np.mean([frame_profile(m[k])[1:].mean() for m in maps]))
    return ref


def separation(
    diff: np.ndarray, frame_labels: np.ndarray, reference: float | None = None
) -> float:
    """Mean difference over fake frames divided by the mean over real frames.

    Fully fake sequences have no real frames; ``reference`` (the real-sample mean)
    is used as the denominator then.
    """
    prof = frame_profile(diff)[1:]
    labels = np.asarray(frame_labels)[1:].astype(bool)
    if not labels.any():
        raise ValueError("no fake frames")
    if labels.all():
        if reference is None:
            raise ValueError("sequence has no real frames and no reference was given")
        denom = reference
    else:
        denom = prof[~labels].mean()
    return float(prof[labels].mean() / max(denom, 1e-12))


def manipulated_streams(sample: SyntheticSample) -> tuple[str, ...]:
    return _MANIPULATED.get(tuple(sample.modality_flags), ())


def sample_separation(
    sample: SyntheticSample, maps: Mapping[str, np.ndarray], reference: Mapping[str, float]
) -> dict[str, float]:
    """Separation in every stream, plus ``manipulated``: the ratio of the averaged
    manipulated-modality maps."""
    fl = sample.frame_labels()
    out = {k: separation(maps[k], fl, reference.get(k)) for k in maps}
    names = [k for k in manipulated_streams(sample) if k in maps]
    if names:
        combined = np.mean([frame_profile(maps[k]) for k in names], axis=0)[:, None]
        ref = float(np.mean([reference[k] for k in names]))
        out["manipulated"] = separation(combined, fl, ref)
    return out


def _write_grid_csv(path: Path, grid: np.ndarray) -> None:
    np.savetxt(path, grid, delimiter=",", fmt="%.6f")


def export_heatmaps(
    model,
    samples: Sequence[SyntheticSample],
    out_dir: str | Path,
    reference: Mapping[str, float] | None = None,
    vmax: float = 0.3,
    png: bool = True,
) -> dict:
    """Write per-sample heatmaps (CSV and PNG) and a summary.json.

    Layout: ``<out>/<sample_id>/<stream>.csv`` holds the (T, d) grid,
    ``frame_means.csv`` the per-frame means of every stream, ``heatmap.png`` the
    three grids on a shared colour scale [0, vmax].
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    maps = difference_maps(model, samples)
    summary: dict = {"vmax": vmax, "samples": {}}
    for sample, m in zip(samples, maps):
        d = out / sample.sample_id
        d.mkdir(exist_ok=True)
        for k, grid in m.items():
            _write_grid_csv(d / f"{k}.csv", grid)
        names = [k for k in STREAM_NAMES if k in m]
        with open(d / "frame_means.csv", "w") as fh:
            fh.write("frame,label," + ",".join(names) + "\n")
            labels = sample.frame_labels()
            profiles = {k: frame_profile(m[k]) for k in names}
            for t in range(len(labels)):
                fh.write(f"{t},{int(labels[t])}," + ",".join(f"{profiles[k][t]:.6f}" for k in names) + "\n")
        entry = {
            "label": sample.label,
            "segments": [list(s) for s in sample.segments],
            "mean_diff": {k: float(frame_profile(m[k])[1:].mean()) for k in names},
        }
        if sample.label and (reference is not None or not sample.frame_labels()[1:].all()):
            entry["separation"] = sample_separation(sample, m, reference or {})
        summary["samples"][sample.sample_id] = entry
        if png:
            _plot(d / "heatmap.png", m, names, sample, vmax)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def _plot(path: Path, maps: Mapping[str, np.ndarray], names: Sequence[str], sample: SyntheticSample, vmax: float) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(len(names), 1, figsize=(8, 2.2 * len(names)), squeeze=False)
    for ax, k in zip(axes[:, 0], names):
        im = ax.imshow(maps[k].T, aspect="auto", cmap="viridis", vmin=0.0, vmax=vmax, interpolation="nearest")
        for s, e in sample.segments:
            ax.axvspan(s - 0.5, e - 0.5, color="red", alpha=0.15)
        ax.set_ylabel(k)
    axes[-1, 0].set_xlabel("frame")
    fig.colorbar(im, ax=axes[:, 0].tolist(), label="|P - E|")
    fig.suptitle(sample.sample_id)
    fig.savefig(path, dpi=80)
    plt.close(fig)
