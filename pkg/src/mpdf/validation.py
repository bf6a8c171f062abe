"""Input validation helpers for the estimator API."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .synthdata import SyntheticSample


def check_av_input(
    X,
    y=None,
    *,
    r: int,
    D_v: int,
    B: int,
    require_labels: bool = False,
    min_frames: int = 1,
    dtype=torch.float32,
):
    """Normalise estimator input to a :class:`~mpdf.trainer.Batch`.

    Accepts a sequence of SyntheticSample, or ``(visual, audio)`` arrays. With
    arrays, ``y`` is either video labels (a fake video is fake in every frame and
    both streams) or per-sample segment lists.
    """
    from .trainer import Batch, stack_samples

    if isinstance(X, Batch):
        return X
    if isinstance(X, Sequence) and X and isinstance(X[0], SyntheticSample):
        samples = list(X)
        if y is not None:
            y = np.asarray(y).astype(int).ravel()
            if len(y) != len(samples) or np.any(y != [s.label for s in samples]):
                raise ValueError("y disagrees with the labels carried by the samples")
    else:
        samples = _samples_from_arrays(X, y, r, require_labels)

    for s in samples:
        if s.visual_raw.ndim != 2 or s.visual_raw.shape[1] != D_v:
            raise ValueError(f"visual features must be (T_v, {D_v}), got {s.visual_raw.shape}")
        if s.audio_raw.ndim != 2 or s.audio_raw.shape[1] != B:
            raise ValueError(f"audio features must be (T_a, {B}), got {s.audio_raw.shape}")
        if s.audio_raw.shape[0] != r * s.T_v:
            raise ValueError(f"audio length {s.audio_raw.shape[0]} != r * T_v = {r * s.T_v}")
        if s.T_v < min_frames:
            raise ValueError(f"sequence of {s.T_v} frames is shorter than the minimum {min_frames}")
        if not (np.isfinite(s.visual_raw).all() and np.isfinite(s.audio_raw).all()):
            raise ValueError(f"sample {s.sample_id} contains non-finite values")
    if len({s.T_v for s in samples}) > 1:
        raise ValueError("all samples must share the same number of frames")
    return stack_samples(samples, dtype)


def _samples_from_arrays(X, y, r: int, require_labels: bool) -> list[SyntheticSample]:
    try:
        visual, audio = X
    except (TypeError, ValueError):
        raise TypeError("X must be a sequence of SyntheticSample or a (visual, audio) pair") from None
    visual = np.asarray(visual, dtype=np.float32)
    audio = np.asarray(audio, dtype=np.float32)
    if visual.ndim != 3 or audio.ndim != 3 or len(visual) != len(audio):
        raise ValueError("visual must be (n, T_v, D_v) and audio (n, T_a, B) with matching n")
    n, T_v = visual.shape[:2]
    if y is None:
        if require_labels:
            raise ValueError("labels are required for fitting")
        segs = [[] for _ in range(n)]
    elif len(y) and isinstance(y[0], (list, tuple)):
        segs = [[(int(s), int(e)) for s, e in item] for item in y]
    else:
        labels = np.asarray(y).astype(int).ravel()
        segs = [[(0, T_v)] if lab else [] for lab in labels]
    if len(segs) != n:
        raise ValueError(f"got {len(segs)} labels for {n} samples")
    return [
        SyntheticSample(
            visual_raw=visual[i],
            audio_raw=audio[i],
            label=int(bool(segs[i])),
            modality_flags=(1, 1) if segs[i] else (0, 0),
            segments=segs[i],
            sample_id=f"x{i:06d}",
            r=r,
        )
        for i in range(n)
    ]
