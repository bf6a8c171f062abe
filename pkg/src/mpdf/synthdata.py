"""Synthetic paired audio-visual frame streams with frame-accurate fake labels.

A shared smooth latent trajectory drives both streams through fixed random
linear maps. Each stream also carries a small private latent of its own.
Manipulations swap or scramble parts of these latents:

* cross-modal fakes (RVFA, FVRA, FVFA, PARTIAL) drive the manipulated stream
  from an independent, rougher latent inside the fake segment;
* intra-modal fakes (INTRA_V, INTRA_A) shuffle the frames of one stream's
  private latent inside the segment, leaving the shared latent (and hence the
  per-frame audio-visual correspondence) untouched.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

CATEGORIES = ("RVRA", "RVFA", "FVRA", "FVFA", "PARTIAL", "INTRA_V", "INTRA_A")
FULL_VIDEO_CATEGORIES = ("RVFA", "FVRA", "FVFA", "INTRA_V", "INTRA_A")

# (audio_fake, visual_fake)
_MODALITY_FLAGS = {
    "RVRA": (0, 0),
    "RVFA": (1, 0),
    "FVRA": (0, 1),
    "FVFA": (1, 1),
    "PARTIAL": (1, 1),
    "INTRA_V": (0, 1),
    "INTRA_A": (1, 0),
}

MAGIC = b"MPDF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4s5I")


@dataclass(frozen=True)
class GeneratorConfig:
    T_v: int = 64
    D_v: int = 48
    B: int = 64
    r: int = 4
    latent_dim: int = 8
    private_dim: int = 4
    noise: float = 0.05
    ar_coef: float = 0.95
    fake_ar_coef: float = 0.6
    map_seed: int = 0
    partial_min_frac: float = 0.05
    partial_max_frac: float = 0.15
    partial_max_segments: int = 3

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeneratorConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SyntheticSample:
    visual_raw: np.ndarray  # (T_v, D_v)
    audio_raw: np.ndarray  # (r * T_v, B)
    label: int
    modality_flags: tuple[int, int]  # (audio_fake, visual_fake)
    segments: list[tuple[int, int]]
    sample_id: str
    r: int = 4

    @property
    def T_v(self) -> int:
        return self.visual_raw.shape[0]

    def frame_labels(self) -> np.ndarray:
        return frame_labels_from_segments(self.segments, self.T_v)

    def modality_frame_labels(self) -> dict[str, np.ndarray]:
        """Per-stream frame labels: a stream's frames are fake only if that stream was manipulated."""
        any_fake = self.frame_labels()
        audio_fake, visual_fake = self.modality_flags
        return {
            "audio": any_fake * int(audio_fake),
            "visual": any_fake * int(visual_fake),
            "cross": any_fake,
        }

    def check(self) -> None:
        T_v = self.T_v
        if self.audio_raw.shape[0] != self.r * T_v:
            raise ValueError(f"audio length {self.audio_raw.shape[0]} != r*T_v = {self.r * T_v}")
        prev_end = 0
        for s, e in self.segments:
            if not (prev_end <= s < e <= T_v):
                raise ValueError(f"segments not sorted/disjoint/in range: {self.segments}")
            prev_end = e
        has_fake = bool(self.modality_flags[0] or self.modality_flags[1])
        if bool(self.label) != bool(self.segments) or bool(self.label) != has_fake:
            raise ValueError("label, segments and modality flags disagree")

    def equals(self, other: "SyntheticSample") -> bool:
        return (
            self.sample_id == other.sample_id
            and self.label == other.label
            and tuple(self.modality_flags) == tuple(other.modality_flags)
            and [tuple(s) for s in self.segments] == [tuple(s) for s in other.segments]
            and self.r == other.r
            and np.array_equal(self.visual_raw, other.visual_raw)
            and np.array_equal(self.audio_raw, other.audio_raw)
        )


def frame_labels_from_segments(segments: Iterable[Sequence[int]], T_v: int) -> np.ndarray:
    labels = np.zeros(T_v, dtype=np.int64)
    for s, e in segments:
        labels[max(int(s), 0) : min(int(e), T_v)] = 1
    return labels


@dataclass(frozen=True)
class StreamMaps:
    visual: np.ndarray  # (latent_dim + private_dim, D_v)
    audio: np.ndarray  # (latent_dim + private_dim, B)


def stream_maps(config: GeneratorConfig) -> StreamMaps:
    rng = np.random.default_rng(config.map_seed)
    k = config.latent_dim + config.private_dim
    return StreamMaps(
        visual=rng.standard_normal((k, config.D_v)) / np.sqrt(k),
        audio=rng.standard_normal((k, config.B)) / np.sqrt(k),
    )


def ar1(rng: np.random.Generator, n: int, dim: int, coef: float) -> np.ndarray:
    """Stationary order-1 autoregressive Gaussian trajectory with unit marginal variance."""
    out = np.empty((n, dim))
    out[0] = rng.standard_normal(dim)
    innov = np.sqrt(1.0 - coef**2)
    for t in range(1, n):
        out[t] = coef * out[t - 1] + innov * rng.standard_normal(dim)
    return out


def _upsample_latent(z: np.ndarray, r: int) -> np.ndarray:
    # z has T+1 rows; audio step r*t + j sits j/r of the way from frame t to t+1.
    T = z.shape[0] - 1
    frac = (np.arange(r) / r)[None, :, None]
    steps = z[:-1, None, :] + frac * (z[1:, None, :] - z[:-1, None, :])
    return steps.reshape(T * r, z.shape[1])


def _draw_partial_segments(rng: np.random.Generator, config: GeneratorConfig) -> list[tuple[int, int]]:
    T = config.T_v
    lo = max(1, int(np.floor(config.partial_min_frac * T)))
    hi = int(np.floor(config.partial_max_frac * T))
    n = int(rng.integers(1, config.partial_max_segments + 1))
    for _ in range(1000):
        lengths = rng.integers(lo, hi + 1, size=n)
        starts = np.sort(rng.integers(0, T - lengths.min() + 1, size=n))
        order = rng.permutation(n)
        segs = sorted((int(s), int(s + lengths[o])) for s, o in zip(starts, order))
        ok = all(e <= T for _, e in segs) and all(
            segs[i][1] < segs[i + 1][0] for i in range(n - 1)
        )
        if ok:
            return segs
    raise RuntimeError("could not place disjoint segments")  # pragma: no cover


def generate_sample(
    config: GeneratorConfig, seed: int | Sequence[int], category: str, sample_id: str | None = None
) -> SyntheticSample:
    if category not in CATEGORIES:
        raise ValueError(f"invalid category {category!r}; expected one of {CATEGORIES}")
    if config.T_v < 16:
        raise ValueError(f"T_v={config.T_v} too short for segment generation (need >= 16)")
    rng = np.random.default_rng(seed)
    maps = stream_maps(config)
    T, r = config.T_v, config.r

    shared = ar1(rng, T + 1, config.latent_dim, config.ar_coef)
    priv_v = ar1(rng, T + 1, config.private_dim, config.ar_coef)
    priv_a = ar1(rng, T + 1, config.private_dim, config.ar_coef)
    shared_v = shared.copy()
    shared_a = shared.copy()

    if category == "PARTIAL":
        segments = _draw_partial_segments(rng, config)
    elif category == "RVRA":
        segments = []
    else:
        segments = [(0, T)]
    audio_fake, visual_fake = _MODALITY_FLAGS[category]

    for s, e in segments:
        if category.startswith("INTRA"):
            priv = priv_v if category == "INTRA_V" else priv_a
            perm = rng.permutation(e - s)
            priv[s:e] = priv[s:e][perm]
            continue
        # +1 row so that audio interpolation inside the segment never touches real latent
        stop = min(e + 1, T + 1)
        if visual_fake:
            shared_v[s:stop] = ar1(rng, stop - s, config.latent_dim, config.fake_ar_coef)
        if audio_fake:
            shared_a[s:stop] = ar1(rng, stop - s, config.latent_dim, config.fake_ar_coef)

    lat_v = np.concatenate([shared_v, priv_v], axis=1)[:T]
    lat_a = _upsample_latent(np.concatenate([shared_a, priv_a], axis=1), r)
    visual = lat_v @ maps.visual + config.noise * rng.standard_normal((T, config.D_v))
    audio = lat_a @ maps.audio + config.noise * rng.standard_normal((T * r, config.B))

    sample = SyntheticSample(
        visual_raw=visual.astype(np.float32),
        audio_raw=audio.astype(np.float32),
        label=int(bool(segments)),
        modality_flags=(audio_fake, visual_fake),
        segments=segments,
        sample_id=sample_id or f"{category.lower()}",
        r=r,
    )
    sample.check()
    return sample


def shared_latent_correlation(sample: SyntheticSample, config: GeneratorConfig) -> np.ndarray:
    """Per-frame correlation between the shared-latent projections recovered from each stream."""
    maps = stream_maps(config)
    k = config.latent_dim
    z_v = sample.visual_raw @ np.linalg.pinv(maps.visual)
    audio = sample.audio_raw.reshape(sample.T_v, config.r, -1)[:, 0]
    z_a = audio @ np.linalg.pinv(maps.audio)
    zv, za = z_v[:, :k], z_a[:, :k]
    zv = zv - zv.mean(axis=1, keepdims=True)
    za = za - za.mean(axis=1, keepdims=True)
    denom = np.linalg.norm(zv, axis=1) * np.linalg.norm(za, axis=1)
    return (zv * za).sum(axis=1) / np.maximum(denom, 1e-12)


# ---------------------------------------------------------------------------
# persistence


def save_sample(sample: SyntheticSample, path: str | Path) -> None:
    T_v, D_v = sample.visual_raw.shape
    B = sample.audio_raw.shape[1]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, T_v, D_v, B, sample.r))
        fh.write(np.ascontiguousarray(sample.visual_raw, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(sample.audio_raw, dtype="<f4").tobytes())


def read_sample_arrays(path: str | Path) -> tuple[np.ndarray, np.ndarray, int]:
    """Return (visual_raw, audio_raw, r) from a sample file."""
    data = Path(path).read_bytes()
    magic, version, T_v, D_v, B, r = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    n_v = T_v * D_v
    n_a = T_v * r * B
    if len(data) != off + 4 * (n_v + n_a):
        raise ValueError(f"{path}: truncated or oversized payload")
    visual = np.frombuffer(data, dtype="<f4", count=n_v, offset=off).reshape(T_v, D_v)
    audio = np.frombuffer(data, dtype="<f4", count=n_a, offset=off + 4 * n_v).reshape(T_v * r, B)
    return visual.astype(np.float32), audio.astype(np.float32), r


@dataclass
class ManifestEntry:
    sample_id: str
    file_path: str
    label: int
    category_tag: str
    split: str
    modality_flags: tuple[int, int] = (0, 0)
    segments: list[tuple[int, int]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "file_path": self.file_path,
            "label": self.label,
            "category_tag": self.category_tag,
            "split": self.split,
            "modality_flags": list(self.modality_flags),
            "segments": [list(s) for s in self.segments],
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "ManifestEntry":
        return cls(
            sample_id=d["sample_id"],
            file_path=d["file_path"],
            label=int(d["label"]),
            category_tag=d["category_tag"],
            split=d["split"],
            modality_flags=tuple(int(x) for x in d.get("modality_flags", (0, 0))),
            segments=[(int(s), int(e)) for s, e in d.get("segments", [])],
        )


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    generator_config: GeneratorConfig
    seed: int
    root: Path | None = None

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def load(self, entry: ManifestEntry) -> SyntheticSample:
        if self.root is None:
            raise ValueError("manifest has no root directory; load it with load_manifest()")
        visual, audio, r = read_sample_arrays(self.root / entry.file_path)
        return SyntheticSample(
            visual_raw=visual,
            audio_raw=audio,
            label=entry.label,
            modality_flags=tuple(entry.modality_flags),
            segments=list(entry.segments),
            sample_id=entry.sample_id,
            r=r,
        )

    def load_split(self, name: str) -> list[SyntheticSample]:
        return [self.load(e) for e in self.split(name)]

    def write(self, path: str | Path) -> None:
        lines = [
            json.dumps(
                {"kind": "meta", "generator_config": self.generator_config.to_dict(), "seed": self.seed},
                sort_keys=True,
            )
        ]
        lines += [json.dumps({"kind": "entry", **e.to_json()}, sort_keys=True) for e in self.entries]
        Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(directory: str | Path) -> DatasetManifest:
    directory = Path(directory)
    meta = None
    entries = []
    with open(directory / "manifest.jsonl") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("kind", "entry")
            if kind == "meta":
                meta = rec
            else:
                entries.append(ManifestEntry.from_json(rec))
    if meta is None:
        raise ValueError(f"{directory}/manifest.jsonl has no meta record")
    return DatasetManifest(
        entries=entries,
        generator_config=GeneratorConfig.from_dict(meta["generator_config"]),
        seed=int(meta["seed"]),
        root=directory,
    )


def split_counts(n: int, ratios: Sequence[float]) -> list[int]:
    """Floor for every split but the last; the last takes the remainder."""
    if not np.isclose(sum(ratios), 1.0):
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")
    counts = [int(np.floor(n * r + 1e-9)) for r in ratios[:-1]]
    counts.append(n - sum(counts))
    return counts


def generate_samples(
    config: GeneratorConfig, counts: Mapping[str, int], seed: int
) -> list[SyntheticSample]:
    """Generate samples in memory; `counts` maps category -> number of samples."""
    out = []
    for cat, n in counts.items():
        cat_idx = CATEGORIES.index(cat)
        for i in range(n):
            sid = f"{cat.lower()}_{i:05d}"
            out.append(generate_sample(config, [seed, cat_idx, i], cat, sample_id=sid))
    return out


def generate_dataset(
    config: GeneratorConfig,
    n_per_category: int | Mapping[str, int],
    split_ratios: Mapping[str, float] | Sequence[float] = (0.7, 0.3),
    seed: int = 0,
    out_dir: str | Path | None = None,
) -> DatasetManifest:
    if isinstance(n_per_category, Mapping):
        counts = dict(n_per_category)
    else:
        counts = {c: int(n_per_category) for c in CATEGORIES}
    if any(n < 1 for n in counts.values()):
        raise ValueError("n_per_category must be >= 1")
    if isinstance(split_ratios, Mapping):
        split_names, ratios = list(split_ratios), list(split_ratios.values())
    else:
        ratios = list(split_ratios)
        split_names = ["train", "test"] if len(ratios) == 2 else [f"split{i}" for i in range(len(ratios))]
        if len(ratios) == 3:
            split_names = ["train", "val", "test"]

    root = Path(out_dir) if out_dir is not None else None
    if root is not None:
        try:
            (root / "samples").mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot write dataset to {root}: {exc}") from exc

    entries = []
    for cat, n in counts.items():
        cat_idx = CATEGORIES.index(cat) if cat in CATEGORIES else None
        if cat_idx is None:
            raise ValueError(f"invalid category {cat!r}")
        order = np.random.default_rng([seed, cat_idx, 2**31 - 1]).permutation(n)
        split_of = np.empty(n, dtype=object)
        start = 0
        for name, k in zip(split_names, split_counts(n, ratios)):
            split_of[order[start : start + k]] = name
            start += k
        for i in range(n):
            sid = f"{cat.lower()}_{i:05d}"
            sample = generate_sample(config, [seed, cat_idx, i], cat, sample_id=sid)
            rel = f"samples/{sid}.bin"
            if root is not None:
                save_sample(sample, root / rel)
            entries.append(
                ManifestEntry(
                    sample_id=sid,
                    file_path=rel,
                    label=sample.label,
                    category_tag=cat,
                    split=str(split_of[i]),
                    modality_flags=sample.modality_flags,
                    segments=sample.segments,
                )
            )
    manifest = DatasetManifest(entries=entries, generator_config=config, seed=seed, root=root)
    if root is not None:
        manifest.write(root / "manifest.jsonl")
    return manifest
