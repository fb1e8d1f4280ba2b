"""Sequence files, manifests, normalization, subsampling, synthetic data, metrics."""

from __future__ import annotations

import json
import logging
import os
import struct
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "FeatureSequence",
    "DatasetManifest",
    "ManifestEntry",
    "NormalizationStats",
    "SyntheticSpec",
    "SyntheticDataset",
    "save_sequence",
    "load_sequence",
    "read_manifest",
    "write_manifest",
    "load_dataset",
    "zscore_fit",
    "zscore_apply",
    "save_stats",
    "load_stats",
    "subsample_uniform",
    "generate_synthetic",
    "write_synthetic",
    "bayes_log_likelihoods",
    "bayes_classify",
    "accuracy",
    "average_precision",
    "mean_average_precision",
]

SEQ_MAGIC = b"BOWSEQ1\x00"
_HEADER = struct.Struct("<8sII")


@dataclass(frozen=True)
class FeatureSequence:
    """Frames of one sample, one (T, D_c) array per channel."""

    channels: tuple
    source: str = ""

    def __post_init__(self):
        chans = self.channels
        if isinstance(chans, np.ndarray):
            chans = (chans,)
        chans = tuple(np.atleast_2d(np.asarray(c, dtype=np.float64)) for c in chans)
        if not chans:
            raise ValueError("sequence needs at least one channel")
        lengths = {c.shape[0] for c in chans}
        if len(lengths) != 1:
            raise ValueError("channels disagree on the number of frames")
        if chans[0].shape[0] < 1:
            raise ValueError("empty sequence")
        object.__setattr__(self, "channels", chans)

    @property
    def frames(self) -> np.ndarray:
        """Frames of a single-channel sequence."""
        if len(self.channels) != 1:
            raise ValueError("sequence has several channels")
        return self.channels[0]

    @property
    def length(self) -> int:
        return self.channels[0].shape[0]

    @property
    def num_channels(self) -> int:
        return len(self.channels)

    @property
    def dims(self) -> tuple:
        return tuple(c.shape[1] for c in self.channels)

    def concatenated(self) -> "FeatureSequence":
        """Join the channels of every frame into one descriptor."""
        return FeatureSequence((np.hstack(self.channels),), self.source)

    def take(self, indices) -> "FeatureSequence":
        return FeatureSequence(tuple(c[indices] for c in self.channels), self.source)


def save_sequence(frames, path) -> None:
    """Write one channel as ``BOWSEQ1`` little-endian float32 frames."""
    frames = np.atleast_2d(np.asarray(frames))
    t, d = frames.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(SEQ_MAGIC, t, d))
        f.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def _load_channel(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header at byte offset {len(raw)}")
    magic, t, d = _HEADER.unpack_from(raw, 0)
    if magic != SEQ_MAGIC:
        raise ValueError(f"{path}: bad magic at byte offset 0")
    if t == 0:
        raise ValueError(f"{path}: frame count 0 at byte offset 8")
    if d == 0:
        raise ValueError(f"{path}: dimension 0 at byte offset 12")
    need = _HEADER.size + 4 * t * d
    if len(raw) < need:
        raise ValueError(f"{path}: truncated payload at byte offset {len(raw)}, "
                         f"expected {need} bytes")
    if len(raw) > need:
        raise ValueError(f"{path}: trailing data at byte offset {need}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size, count=t * d)
    return data.reshape(t, d).astype(np.float64)


def load_sequence(path, *more_channels) -> FeatureSequence:
    """Load a sequence; extra paths are further channels of the same sample."""
    paths = (path,) + more_channels
    return FeatureSequence(tuple(_load_channel(p) for p in paths), source=str(path))


@dataclass(frozen=True)
class ManifestEntry:
    label: int
    paths: tuple


@dataclass
class DatasetManifest:
    num_classes: int
    num_channels: int
    entries: list = field(default_factory=list)
    split: str = ""

    def __post_init__(self):
        for e in self.entries:
            if not 1 <= e.label <= self.num_classes:
                raise ValueError(f"label {e.label} outside 1..{self.num_classes}")
            if len(e.paths) != self.num_channels:
                raise ValueError("manifest entry has the wrong channel arity")

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)


def read_manifest(path) -> DatasetManifest:
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as f:
        lines = [ln.split() for ln in f if ln.strip()]
    if not lines or len(lines[0]) != 3 or lines[0][0] != "BOWDS1":
        raise ValueError(f"{path}: not a BOWDS1 manifest")
    c, k = int(lines[0][1]), int(lines[0][2])
    entries = []
    for i, parts in enumerate(lines[1:], start=2):
        if len(parts) != k + 1:
            raise ValueError(f"{path}:{i}: expected a label and {k} paths")
        paths = tuple(p if os.path.isabs(p) else os.path.join(base, p)
                      for p in parts[1:])
        entries.append(ManifestEntry(int(parts[0]), paths))
    split = os.path.splitext(os.path.basename(path))[0]
    return DatasetManifest(c, k, entries, split)


def write_manifest(manifest: DatasetManifest, path) -> None:
    """Paths are written relative to the manifest's directory when possible."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w") as f:
        f.write(f"BOWDS1 {manifest.num_classes} {manifest.num_channels}\n")
        for e in manifest.entries:
            rel = [os.path.relpath(p, base) if os.path.isabs(p) else p
                   for p in e.paths]
            f.write(" ".join([str(e.label)] + rel) + "\n")


def load_dataset(manifest: DatasetManifest):
    """All sequences of a manifest and their labels, in manifest order."""
    seqs = [load_sequence(*e.paths) for e in manifest.entries]
    return seqs, manifest.labels


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel, per-dimension mean and (population) std."""

    means: tuple
    stds: tuple


def zscore_fit(sequences) -> NormalizationStats:
    sequences = list(sequences)
    if not sequences:
        raise ValueError("no training sequences")
    k = sequences[0].num_channels
    if sum(s.length for s in sequences) < 2:
        raise ValueError("z-score needs at least 2 frames")
    means, stds = [], []
    for c in range(k):
        pooled = np.concatenate([s.channels[c] for s in sequences])
        mu = pooled.mean(axis=0)
        sd = pooled.std(axis=0)
        dead = ~(sd > 0)
        if np.any(dead):
            warnings.warn(f"channel {c}: {int(dead.sum())} constant dimension(s); "
                          "using std 1", RuntimeWarning, stacklevel=2)
            sd = np.where(dead, 1.0, sd)
        means.append(mu)
        stds.append(sd)
    return NormalizationStats(tuple(means), tuple(stds))


def zscore_apply(stats: NormalizationStats, seq: FeatureSequence) -> FeatureSequence:
    if seq.num_channels != len(stats.means):
        raise ValueError("channel count does not match normalization stats")
    chans = tuple((x - mu) / sd for x, mu, sd in
                  zip(seq.channels, stats.means, stats.stds))
    return FeatureSequence(chans, seq.source)


def save_stats(stats: NormalizationStats, path) -> None:
    with open(path, "w") as f:
        f.write(f"BOWNORM1 {len(stats.means)}\n")
        for mu, sd in zip(stats.means, stats.stds):
            f.write(f"{mu.size}\n")
            f.write(" ".join(f"{v:.17g}" for v in mu) + "\n")
            f.write(" ".join(f"{v:.17g}" for v in sd) + "\n")


def load_stats(path) -> NormalizationStats:
    with open(path) as f:
        lines = f.read().splitlines()
    head = lines[0].split()
    if len(head) != 2 or head[0] != "BOWNORM1":
        raise ValueError(f"{path}: not a BOWNORM1 stats file")
    means, stds = [], []
    for c in range(int(head[1])):
        block = lines[1 + 3 * c:4 + 3 * c]
        d = int(block[0])
        mu = np.array(block[1].split(), dtype=np.float64)
        sd = np.array(block[2].split(), dtype=np.float64)
        if mu.size != d or sd.size != d:
            raise ValueError(f"{path}: channel {c} has the wrong dimension")
        means.append(mu)
        stds.append(sd)
    return NormalizationStats(tuple(means), tuple(stds))


def subsample_uniform(seq: FeatureSequence, max_frames: int, seed=None) -> FeatureSequence:
    """Keep at most ``max_frames`` evenly spaced frames, in file order.

    With ``seed`` given, a sorted uniform random subset is drawn instead.
    """
    if max_frames < 1:
        raise ValueError("max_frames must be positive")
    t = seq.length
    if t <= max_frames:
        return seq
    if seed is None:
        idx = (np.arange(max_frames) * t) // max_frames
    else:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(t, size=max_frames, replace=False))
    return seq.take(idx)


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings for the rare-word task.

    Every class shares ``codewords`` Gaussian components. Each class also owns
    ``rare_per_class`` components, placed ``rare_offset`` away from a set of
    anchor centers common to all classes (each class in its own random
    direction). A frame comes from the class's rare components with
    probability ``rho``.
    """

    classes: int = 3
    codewords: int = 32
    dim: int = 8
    sequences: int = 200
    frames: int = 100
    rho: float = 0.3
    seed: int = 0
    rare_per_class: int = 2
    spread: float = 5.0
    noise: float = 1.0
    rare_offset: float = 1.5
    test_fraction: float = 0.3

    def __post_init__(self):
        for name in ("classes", "codewords", "dim", "sequences", "frames",
                     "rare_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.noise <= 0 or self.spread < 0 or self.rare_offset < 0:
            raise ValueError("invalid generator scales")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    shared_centers: np.ndarray
    rare_centers: np.ndarray  # (classes, rare_per_class, dim)
    sequences: list
    labels: np.ndarray  # 1-based
    is_test: np.ndarray

    def split(self, test: bool):
        idx = np.flatnonzero(self.is_test == test)
        return [self.sequences[i] for i in idx], self.labels[idx]


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    rng = np.random.default_rng(spec.seed)
    shared = rng.normal(0.0, spec.spread, size=(spec.codewords, spec.dim))
    rare = np.empty((spec.classes, spec.rare_per_class, spec.dim))
    # common anchors: how often an anchor region is hit says nothing about
    # the class, only the side of the anchor the rare frames fall on does
    anchors = rng.choice(spec.codewords, size=spec.rare_per_class,
                         replace=spec.rare_per_class > spec.codewords)
    for c in range(spec.classes):
        direction = rng.normal(size=(spec.rare_per_class, spec.dim))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        rare[c] = shared[anchors] + spec.rare_offset * direction
    labels = np.arange(spec.sequences) % spec.classes + 1
    rng.shuffle(labels)
    seqs = []
    for i, y in enumerate(labels):
        from_rare = rng.random(spec.frames) < spec.rho
        which_shared = rng.integers(spec.codewords, size=spec.frames)
        which_rare = rng.integers(spec.rare_per_class, size=spec.frames)
        centers = np.where(from_rare[:, None], rare[y - 1][which_rare],
                           shared[which_shared])
        frames = centers + spec.noise * rng.normal(size=(spec.frames, spec.dim))
        seqs.append(FeatureSequence((frames,), source=f"synthetic/{i}"))
    n_test = int(round(spec.test_fraction * spec.sequences))
    is_test = np.zeros(spec.sequences, dtype=bool)
    is_test[spec.sequences - n_test:] = True
    return SyntheticDataset(spec, shared, rare, seqs, labels.astype(np.int64), is_test)


def write_synthetic(ds: SyntheticDataset, out_dir) -> dict:
    """Write sequence files, ``all/train/test`` manifests and generator params."""
    os.makedirs(out_dir, exist_ok=True)
    entries = {"all": [], "train": [], "test": []}
    for i, (seq, y) in enumerate(zip(ds.sequences, ds.labels)):
        name = f"seq_{i:05d}.bin"
        # round through float32 so in-memory data equals what is on disk
        save_sequence(seq.frames, os.path.join(out_dir, name))
        e = ManifestEntry(int(y), (name,))
        entries["all"].append(e)
        entries["test" if ds.is_test[i] else "train"].append(e)
    paths = {}
    for split, es in entries.items():
        p = os.path.join(out_dir, f"{split}.txt")
        write_manifest(DatasetManifest(ds.spec.classes, 1, es, split), p)
        paths[split] = p
    params = {
        "spec": asdict(ds.spec),
        "shared_centers": ds.shared_centers.tolist(),
        "rare_centers": ds.rare_centers.tolist(),
    }
    with open(os.path.join(out_dir, "generator.json"), "w") as f:
        json.dump(params, f, indent=1, sort_keys=True)
        f.write("\n")
    return paths


def bayes_log_likelihoods(ds: SyntheticDataset, seq: FeatureSequence) -> np.ndarray:
    """log p(sequence | class) under the true generator, one entry per class."""
    spec = ds.spec
    x = seq.frames
    d = spec.dim

    def log_mix(centers):
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        lp = -0.5 * d2 / spec.noise**2 - 0.5 * d * np.log(2 * np.pi * spec.noise**2)
        top = lp.max(axis=1, keepdims=True)
        return top[:, 0] + np.log(np.mean(np.exp(lp - top), axis=1))

    shared = log_mix(ds.shared_centers)
    out = np.empty(spec.classes)
    for c in range(spec.classes):
        rare = log_mix(ds.rare_centers[c])
        with np.errstate(divide="ignore"):
            terms = np.logaddexp(np.log1p(-spec.rho) + shared, np.log(spec.rho) + rare)
        out[c] = terms.sum()
    return out


def bayes_classify(ds: SyntheticDataset, seq: FeatureSequence) -> int:
    """1-based label of the maximum-likelihood class (uniform class prior)."""
    return int(np.argmax(bayes_log_likelihoods(ds, seq))) + 1


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    if labels.size == 0:
        raise ValueError("no items to score")
    return float(np.mean(predictions == labels))


def average_precision(scores, positives) -> float:
    """AP of one ranking: mean precision at the rank of every positive.

    Items are ranked by descending score; ties keep their original order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite score")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    if not hits.any():
        raise ValueError("no positive items")
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, ranks.size + 1) / ranks))


def mean_average_precision(scores, labels) -> float:
    """Mean over classes of one-vs-rest AP.

    ``scores`` has shape (N, C); ``labels`` are 1-based. Classes without
    positive items are left out of the mean.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError("scores must be (N, C) with one row per label")
    aps = []
    for c in range(scores.shape[1]):
        pos = labels == c + 1
        if not pos.any():
            warnings.warn(f"class {c + 1} has no positive items; excluded from mAP",
                          RuntimeWarning, stacklevel=2)
            continue
        aps.append(average_precision(scores[:, c], pos))
    if not aps:
        raise ValueError("no class has positive items")
    return float(np.mean(aps))
