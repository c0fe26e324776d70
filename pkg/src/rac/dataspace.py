"""Synthetic long-tail datasets, dataset file I/O, and class statistics.

Classes are indexed in descending frequency: class 0 is the largest head
class and class L-1 the smallest tail class. Every generator draw is keyed
to (seed, config) through independent named RNG streams, so train and test
sets built from the same config share class geometry while drawing disjoint
samples.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError

PROFILES = ("exponential", "step", "uniform")

# Paper-style frequency-bucket thresholds: few < 20 <= med <= 100 < many.
FEW_BELOW = 20
MED_AT_MOST = 100

_SYLLABLES = (
    "ba be bi bo bu da de di do du fa fe fi fo fu ga ge gi go gu "
    "ka ke ki ko ku la le li lo lu ma me mi mo mu na ne ni no nu "
    "pa pe pi po pu ra re ri ro ru sa se si so su ta te ti to tu "
    "va ve vi vo vu za ze zi zo zu"
).split()


@dataclass(frozen=True)
class Sample:
    """One labeled feature vector."""

    features: np.ndarray
    label: int


@dataclass
class Dataset:
    """Feature matrix plus integer labels for a fixed class universe."""

    features: np.ndarray  # (N, D) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValidationError("features must be a 2-d array")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValidationError("features and labels disagree on sample count")
        if self.features.shape[0] == 0:
            raise ValidationError("dataset must contain at least one sample")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValidationError(
                f"labels must lie in [0, {self.num_classes}); "
                f"saw range [{self.labels.min()}, {self.labels.max()}]"
            )

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def samples(self):
        """Iterate over rows as Sample views."""
        for i in range(self.n):
            yield Sample(self.features[i], int(self.labels[i]))


@dataclass
class ClassStats:
    """Per-class training counts with the frequency-bucket thresholds."""

    counts: np.ndarray  # (L,) int64
    total: int
    few_below: int = FEW_BELOW
    med_at_most: int = MED_AT_MOST

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if (self.counts < 0).any():
            raise ValidationError("class counts must be non-negative")
        if int(self.counts.sum()) != self.total:
            raise ValidationError("counts must sum to the total sample count")

    @property
    def num_classes(self) -> int:
        return len(self.counts)


@dataclass
class GenConfig:
    """Shape of a synthetic long-tail draw.

    imbalance is the ratio of the largest to the smallest per-class count;
    cluster_sep sets the mean distance between class centroids and
    spread_range the interval the per-class standard deviation is drawn
    from, so class difficulty varies independently of class frequency.
    """

    num_classes: int
    dim: int
    n_max: int
    imbalance: float = 1.0
    profile: str = "exponential"
    seed: int = 0
    cluster_sep: float = 6.0
    spread_range: tuple[float, float] = (0.5, 1.5)
    name_seed: int = 0  # namespace for generated label texts

    def validate(self):
        if self.num_classes < 2:
            raise ValidationError("num_classes must be at least 2")
        if self.dim < 1:
            raise ValidationError("dim must be positive")
        if self.imbalance < 1:
            raise ValidationError("imbalance factor must be >= 1")
        if self.n_max / self.imbalance < 1:
            raise ValidationError("n_max/imbalance must be >= 1 so the tail class is non-empty")
        lo, hi = self.spread_range
        if lo <= 0 or hi < lo:
            raise ValidationError("spread_range must be a positive interval")
        if self.profile not in PROFILES:
            raise ValidationError(f"profile must be one of {PROFILES}")


def class_counts(config: GenConfig) -> np.ndarray:
    """Per-class sample counts implied by the config's decay profile."""
    config.validate()
    L = config.num_classes
    if config.profile == "uniform" or config.imbalance == 1:
        return np.full(L, config.n_max, dtype=np.int64)
    if config.profile == "step":
        head = (L + 1) // 2
        counts = np.full(L, int(round(config.n_max / config.imbalance)), dtype=np.int64)
        counts[:head] = config.n_max
        return counts
    # exponential: n_c = round(n_max * IF^(-c/(L-1)))
    c = np.arange(L, dtype=np.float64)
    counts = np.rint(config.n_max * config.imbalance ** (-c / (L - 1))).astype(np.int64)
    return counts


def _streams(config: GenConfig):
    """Named RNG streams: geometry is shared between train and test draws."""
    geom, train, test = np.random.SeedSequence(config.seed).spawn(3)
    return (
        np.random.Generator(np.random.PCG64(geom)),
        np.random.Generator(np.random.PCG64(train)),
        np.random.Generator(np.random.PCG64(test)),
    )


def class_geometry(config: GenConfig) -> tuple[np.ndarray, np.ndarray]:
    """Centroids (L, D) and per-class standard deviations (L,).

    Centroid coordinates are scaled so the expected distance between two
    centroids is cluster_sep; spreads are drawn uniformly from spread_range.
    """
    config.validate()
    rng, _, _ = _streams(config)
    scale = config.cluster_sep / math.sqrt(2.0 * config.dim)
    centroids = rng.normal(0.0, scale, size=(config.num_classes, config.dim))
    lo, hi = config.spread_range
    sigmas = rng.uniform(lo, hi, size=config.num_classes)
    return centroids, sigmas


def _draw(config: GenConfig, counts: np.ndarray, rng, split: str) -> Dataset:
    centroids, sigmas = class_geometry(config)
    feats = []
    labels = []
    for c, n_c in enumerate(counts):
        if n_c == 0:
            continue
        noise = rng.standard_normal(size=(int(n_c), config.dim))
        feats.append(centroids[c] + sigmas[c] * noise)
        labels.append(np.full(int(n_c), c, dtype=np.int64))
    return Dataset(np.concatenate(feats), np.concatenate(labels), config.num_classes, split)


def generate_longtail(config: GenConfig) -> Dataset:
    """Draw the long-tail training set: one Gaussian cluster per class."""
    counts = class_counts(config)
    _, train_rng, _ = _streams(config)
    return _draw(config, counts, train_rng, "train")


def make_balanced_testset(config: GenConfig, n_per_class: int) -> Dataset:
    """Fresh balanced draw from the same class geometry as the training set."""
    if n_per_class < 1:
        raise ValidationError("n_per_class must be at least 1")
    config.validate()
    counts = np.full(config.num_classes, n_per_class, dtype=np.int64)
    _, _, test_rng = _streams(config)
    return _draw(config, counts, test_rng, "test")


def class_frequencies(
    dataset: Dataset, few_below: int = FEW_BELOW, med_at_most: int = MED_AT_MOST
) -> ClassStats:
    """Count samples per class: counts[y] = |{n : y_n = y}|."""
    counts = np.bincount(dataset.labels, minlength=dataset.num_classes).astype(np.int64)
    return ClassStats(counts, dataset.n, few_below, med_at_most)


def default_thresholds(n_max: int) -> tuple[int, int]:
    """Bucket thresholds, rescaled linearly when the head is below 1000 samples."""
    if n_max >= 1000:
        return FEW_BELOW, MED_AT_MOST
    few = max(2, int(round(FEW_BELOW * n_max / 1000)))
    med = max(few, int(round(MED_AT_MOST * n_max / 1000)))
    return few, med


def bucketize(stats: ClassStats) -> list[str]:
    """Assign every class to exactly one of {few, med, many}."""
    if stats.few_below > stats.med_at_most:
        raise ValidationError("few_below must not exceed med_at_most")
    buckets = []
    for count in stats.counts:
        if count < stats.few_below:
            buckets.append("few")
        elif count <= stats.med_at_most:
            buckets.append("med")
        else:
            buckets.append("many")
    return buckets


# ---------------------------------------------------------------------------
# Label texts
# ---------------------------------------------------------------------------


def render_label_text(
    class_id: int,
    vocab_mode: str = "multi_token",
    names: list[str] | None = None,
    name_seed: int = 0,
) -> str:
    """Deterministic text for a class id.

    single_token gives "class_007"-style identifiers; multi_token composes
    2-4 pseudo-words from a per-class seeded stream; custom reads from the
    supplied name list.
    """
    if vocab_mode == "custom":
        if names is None or class_id >= len(names):
            raise ValidationError(f"no custom name for class {class_id}")
        return names[class_id]
    if vocab_mode == "single_token":
        return f"class_{class_id:03d}"
    if vocab_mode != "multi_token":
        raise ValidationError(f"unknown vocab_mode {vocab_mode!r}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([name_seed, class_id])))
    n_words = int(rng.integers(2, 5))
    words = []
    for _ in range(n_words):
        n_syll = int(rng.integers(2, 4))
        idx = rng.integers(0, len(_SYLLABLES), size=n_syll)
        words.append("".join(_SYLLABLES[i] for i in idx))
    return " ".join(words)


def class_names(
    num_classes: int,
    vocab_mode: str = "multi_token",
    names: list[str] | None = None,
    name_seed: int = 0,
) -> list[str]:
    return [render_label_text(c, vocab_mode, names, name_seed) for c in range(num_classes)]


# ---------------------------------------------------------------------------
# LTDS file format
# ---------------------------------------------------------------------------
# line 1: "LTDS 1 <L> <D> <N>", then N lines "<label> <v_1> ... <v_D>".
# An optional "<path>.names" companion holds one class name per line.


def write_ltds(dataset: Dataset, path: str, names: list[str] | None = None):
    """Write a dataset in the LTDS text format (floats via repr round-trip)."""
    with open(path, "w") as fh:
        fh.write(f"LTDS 1 {dataset.num_classes} {dataset.dim} {dataset.n}\n")
        for i in range(dataset.n):
            row = " ".join(repr(float(v)) for v in dataset.features[i])
            fh.write(f"{dataset.labels[i]} {row}\n")
    if names is not None:
        if len(names) != dataset.num_classes:
            raise ValidationError("names file needs exactly one entry per class")
        with open(path + ".names", "w") as fh:
            for name in names:
                fh.write(name + "\n")


def ingest_dataset(path: str, format: str = "ltds", split: str = "train") -> Dataset:
    """Load a dataset file; currently only the LTDS format is defined."""
    if format != "ltds":
        raise FormatError(f"unknown dataset format {format!r}")
    try:
        with open(path) as fh:
            header = fh.readline().split()
            if len(header) != 5 or header[0] != "LTDS":
                raise FormatError(f"{path}: malformed LTDS header")
            if header[1] != "1":
                raise FormatError(f"{path}: unsupported LTDS version {header[1]}")
            try:
                L, D, N = (int(v) for v in header[2:])
            except ValueError as exc:
                raise FormatError(f"{path}: non-integer header field") from exc
            features = np.empty((N, D), dtype=np.float64)
            labels = np.empty(N, dtype=np.int64)
            for i in range(N):
                parts = fh.readline().split()
                if len(parts) != D + 1:
                    raise FormatError(
                        f"{path}: row {i} has {max(len(parts) - 1, 0)} values, expected {D}"
                    )
                label = int(parts[0])
                if label < 0 or label >= L:
                    raise FormatError(f"{path}: row {i} label {label} out of range [0, {L})")
                labels[i] = label
                features[i] = [float(v) for v in parts[1:]]
    except OSError as exc:
        raise FormatError(f"cannot read dataset {path}: {exc}") from exc
    return Dataset(features, labels, L, split)


def read_names(path: str, num_classes: int) -> list[str]:
    try:
        with open(path) as fh:
            names = [line.rstrip("\n") for line in fh]
    except OSError as exc:
        raise FormatError(f"cannot read names file {path}: {exc}") from exc
    if len(names) != num_classes:
        raise FormatError(f"{path}: {len(names)} names for {num_classes} classes")
    return names


def names_path_for(dataset_path: str) -> str | None:
    candidate = dataset_path + ".names"
    return candidate if os.path.exists(candidate) else None
