"""Synthetic long-tailed data.

Two generators: a single-label classification set whose per-class counts
follow the exponential CIFAR-LT profile, with Gaussian-cluster features, and
a detection-style proposal stream that mixes foreground and background
proposals per image.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .freqstats import FrequencyTable, build_frequency_table
from .losses import BACKGROUND, Labels

ROUNDING_RULES = ("floor", "half_up")


@dataclass(frozen=True)
class LongTailProfile:
    num_classes: int = 100
    n_max: int = 500
    imbalance_factor: float = 200.0
    rounding: str = "floor"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("a long-tailed profile needs at least 2 classes")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if not self.imbalance_factor > 1:
            raise ValueError(f"imbalance factor must be > 1, got {self.imbalance_factor}")
        if self.rounding not in ROUNDING_RULES:
            raise ValueError(f"rounding must be one of {ROUNDING_RULES}")


def make_longtail_counts(profile: LongTailProfile) -> np.ndarray:
    """n_i = n_max * IF^(-i / (C - 1)), rounded per ``profile.rounding``.

    ``floor`` truncation is the CIFAR-100-LT construction: C=100, n_max=500,
    IF=200 yields 500 down to 2 images, 9502 in total.
    """
    C = profile.num_classes
    raw = [profile.n_max * profile.imbalance_factor ** (-i / (C - 1)) for i in range(C)]
    if profile.rounding == "floor":
        # tolerate representation error just below an integer
        counts = [math.floor(x + 1e-9) for x in raw]
    else:
        counts = [math.floor(x + 0.5) for x in raw]
    counts = np.asarray(counts, dtype=np.int64)
    if counts.min() < 1:
        raise ValueError(f"profile {profile} rounds the tail class to zero images")
    return counts


@dataclass
class SyntheticClassDataset:
    features: np.ndarray
    labels: np.ndarray
    profile: LongTailProfile
    class_means: np.ndarray
    noise_sigma: float
    seed: int

    @property
    def num_classes(self) -> int:
        return self.profile.num_classes

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def frequency_table(self) -> FrequencyTable:
        return build_frequency_table(self.counts(), len(self.labels))


def class_means(
    num_classes: int, feature_dim: int, rng: np.random.Generator, scale: float = 1.0, shared: float = 0.0
) -> np.ndarray:
    """Random unit directions (orthonormal when C <= d) scaled to norm ``scale``.

    ``shared > 0`` adds a common component of that length along one extra
    random direction, so all foreground classes sit on the same side of the
    origin (where background proposals live).
    """
    g = rng.standard_normal((max(num_classes, feature_dim), feature_dim))
    if num_classes <= feature_dim:
        q, _ = np.linalg.qr(g[:feature_dim].T)
        dirs = q.T[:num_classes]
    else:
        dirs = g[:num_classes] / np.linalg.norm(g[:num_classes], axis=1, keepdims=True)
    means = scale * dirs
    if shared:
        u = rng.standard_normal(feature_dim)
        means = means + shared * u / np.linalg.norm(u)
    return means


def _gaussian_samples(means, counts, sigma, rng):
    labels = np.repeat(np.arange(len(counts)), counts)
    noise = rng.standard_normal((labels.size, means.shape[1]))
    # stored at float32 precision so exported files round-trip exactly
    feats = (means[labels] + sigma * noise).astype(np.float32)
    return feats, labels


def synth_classification_dataset(
    profile: LongTailProfile,
    feature_dim: int = 32,
    noise_sigma: float = 1.0,
    seed: int = 0,
    mean_scale: float = 1.0,
    shared_scale: float = 0.0,
) -> SyntheticClassDataset:
    if feature_dim < 2:
        raise ValueError("feature_dim must be >= 2")
    if not noise_sigma > 0:
        raise ValueError("noise_sigma must be > 0")
    rng = np.random.default_rng(seed)
    means = class_means(profile.num_classes, feature_dim, rng, mean_scale, shared_scale)
    feats, labels = _gaussian_samples(means, make_longtail_counts(profile), noise_sigma, rng)
    perm = rng.permutation(labels.size)
    return SyntheticClassDataset(feats[perm], labels[perm], profile, means, float(noise_sigma), int(seed))


def balanced_test_set(ds: SyntheticClassDataset, per_class: int = 50, seed: Optional[int] = None):
    """Held-out set drawn from the same class clusters, ``per_class`` samples each."""
    rng = np.random.default_rng([ds.seed, 1] if seed is None else seed)
    counts = np.full(ds.num_classes, per_class)
    return _gaussian_samples(ds.class_means, counts, ds.noise_sigma, rng)


# ---------------------------------------------------------------- proposal stream


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray
    known_pos: Optional[np.ndarray] = None
    known_neg: Optional[np.ndarray] = None

    def as_labels(self) -> Labels:
        return Labels(self.labels, self.known_pos, self.known_neg)

    @property
    def num_foreground(self) -> int:
        return int(np.count_nonzero(self.labels >= 0))


@dataclass(frozen=True)
class ProposalStreamConfig:
    fg_ratio: int = 1
    bg_ratio: int = 3
    batch_size: int = 512
    feature_dim: int = 32
    noise_sigma: float = 1.0
    mean_scale: float = 1.0
    shared_scale: float = 0.0
    max_categories_per_image: int = 3
    known_negatives_per_image: int = 0

    def foreground_per_batch(self) -> int:
        total = self.fg_ratio + self.bg_ratio
        if self.fg_ratio < 0 or self.bg_ratio < 0 or total == 0:
            raise ValueError("fg/bg ratio must be non-negative and not both zero")
        return int(round(self.batch_size * self.fg_ratio / total))


class ProposalStream:
    """Endless iterator of per-image proposal batches.

    Each image picks up to ``max_categories_per_image`` categories, drawn
    with replacement proportional to image counts, and splits its foreground
    proposals uniformly among those draws, so the long-run foreground
    histogram follows the count distribution. Known-positive masks mark the
    categories present in the image; known negatives are sampled from the
    absent ones.
    """

    def __init__(self, table: FrequencyTable, config: ProposalStreamConfig = ProposalStreamConfig(), seed: int = 0):
        if table.num_classes == 0 or table.counts.sum() == 0:
            raise ValueError("proposal stream needs a non-empty frequency table")
        if config.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        self.table = table
        self.config = config
        self.seed = seed
        self.n_fg = config.foreground_per_batch()
        self.probs = table.counts / table.counts.sum()
        self._rng = np.random.default_rng(seed)
        self.class_means = class_means(
            table.num_classes, config.feature_dim, self._rng, config.mean_scale, config.shared_scale
        )

    def test_set(self, per_class: int = 50, seed: int = 1):
        """Balanced foreground-only held-out proposals from the same class clusters."""
        rng = np.random.default_rng([self.seed, seed])
        counts = np.full(self.table.num_classes, per_class)
        return _gaussian_samples(self.class_means, counts, self.config.noise_sigma, rng)

    def __iter__(self) -> Iterator[Batch]:
        return self

    def __next__(self) -> Batch:
        cfg, rng, C = self.config, self._rng, self.table.num_classes
        k = int(rng.integers(1, cfg.max_categories_per_image + 1))
        picks = rng.choice(C, size=k, p=self.probs)
        fg = picks[rng.integers(0, k, size=self.n_fg)]
        n_bg = cfg.batch_size - self.n_fg
        labels = np.concatenate([fg, np.full(n_bg, BACKGROUND)]).astype(np.int64)
        centers = np.zeros((labels.size, cfg.feature_dim))
        centers[: self.n_fg] = self.class_means[fg]
        feats = (centers + cfg.noise_sigma * rng.standard_normal(centers.shape)).astype(np.float32)
        present = np.zeros(C, dtype=bool)
        present[picks] = True
        neg = np.zeros(C, dtype=bool)
        if cfg.known_negatives_per_image:
            absent = np.flatnonzero(~present)
            m = min(cfg.known_negatives_per_image, absent.size)
            neg[rng.choice(absent, size=m, replace=False)] = True
        B = cfg.batch_size
        return Batch(
            feats,
            labels,
            np.broadcast_to(present, (B, C)).copy(),
            np.broadcast_to(neg, (B, C)).copy() if neg.any() else None,
        )


def synth_proposal_stream(
    table: FrequencyTable,
    fg_bg_ratio=(1, 3),
    batch_size: int = 512,
    seed: int = 0,
    **kwargs,
) -> ProposalStream:
    cfg = ProposalStreamConfig(fg_ratio=fg_bg_ratio[0], bg_ratio=fg_bg_ratio[1], batch_size=batch_size, **kwargs)
    return ProposalStream(table, cfg, seed)


# ---------------------------------------------------------------- file format


def write_arrays(directory, arrays: dict, meta: dict, sidecar: str = "meta.json") -> None:
    """Write each array as a raw little-endian file plus one JSON sidecar.

    Float arrays go out as ``<f4``, integer arrays as ``<i4``, row-major.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    layout = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = "<i4" if np.issubdtype(arr.dtype, np.integer) else "<f4"
        fname = f"{name}.bin"
        np.ascontiguousarray(arr, dtype=dtype).tofile(d / fname)
        layout[name] = {"file": fname, "dtype": dtype, "shape": list(arr.shape)}
    doc = dict(meta)
    doc["arrays"] = layout
    (d / sidecar).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_arrays(directory, sidecar: str = "meta.json"):
    d = Path(directory)
    meta = json.loads((d / sidecar).read_text(encoding="utf-8"))
    arrays = {}
    for name, spec in meta["arrays"].items():
        arr = np.fromfile(d / spec["file"], dtype=spec["dtype"])
        arrays[name] = arr.reshape(spec["shape"])
    return arrays, meta


def save_dataset(ds: SyntheticClassDataset, directory, test_set=None) -> None:
    arrays = {"train_features": ds.features, "train_labels": ds.labels, "class_means": ds.class_means}
    if test_set is not None:
        arrays["test_features"], arrays["test_labels"] = test_set
    meta = {
        "kind": "longtail",
        "profile": asdict(ds.profile),
        "counts": [int(c) for c in ds.counts()],
        "total_images": int(ds.labels.size),
        "feature_dim": ds.feature_dim,
        "noise_sigma": ds.noise_sigma,
        "seed": ds.seed,
    }
    write_arrays(directory, arrays, meta)


def load_dataset(directory):
    """Inverse of :func:`save_dataset`; returns ``(dataset, test_set_or_None)``."""
    arrays, meta = read_arrays(directory)
    profile = LongTailProfile(**meta["profile"])
    ds = SyntheticClassDataset(
        arrays["train_features"],
        arrays["train_labels"].astype(np.int64),
        profile,
        arrays["class_means"].astype(np.float64),
        meta["noise_sigma"],
        meta["seed"],
    )
    test = None
    if "test_features" in arrays:
        test = (arrays["test_features"], arrays["test_labels"].astype(np.int64))
    return ds, test
