"""Category statistics: image counts, frequencies, LVIS-style groups, tail ratio
and the family of tail-indicator functions used by the equalization losses."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

RARE_MAX = 10
COMMON_MAX = 100

# ImageNet-LT style shot groups: many > 100, medium 20..100, few < 20.
FEW_MAX = 19
MEDIUM_MAX = 100

LVIS_GROUPS = ("rare", "common", "frequent")
SHOT_GROUPS = ("few", "medium", "many")


@dataclass(frozen=True)
class FrequencyTable:
    counts: np.ndarray
    total_images: int
    freqs: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 1:
            raise ValueError("counts must be a 1-d sequence")
        if counts.size and not np.issubdtype(counts.dtype, np.integer):
            if not np.all(np.equal(np.mod(counts, 1), 0)):
                raise ValueError("counts must be integers")
        counts = counts.astype(np.int64)
        if self.total_images <= 0:
            raise ValueError(f"total_images must be positive, got {self.total_images}")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        if np.any(counts > self.total_images):
            raise ValueError("a category cannot appear in more images than the dataset holds")
        counts.setflags(write=False)
        freqs = counts / float(self.total_images)
        freqs.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "total_images", int(self.total_images))
        object.__setattr__(self, "freqs", freqs)

    @property
    def num_classes(self) -> int:
        return int(self.counts.size)

    def __eq__(self, other):
        if not isinstance(other, FrequencyTable):
            return NotImplemented
        return self.total_images == other.total_images and np.array_equal(self.counts, other.counts)

    __hash__ = None

    def to_dict(self) -> dict:
        return {"total_images": self.total_images, "counts": [int(c) for c in self.counts]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "FrequencyTable":
        return build_frequency_table(d["counts"], d["total_images"])

    @classmethod
    def from_json(cls, s: str) -> "FrequencyTable":
        return cls.from_dict(json.loads(s))


def build_frequency_table(per_category_image_counts: Sequence[int], total_images: int) -> FrequencyTable:
    """f_j = N_j / total_images, from per-category image counts."""
    return FrequencyTable(np.asarray(per_category_image_counts), int(total_images))


@dataclass(frozen=True)
class GroupAssignment:
    group: tuple
    scheme: str = "lvis"
    thresholds: tuple = (RARE_MAX, COMMON_MAX)

    @property
    def names(self) -> tuple:
        return LVIS_GROUPS if self.scheme == "lvis" else SHOT_GROUPS

    def members(self, name: str) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.group) == name)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.group)


def assign_groups(table: FrequencyTable, scheme: str = "lvis") -> GroupAssignment:
    """Bucket categories by image count.

    ``scheme="lvis"`` gives rare (1-10), common (11-100), frequent (>100);
    ``scheme="shot"`` gives few (<20), medium (20-100), many (>100).
    """
    counts = table.counts
    empty = np.flatnonzero(counts < 1)
    if empty.size:
        raise ValueError(f"categories {empty.tolist()} have no images; group is undefined")
    if scheme == "lvis":
        lo, hi, names = RARE_MAX, COMMON_MAX, LVIS_GROUPS
    elif scheme == "shot":
        lo, hi, names = FEW_MAX, MEDIUM_MAX, SHOT_GROUPS
    else:
        raise ValueError(f"unknown grouping scheme {scheme!r}")
    labels = np.where(counts <= lo, names[0], np.where(counts <= hi, names[1], names[2]))
    return GroupAssignment(tuple(str(g) for g in labels), scheme=scheme, thresholds=(lo, hi))


def threshold_indicator(f, lam):
    """1 where f < lam (strict), else 0. Vectorised over f."""
    out = (np.asarray(f) < lam).astype(np.int64)
    return int(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ThresholdFn:
    """Tail indicator T(f). ``hard`` is the step function below ``lam``; the
    two decay variants are smooth alternatives, clamped to [0, 1]."""

    variant: str = "hard"
    lam: float = 0.0
    a: float = 1.0
    n: float = 1.0
    b: float = 1.0
    c: float = 1.0

    def __post_init__(self):
        if self.variant == "hard":
            if self.lam < 0:
                raise ValueError("lam must be >= 0")
        elif self.variant == "exponential":
            if not (self.a > 0 and self.n > 0):
                raise ValueError("exponential decay needs a > 0 and n > 0")
        elif self.variant == "gompertz":
            if not (self.a > 0 and self.b > 0 and self.c > 0):
                raise ValueError("gompertz decay needs a, b, c > 0")
        else:
            raise ValueError(f"unknown threshold variant {self.variant!r}")

    def __call__(self, f):
        return eval_threshold_fn(self, f)

    def to_dict(self) -> dict:
        if self.variant == "hard":
            return {"variant": "hard", "lam": self.lam}
        if self.variant == "exponential":
            return {"variant": "exponential", "a": self.a, "n": self.n}
        return {"variant": "gompertz", "a": self.a, "b": self.b, "c": self.c}

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdFn":
        return cls(**d)


def hard_threshold(lam: float) -> ThresholdFn:
    return ThresholdFn("hard", lam=float(lam))


def exponential_decay(a: float = 400.0, n: float = 2.0) -> ThresholdFn:
    return ThresholdFn("exponential", a=float(a), n=float(n))


def gompertz_decay(a: float = 1.0, b: float = 80.0, c: float = 3000.0) -> ThresholdFn:
    return ThresholdFn("gompertz", a=float(a), b=float(b), c=float(c))


def eval_threshold_fn(fn: ThresholdFn, f):
    f = np.asarray(f, dtype=np.float64)
    if fn.variant == "hard":
        out = (f < fn.lam).astype(np.float64)
    elif fn.variant == "exponential":
        out = np.clip(1.0 - (fn.a * f) ** fn.n, 0.0, 1.0)
    else:
        out = np.clip(1.0 - fn.a * np.exp(-fn.b * np.exp(-fn.c * f)), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def tail_ratio(lam: float, table: FrequencyTable) -> float:
    """Share of all category-image occurrences that fall in categories with f < lam."""
    if table.num_classes == 0:
        raise ValueError("empty frequency table")
    total = table.counts.sum()
    if total == 0:
        raise ValueError("frequency table has no images")
    tail = np.asarray(threshold_indicator(table.freqs, lam)) * table.counts
    return float(tail.sum() / total)


def lambda_for_tail_ratio(table: FrequencyTable, target: float) -> float:
    """Pick the hard threshold whose tail ratio is closest to ``target``.

    Candidates sit midway between consecutive distinct frequencies, so the
    returned value never coincides with an actual f_j.
    """
    uniq = np.unique(table.freqs)
    edges = np.concatenate([uniq, [uniq[-1] * 2 + 1.0]])
    cands = [0.0] + [0.5 * (edges[i] + edges[i + 1]) for i in range(len(uniq))]
    trs = [tail_ratio(c, table) for c in cands]
    best = min(range(len(cands)), key=lambda i: (abs(trs[i] - target), i))
    return float(cands[best])

