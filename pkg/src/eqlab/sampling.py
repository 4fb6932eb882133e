"""Batch composition strategies: uniform, class-aware and repeat-factor sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SAMPLER_KINDS = ("uniform", "class_aware", "repeat_factor")


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "uniform"
    rf_threshold: float = 1e-3

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if not 0.0 < self.rf_threshold <= 1.0:
            raise ValueError("rf_threshold must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "repeat_factor":
            d["rf_threshold"] = self.rf_threshold
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerSpec":
        return cls(**d)


def repeat_factors(counts, threshold: float) -> np.ndarray:
    """r(c) = max(1, sqrt(t / f_c)) with f_c the fraction of samples in class c."""
    counts = np.asarray(counts, dtype=np.float64)
    f = counts / counts.sum()
    with np.errstate(divide="ignore"):
        r = np.sqrt(threshold / f)
    return np.maximum(1.0, r)


class Sampler:
    """Draws sample indices from a labelled dataset according to a :class:`SamplerSpec`.

    Single-label setting: every sample's repeat factor is its class's.
    """

    def __init__(self, spec: SamplerSpec, labels):
        labels = np.asarray(labels)
        if labels.size == 0:
            raise ValueError("cannot sample from an empty dataset")
        self.spec = spec
        self.labels = labels
        C = int(labels.max()) + 1
        self.counts = np.bincount(labels, minlength=C)
        if spec.kind == "class_aware":
            self.classes = np.flatnonzero(self.counts)
            self._order = np.argsort(labels, kind="stable")
            self._starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]])
            self.probs = None
        elif spec.kind == "repeat_factor":
            w = repeat_factors(self.counts, spec.rf_threshold)[labels]
            self.probs = w / w.sum()
        else:
            self.probs = None

    def sample_weights(self) -> np.ndarray:
        """Per-sample probability of a single draw."""
        n = self.labels.size
        if self.spec.kind == "uniform":
            return np.full(n, 1.0 / n)
        if self.spec.kind == "repeat_factor":
            return self.probs.copy()
        per_class = 1.0 / (len(self.classes) * self.counts[self.labels])
        return per_class

    def next_batch(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if batch_size <= 0:
            raise ValueError("batch_size must be positive")
        n = self.labels.size
        if self.spec.kind == "uniform":
            return rng.integers(0, n, size=batch_size)
        if self.spec.kind == "repeat_factor":
            return rng.choice(n, size=batch_size, p=self.probs)
        cats = self.classes[rng.integers(0, len(self.classes), size=batch_size)]
        offset = rng.integers(0, self.counts[cats])
        return self._order[self._starts[cats] + offset]


def next_batch(spec: SamplerSpec, labels, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """One-shot convenience wrapper; build a :class:`Sampler` for repeated use."""
    return Sampler(spec, labels).next_batch(batch_size, rng)
