"""Diagnostics: per-class gradient-norm and probability ledgers, and grouped accuracy."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .freqstats import FrequencyTable, GroupAssignment


def _nullable(sums, counts):
    out = np.full(sums.shape, np.nan)
    np.divide(sums, counts, out=out, where=counts > 0)
    return out


@dataclass
class GradientLedger:
    """Accumulated L2 norms of per-sample last-layer weight-gradient rows.

    For sample i and class j the contribution is ||dL/dz_ij * h_i||, filed
    under ``pos`` when the sample is a positive for j and ``neg`` otherwise.
    """

    num_classes: int
    pos_norm_sum: np.ndarray = None
    neg_norm_sum: np.ndarray = None
    pos_count: np.ndarray = None
    neg_count: np.ndarray = None
    iterations: int = 0

    def __post_init__(self):
        C = self.num_classes
        for name, dtype in (("pos_norm_sum", float), ("neg_norm_sum", float), ("pos_count", np.int64), ("neg_count", np.int64)):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(C, dtype=dtype))

    def merge(self, other: "GradientLedger") -> "GradientLedger":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge ledgers over different class counts")
        return GradientLedger(
            self.num_classes,
            self.pos_norm_sum + other.pos_norm_sum,
            self.neg_norm_sum + other.neg_norm_sum,
            self.pos_count + other.pos_count,
            self.neg_count + other.neg_count,
            self.iterations + other.iterations,
        )

    def pos_mean(self) -> np.ndarray:
        """Mean norm per positive contribution; NaN where a class had none."""
        return _nullable(self.pos_norm_sum, self.pos_count)

    def neg_mean(self) -> np.ndarray:
        return _nullable(self.neg_norm_sum, self.neg_count)

    def pos_per_iter(self) -> np.ndarray:
        """Accumulated positive norm averaged over recorded iterations."""
        return self.pos_norm_sum / max(self.iterations, 1)

    def neg_per_iter(self) -> np.ndarray:
        return self.neg_norm_sum / max(self.iterations, 1)

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "iterations": self.iterations,
            "pos_norm_sum": self.pos_norm_sum.tolist(),
            "neg_norm_sum": self.neg_norm_sum.tolist(),
            "pos_count": self.pos_count.tolist(),
            "neg_count": self.neg_count.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GradientLedger":
        return cls(
            d["num_classes"],
            np.asarray(d["pos_norm_sum"], dtype=float),
            np.asarray(d["neg_norm_sum"], dtype=float),
            np.asarray(d["pos_count"], dtype=np.int64),
            np.asarray(d["neg_count"], dtype=np.int64),
            d["iterations"],
        )


def record_gradients(ledger: GradientLedger, per_sample_logit_grads, features, labels) -> GradientLedger:
    """Add one iteration's per-sample contributions to ``ledger`` (in place)."""
    g = np.asarray(per_sample_logit_grads, dtype=np.float64)
    h = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if g.ndim != 2 or g.shape[1] != ledger.num_classes:
        raise ValueError(f"gradients must have shape (B, {ledger.num_classes})")
    if h.ndim != 2 or h.shape[0] != g.shape[0] or labels.shape != (g.shape[0],):
        raise ValueError("gradients, features and labels disagree on batch size")
    # ||g_ij * h_i|| = |g_ij| * ||h_i||
    contrib = np.abs(g) * np.linalg.norm(h, axis=1)[:, None]
    pos = np.zeros(g.shape, dtype=bool)
    fg = np.flatnonzero(labels >= 0)
    pos[fg, labels[fg]] = True
    ledger.pos_norm_sum += np.where(pos, contrib, 0.0).sum(axis=0)
    ledger.neg_norm_sum += np.where(pos, 0.0, contrib).sum(axis=0)
    n_pos = pos.sum(axis=0)
    ledger.pos_count += n_pos
    ledger.neg_count += g.shape[0] - n_pos
    ledger.iterations += 1
    return ledger


@dataclass
class ProbabilityLedger:
    """Predicted probability of the ground-truth class, summed per class."""

    num_classes: int
    prob_sum: np.ndarray = None
    count: np.ndarray = None

    def __post_init__(self):
        if self.prob_sum is None:
            self.prob_sum = np.zeros(self.num_classes)
        if self.count is None:
            self.count = np.zeros(self.num_classes, dtype=np.int64)

    def merge(self, other: "ProbabilityLedger") -> "ProbabilityLedger":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge ledgers over different class counts")
        return ProbabilityLedger(self.num_classes, self.prob_sum + other.prob_sum, self.count + other.count)

    def average(self) -> np.ndarray:
        return _nullable(self.prob_sum, self.count)

    def to_dict(self) -> dict:
        return {"num_classes": self.num_classes, "prob_sum": self.prob_sum.tolist(), "count": self.count.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ProbabilityLedger":
        return cls(d["num_classes"], np.asarray(d["prob_sum"], dtype=float), np.asarray(d["count"], dtype=np.int64))


def record_probabilities(ledger: ProbabilityLedger, probabilities, labels) -> ProbabilityLedger:
    p = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if p.ndim != 2 or p.shape[1] != ledger.num_classes or labels.shape != (p.shape[0],):
        raise ValueError(f"probabilities must have shape (B, {ledger.num_classes}) matching the labels")
    fg = np.flatnonzero(labels >= 0)
    np.add.at(ledger.prob_sum, labels[fg], p[fg, labels[fg]])
    np.add.at(ledger.count, labels[fg], 1)
    return ledger


class LedgerHook:
    """Trainer hook that feeds both ledgers every iteration."""

    def __init__(self, num_classes: int, gradients: bool = True, probabilities: bool = True):
        self.gradients = GradientLedger(num_classes) if gradients else None
        self.probabilities = ProbabilityLedger(num_classes) if probabilities else None

    def __call__(self, step):
        if self.gradients is not None:
            record_gradients(self.gradients, step.grad_logits, step.last_inputs, step.labels)
        if self.probabilities is not None:
            record_probabilities(self.probabilities, step.probs, step.labels)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    topk: dict
    group_acc: dict
    group_counts: dict
    group_correct: dict = field(default_factory=dict)
    num_samples: int = 0

    @property
    def top1(self) -> float:
        return self.topk[1]

    @property
    def top5(self) -> Optional[float]:
        return self.topk.get(5)

    def to_dict(self) -> dict:
        return {
            "num_samples": self.num_samples,
            "topk": {str(k): v for k, v in self.topk.items()},
            "group_acc": self.group_acc,
            "group_counts": self.group_counts,
        }


def topk_predictions(logits, k: int) -> np.ndarray:
    """Indices of the k largest logits per row; ties go to the lower class index."""
    return np.argsort(-np.asarray(logits), axis=1, kind="stable")[:, :k]


def evaluate_logits(logits, labels, groups: Sequence[GroupAssignment] = (), k_list=(1, 5)) -> EvalReport:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty test set")
    C = logits.shape[1]
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError("test labels must lie in [0, C)")
    if isinstance(groups, GroupAssignment):
        groups = [groups]
    kmax = min(max(k_list), C)
    top = topk_predictions(logits, kmax)
    topk = {}
    for k in k_list:
        hit = (top[:, : min(k, C)] == labels[:, None]).any(axis=1)
        topk[k] = float(hit.mean())
    correct = top[:, 0] == labels
    acc, counts, ncorrect = {}, {}, {}
    for ga in groups:
        g_of_sample = ga.as_array()[labels]
        for name in ga.names:
            m = g_of_sample == name
            n = int(m.sum())
            counts[name] = n
            ncorrect[name] = int(correct[m].sum())
            acc[name] = ncorrect[name] / n if n else None
    return EvalReport(topk, acc, counts, ncorrect, int(labels.size))


def evaluate(model, test_set, groups: Sequence[GroupAssignment] = (), k_list=(1, 5)) -> EvalReport:
    X, y = test_set
    return evaluate_logits(model.logits(X), y, groups, k_list)


# ---------------------------------------------------------------- summaries & export


def group_means(values, groups: GroupAssignment) -> dict:
    """Mean over the classes of each group, ignoring NaN entries."""
    values = np.asarray(values, dtype=float)
    out = {}
    g = groups.as_array()
    for name in groups.names:
        v = values[g == name]
        v = v[np.isfinite(v)]
        out[name] = float(v.mean()) if v.size else None
    return out


LEDGER_COLUMNS = (
    "category", "count", "group", "pos_norm_sum", "neg_norm_sum", "pos_count", "neg_count",
    "pos_mean", "neg_mean", "pos_per_iter", "neg_per_iter", "prob_mean",
)


def ledger_rows(table: FrequencyTable, grad: Optional[GradientLedger], prob: Optional[ProbabilityLedger],
                groups: Optional[GroupAssignment] = None) -> list:
    """One row per category, most frequent first (stable on category index)."""
    order = np.argsort(-table.counts, kind="stable")
    C = table.num_classes
    nan = np.full(C, np.nan)
    cols = {
        "pos_norm_sum": grad.pos_norm_sum if grad else nan,
        "neg_norm_sum": grad.neg_norm_sum if grad else nan,
        "pos_count": grad.pos_count if grad else nan,
        "neg_count": grad.neg_count if grad else nan,
        "pos_mean": grad.pos_mean() if grad else nan,
        "neg_mean": grad.neg_mean() if grad else nan,
        "pos_per_iter": grad.pos_per_iter() if grad else nan,
        "neg_per_iter": grad.neg_per_iter() if grad else nan,
        "prob_mean": prob.average() if prob else nan,
    }
    rows = []
    for j in order:
        row = {"category": int(j), "count": int(table.counts[j]), "group": groups.group[j] if groups else ""}
        for name, arr in cols.items():
            v = arr[j]
            if isinstance(v, (np.integer, int)):
                row[name] = int(v)
            else:
                row[name] = None if not np.isfinite(v) else float(v)
        rows.append(row)
    return rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows: list, columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def ledgers_to_json(grad: Optional[GradientLedger], prob: Optional[ProbabilityLedger]) -> str:
    doc = {
        "gradients": grad.to_dict() if grad else None,
        "probabilities": prob.to_dict() if prob else None,
    }
    return json.dumps(doc, sort_keys=True)
