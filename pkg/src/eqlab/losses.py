"""Classification losses with analytic logit gradients.

Every loss here works on a single sample (logits of shape ``(C,)``) or a
batch (``(B, C)``); the returned :class:`LossResult` carries the per-sample
loss, the gradient with respect to the logits and the probability the loss
assigns to each class. Batch reduction is left to the caller.

Labels are integer class indices, with ``BACKGROUND`` (-1) marking a sample
that belongs to no foreground category (sigmoid family only).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, log_expit

from .freqstats import FrequencyTable, ThresholdFn, hard_threshold

BACKGROUND = -1

LOSS_KINDS = ("softmax_ce", "sigmoid_ce", "eql", "seql", "focal", "class_balanced")
BETA_MODES = ("per_class", "per_sample", "per_call")

# parameters each kind may carry; anything else must stay at its default
_PARAMS = {
    "softmax_ce": set(),
    "sigmoid_ce": set(),
    "eql": {"lam", "threshold"},
    "seql": {"lam", "threshold", "gamma_ignore", "beta_mode"},
    "focal": {"focal_gamma", "focal_alpha"},
    "class_balanced": {"cb_beta"},
}


@dataclass(frozen=True)
class LossSpec:
    kind: str = "sigmoid_ce"
    lam: float = 0.0
    threshold: Optional[ThresholdFn] = None
    gamma_ignore: float = 0.0
    beta_mode: str = "per_class"
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    cb_beta: float = 0.999

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0.0 <= self.gamma_ignore <= 1.0:
            raise ValueError("gamma_ignore must lie in [0, 1]")
        if self.beta_mode not in BETA_MODES:
            raise ValueError(f"beta_mode must be one of {BETA_MODES}")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if not 0.0 < self.focal_alpha <= 1.0:
            raise ValueError("focal_alpha must lie in (0, 1]")
        if not 0.0 <= self.cb_beta < 1.0:
            raise ValueError("cb_beta must lie in [0, 1)")

    @property
    def tail_fn(self) -> ThresholdFn:
        """Tail indicator for eql/seql; defaults to the hard step at ``lam``."""
        return self.threshold if self.threshold is not None else hard_threshold(self.lam)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for name in sorted(_PARAMS[self.kind]):
            val = getattr(self, name)
            if name == "threshold":
                if val is not None:
                    for k, v in val.to_dict().items():
                        d["threshold" if k == "variant" else f"threshold_{k}"] = v
                continue
            d[name] = val
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossSpec":
        d = dict(d)
        kind = d.pop("kind")
        allowed = _PARAMS.get(kind)
        if allowed is None:
            raise ValueError(f"unknown loss kind {kind!r}")
        thr = {}
        if "threshold" in d:
            thr["variant"] = d.pop("threshold")
        for k in list(d):
            if k.startswith("threshold_"):
                thr[k[len("threshold_"):]] = d.pop(k)
        extra = set(d) - allowed
        if extra or (thr and "threshold" not in allowed):
            raise ValueError(f"parameters {sorted(extra) or ['threshold']} do not apply to {kind}")
        threshold = ThresholdFn.from_dict(thr) if thr else None
        return cls(kind=kind, threshold=threshold, **d)


@dataclass(frozen=True)
class SampleLabel:
    category: Optional[int] = None
    known_positive_set: frozenset = field(default_factory=frozenset)
    known_negative_set: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "known_positive_set", frozenset(self.known_positive_set))
        object.__setattr__(self, "known_negative_set", frozenset(self.known_negative_set))
        if self.known_positive_set & self.known_negative_set:
            raise ValueError("known positive and negative sets must be disjoint")

    @property
    def is_background(self) -> bool:
        return self.category is None


@dataclass
class LossResult:
    loss: np.ndarray
    grad_logits: np.ndarray
    probs: np.ndarray
    beta: Optional[np.ndarray] = None

    def __post_init__(self):
        # collapse single-sample results back to scalars / vectors
        if np.ndim(self.loss) == 0:
            self.loss = float(self.loss)


@dataclass
class Labels:
    """Batch labels: integer targets plus optional known-category masks."""

    targets: np.ndarray
    known_pos: Optional[np.ndarray] = None
    known_neg: Optional[np.ndarray] = None

    @property
    def override(self) -> Optional[np.ndarray]:
        if self.known_pos is None and self.known_neg is None:
            return None
        if self.known_pos is None:
            return self.known_neg
        if self.known_neg is None:
            return self.known_pos
        return self.known_pos | self.known_neg


def _prepare(logits, label, num_classes=None):
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    if z2.ndim != 2:
        raise ValueError("logits must have shape (C,) or (B, C)")
    if not np.all(np.isfinite(z2)):
        raise ValueError("logits must be finite")
    B, C = z2.shape
    if num_classes is not None and num_classes != C:
        raise ValueError(f"logits have {C} classes but the frequency table has {num_classes}")
    lab = _as_labels(label, B, C)
    t = lab.targets
    if np.any((t < BACKGROUND) | (t >= C)):
        raise ValueError("labels must be background (-1) or lie in [0, C)")
    return z2, lab, single


def _as_labels(label, B, C) -> Labels:
    if isinstance(label, Labels):
        lab = label
    elif isinstance(label, SampleLabel):
        pos = np.zeros((1, C), dtype=bool)
        neg = np.zeros((1, C), dtype=bool)
        pos[0, sorted(label.known_positive_set)] = True
        neg[0, sorted(label.known_negative_set)] = True
        cat = BACKGROUND if label.category is None else label.category
        lab = Labels(np.array([cat]), pos if pos.any() else None, neg if neg.any() else None)
    else:
        lab = Labels(np.atleast_1d(np.asarray(label, dtype=np.int64)))
    if lab.targets.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {lab.targets.shape}")
    for m in (lab.known_pos, lab.known_neg):
        if m is not None and m.shape != (B, C):
            raise ValueError("known-category masks must have shape (B, C)")
    return lab


def _onehot(targets, C):
    y = np.zeros((targets.size, C))
    fg = targets >= 0
    y[np.flatnonzero(fg), targets[fg]] = 1.0
    return y


def _finish(loss, grad, probs, single, beta=None):
    if single:
        loss, grad, probs = loss[0], grad[0], probs[0]
        if beta is not None:
            beta = beta[0]
    return LossResult(loss, grad, probs, beta)


# ---------------------------------------------------------------- sigmoid family


def _sigmoid_terms(z, y):
    # -log p_hat = log(1 + exp(-|z|)) + max(-s z, 0) with s = +1 for positives
    nll = np.logaddexp(0.0, -np.abs(z)) + np.maximum(np.where(y > 0, -z, z), 0.0)
    p = expit(z)
    return nll, p - y, p


def _weighted_sigmoid(z, lab, w):
    y = _onehot(lab.targets, z.shape[1])
    nll, g, p = _sigmoid_terms(z, y)
    if w is not None:
        nll = w * nll
        g = w * g
    return nll.sum(axis=1), g, p


def sigmoid_ce(logits, label) -> LossResult:
    """Independent per-class sigmoid cross-entropy; background rows are all-negative."""
    z, lab, single = _prepare(logits, label)
    loss, g, p = _weighted_sigmoid(z, lab, None)
    return _finish(loss, g, p, single)


def eql_weights(label, table: FrequencyTable, spec: LossSpec, num_classes: Optional[int] = None) -> np.ndarray:
    """w_j = 1 - E(r) T(f_j) (1 - y_j), reset to 1 on known positive/negative categories."""
    if spec.kind != "eql":
        raise ValueError("eql_weights needs a LossSpec of kind 'eql'")
    C = table.num_classes
    if num_classes is not None and num_classes != C:
        raise ValueError(f"logits have {num_classes} classes but the frequency table has {C}")
    if isinstance(label, Labels):
        single, B = False, label.targets.size
    else:
        single = isinstance(label, SampleLabel) or np.ndim(label) == 0
        B = 1 if single else len(label)
    w = _eql_weight_matrix(_as_labels(label, B, C), table, spec.tail_fn)
    return w[0] if single else w


def _eql_weight_matrix(lab, table, tail_fn):
    C = table.num_classes
    y = _onehot(lab.targets, C)
    fg = (lab.targets >= 0).astype(np.float64)[:, None]
    tail = np.asarray(tail_fn(table.freqs), dtype=np.float64)[None, :]
    w = 1.0 - fg * tail * (1.0 - y)
    ov = lab.override
    if ov is not None:
        w = np.where(ov, 1.0, w)
    return w


def eql_loss(logits, label, table: FrequencyTable, spec: LossSpec) -> LossResult:
    """Equalization loss: sigmoid CE with tail negatives dropped on foreground samples."""
    if spec.kind != "eql":
        raise ValueError("eql_loss needs a LossSpec of kind 'eql'")
    z, lab, single = _prepare(logits, label, table.num_classes)
    w = _eql_weight_matrix(lab, table, spec.tail_fn)
    loss, g, p = _weighted_sigmoid(z, lab, w)
    return _finish(loss, g, p, single)


def focal_loss(logits, label, spec: LossSpec) -> LossResult:
    """Sigmoid focal loss, sum over classes of -alpha_t (1 - p_hat)^gamma log p_hat."""
    if spec.kind != "focal":
        raise ValueError("focal_loss needs a LossSpec of kind 'focal'")
    z, lab, single = _prepare(logits, label)
    y = _onehot(lab.targets, z.shape[1])
    s = 2.0 * y - 1.0
    sz = s * z
    log_q = log_expit(sz)
    q = expit(sz)
    one_minus_q = expit(-sz)
    gam = spec.focal_gamma
    alpha_t = np.where(y > 0, spec.focal_alpha, 1.0 - spec.focal_alpha)
    mod = one_minus_q**gam
    per_class = -alpha_t * mod * log_q
    grad = s * alpha_t * (gam * mod * q * log_q - mod * one_minus_q)
    return _finish(per_class.sum(axis=1), grad, expit(z), single)


def class_balanced_weights(table: FrequencyTable, cb_beta: float) -> np.ndarray:
    """Inverse effective-number weights (1 - beta) / (1 - beta^N_c), scaled to sum to C."""
    n = np.maximum(table.counts, 1).astype(np.float64)
    w = (1.0 - cb_beta) / (1.0 - np.power(cb_beta, n))
    return w * (w.size / w.sum())


def class_balanced_loss(logits, label, table: FrequencyTable, spec: LossSpec) -> LossResult:
    """Sigmoid CE scaled per sample by the class-balanced weight of its ground-truth class."""
    if spec.kind != "class_balanced":
        raise ValueError("class_balanced_loss needs a LossSpec of kind 'class_balanced'")
    z, lab, single = _prepare(logits, label, table.num_classes)
    cw = class_balanced_weights(table, spec.cb_beta)
    sw = np.where(lab.targets >= 0, cw[np.maximum(lab.targets, 0)], 1.0)[:, None]
    y = _onehot(lab.targets, z.shape[1])
    nll, g, p = _sigmoid_terms(z, y)
    return _finish((sw * nll).sum(axis=1), sw * g, p, single)


# ---------------------------------------------------------------- softmax family


def _weighted_softmax(z, targets, w):
    """Loss, gradient and p~ for -log(e^{z_c} / sum_k w_k e^{z_k}); ``w=None`` means all ones."""
    if np.any(targets < 0):
        raise ValueError("softmax losses need a foreground class for every sample")
    rows = np.arange(z.shape[0])
    if w is None:
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        denom = e.sum(axis=1, keepdims=True)
        probs = e / denom
        grad = probs.copy()
    else:
        # shift by the largest kept logit; ignored classes may sit far above it
        kept = w > 0
        shifted = z - np.where(kept, z, -np.inf).max(axis=1, keepdims=True)
        e = np.exp(np.where(kept, shifted, -np.inf)) * w
        denom = e.sum(axis=1, keepdims=True)
        grad = e / denom
        probs = np.exp(np.minimum(shifted, 700.0)) / denom
    # log(sum) >= shifted_c analytically; clamp the last-ulp rounding
    loss = np.maximum(np.log(denom[:, 0]) - shifted[rows, targets], 0.0)
    grad[rows, targets] -= 1.0
    return loss, grad, probs


def softmax_ce(logits, label) -> LossResult:
    z, lab, single = _prepare(logits, label)
    loss, g, p = _weighted_softmax(z, lab.targets, None)
    return _finish(loss, g, p, single)


def draw_beta(rng: np.random.Generator, shape, gamma_ignore: float, mode: str = "per_class") -> np.ndarray:
    """Bernoulli(gamma_ignore) ignore switches for seql, shaped (B, C)."""
    B, C = shape
    if mode == "per_class":
        u = rng.random((B, C))
    elif mode == "per_sample":
        u = np.repeat(rng.random((B, 1)), C, axis=1)
    elif mode == "per_call":
        u = np.full((B, C), rng.random())
    else:
        raise ValueError(f"unknown beta mode {mode!r}")
    return (u < gamma_ignore).astype(np.float64)


def seql_loss(
    logits,
    label,
    table: FrequencyTable,
    spec: LossSpec,
    rng: Optional[np.random.Generator] = None,
    beta: Optional[np.ndarray] = None,
) -> LossResult:
    """Softmax equalization loss.

    Tail classes are dropped from the softmax denominator when their
    Bernoulli switch fires. Pass ``beta`` to replay a fixed realization
    instead of drawing from ``rng``; the realization used is returned on the
    result either way.

    The returned ``probs`` are the reweighted p~_j = w~_j e^{z_j} / sum_k w~_k e^{z_k},
    which sum to one over the classes that were kept.
    """
    if spec.kind != "seql":
        raise ValueError("seql_loss needs a LossSpec of kind 'seql'")
    z, lab, single = _prepare(logits, label, table.num_classes)
    if beta is None:
        if rng is None:
            raise ValueError("seql_loss needs an rng or a fixed beta realization")
        beta = draw_beta(rng, z.shape, spec.gamma_ignore, spec.beta_mode)
    else:
        beta = np.asarray(beta, dtype=np.float64)
        beta = np.broadcast_to(beta[None, :] if beta.ndim == 1 else beta, z.shape)
    y = _onehot(lab.targets, z.shape[1])
    tail = np.asarray(spec.tail_fn(table.freqs), dtype=np.float64)[None, :]
    w = 1.0 - beta * tail * (1.0 - y)
    loss, g, p = _weighted_softmax(z, lab.targets, w)
    return _finish(loss, g, p, single, beta=np.array(beta))


# ---------------------------------------------------------------- dispatch


def compute_loss(
    spec: LossSpec,
    logits,
    label,
    table: Optional[FrequencyTable] = None,
    rng: Optional[np.random.Generator] = None,
) -> LossResult:
    kind = spec.kind
    if kind == "softmax_ce":
        return softmax_ce(logits, label)
    if kind == "sigmoid_ce":
        return sigmoid_ce(logits, label)
    if table is None:
        raise ValueError(f"{kind} needs a frequency table")
    if kind == "eql":
        return eql_loss(logits, label, table, spec)
    if kind == "seql":
        return seql_loss(logits, label, table, spec, rng=rng)
    if kind == "focal":
        return focal_loss(logits, label, spec)
    return class_balanced_loss(logits, label, table, spec)


def is_softmax_family(spec: LossSpec) -> bool:
    return spec.kind in ("softmax_ce", "seql")

