"""SGD training of small classifiers (linear or one hidden layer) on synthetic data."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .datagen import ProposalStream, SyntheticClassDataset
from .freqstats import FrequencyTable, assign_groups
from .losses import LossSpec, Labels, compute_loss, is_softmax_family
from .sampling import Sampler, SamplerSpec
from .telemetry import evaluate_logits


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------- model


@dataclass
class Model:
    """Last layer ``W`` (C, h), ``b`` (C,); optional ReLU hidden layer ``W1`` (h, d), ``b1``."""

    W: np.ndarray
    b: np.ndarray
    W1: Optional[np.ndarray] = None
    b1: Optional[np.ndarray] = None

    @property
    def kind(self) -> str:
        return "linear" if self.W1 is None else "mlp"

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    def params(self) -> dict:
        p = {"W": self.W, "b": self.b}
        if self.W1 is not None:
            p["W1"] = self.W1
            p["b1"] = self.b1
        return p

    def copy(self) -> "Model":
        return Model(**{k: v.copy() for k, v in self.params().items()})

    def forward(self, X):
        """Return ``(logits, last_inputs)``; ``last_inputs`` feed the per-class rows."""
        X = np.asarray(X, dtype=np.float64)
        if self.W1 is None:
            h = X
        else:
            h = np.maximum(X @ self.W1.T + self.b1, 0.0)
        return h @ self.W.T + self.b, h

    def logits(self, X):
        return self.forward(X)[0]

    def backward(self, X, h, G) -> dict:
        """Parameter gradients for upstream logit gradient ``G`` (already batch-scaled)."""
        grads = {"W": G.T @ h, "b": G.sum(axis=0)}
        if self.W1 is not None:
            dh = (G @ self.W) * (h > 0)
            grads["W1"] = dh.T @ np.asarray(X, dtype=np.float64)
            grads["b1"] = dh.sum(axis=0)
        return grads


def init_model(in_dim: int, num_classes: int, hidden_dim: Optional[int] = None, seed=0, scale: float = 0.01) -> Model:
    rng = np.random.default_rng(seed)
    if hidden_dim:
        W1 = rng.standard_normal((hidden_dim, in_dim)) * np.sqrt(2.0 / in_dim)
        b1 = np.zeros(hidden_dim)
        W = rng.standard_normal((num_classes, hidden_dim)) * scale
        return Model(W, np.zeros(num_classes), W1, b1)
    return Model(rng.standard_normal((num_classes, in_dim)) * scale, np.zeros(num_classes))


# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class TrainSchedule:
    total_iters: int = 2000
    base_lr: float = 0.1
    lr_decay_points: tuple = (1000, 1500)
    lr_decay_factor: float = 0.1
    warmup_iters: int = 0
    warmup_start_lr: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    nesterov: bool = False

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_points", tuple(int(p) for p in self.lr_decay_points))
        pts = self.lr_decay_points
        if self.total_iters <= 0 or self.batch_size <= 0:
            raise ValueError("total_iters and batch_size must be positive")
        if list(pts) != sorted(pts):
            raise ValueError("lr_decay_points must be increasing")
        if pts and not (self.warmup_iters < pts[0] and pts[-1] < self.total_iters):
            raise ValueError("need warmup_iters < first decay point and last decay point < total_iters")
        if not pts and self.warmup_iters >= self.total_iters:
            raise ValueError("warmup must end before training does")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_points"] = list(self.lr_decay_points)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        return cls(**d)


def cifar_lt_schedule() -> TrainSchedule:
    """The CIFAR-100-LT recipe: 12.8K iterations, lr 0.2 with a 400-iteration warmup from 0.1."""
    return TrainSchedule(12800, 0.2, (6400, 9600), 0.1, 400, 0.1, 0.9, 1e-4, 256, nesterov=True)


def imagenet_lt_schedule() -> TrainSchedule:
    return TrainSchedule(12000, 0.4, (3400, 6800, 10200), 0.1, 500, 0.1, 0.9, 1e-4, 1024)


def desk_schedule() -> TrainSchedule:
    return TrainSchedule()


def lr_at(schedule: TrainSchedule, it: int) -> float:
    if not 0 <= it < schedule.total_iters:
        raise ValueError(f"iteration {it} outside [0, {schedule.total_iters})")
    if it < schedule.warmup_iters:
        frac = it / schedule.warmup_iters
        return schedule.warmup_start_lr + (schedule.base_lr - schedule.warmup_start_lr) * frac
    k = sum(1 for p in schedule.lr_decay_points if it >= p)
    return schedule.base_lr * schedule.lr_decay_factor**k


# ---------------------------------------------------------------- training loop


@dataclass
class StepInfo:
    """What a hook sees after the forward/backward pass of one iteration."""

    iteration: int
    lr: float
    indices: Optional[np.ndarray]
    features: np.ndarray
    last_inputs: np.ndarray
    labels: np.ndarray
    logits: np.ndarray
    grad_logits: np.ndarray
    probs: np.ndarray
    loss: float
    model: Model
    beta: Optional[np.ndarray] = None


METRIC_COLUMNS = (
    "iter", "lr", "loss", "train_top1", "test_top1", "test_top5",
    "acc_rare", "acc_common", "acc_frequent", "acc_many", "acc_medium", "acc_few",
)


@dataclass
class MetricsHistory:
    rows: list = field(default_factory=list)

    def append(self, row: dict) -> None:
        self.rows.append(row)

    @property
    def final(self) -> dict:
        return self.rows[-1] if self.rows else {}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.rows:
            w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in METRIC_COLUMNS])
        return buf.getvalue()


def run_streams(seed):
    """Independent (sampler, loss) random generators for a run seed."""
    return tuple(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))


def batch_stream(dataset, sampler_spec, schedule, rng):
    """Yield ``(indices, features, Labels)`` forever."""
    if isinstance(dataset, ProposalStream):
        while True:
            b = next(dataset)
            yield None, b.features, Labels(b.labels, b.known_pos, b.known_neg)
    else:
        sampler = Sampler(sampler_spec, dataset.labels)
        while True:
            idx = sampler.next_batch(schedule.batch_size, rng)
            yield idx, dataset.features[idx], Labels(dataset.labels[idx])


def train(
    model: Model,
    dataset,
    sampler: SamplerSpec,
    loss: LossSpec,
    schedule: TrainSchedule,
    table: FrequencyTable,
    seed: int = 0,
    hooks: Sequence[Callable[[StepInfo], None]] = (),
    test_set=None,
    log_every: int = 100,
):
    """Run SGD for ``schedule.total_iters`` steps; returns ``(model, MetricsHistory)``.

    ``model`` is updated in place. ``dataset`` is either a
    :class:`SyntheticClassDataset` (batches drawn by ``sampler``) or a
    :class:`ProposalStream` (consumed as-is). The sampler and the loss get
    independent random streams derived from ``seed``, so losses that draw
    random numbers do not perturb the batch sequence.
    """
    if table.num_classes != model.num_classes:
        raise ValueError("frequency table and model disagree on the number of classes")
    if isinstance(dataset, SyntheticClassDataset) and dataset.feature_dim != (model.W1 if model.W1 is not None else model.W).shape[1]:
        raise ValueError("dataset feature dimension does not match the model input")
    if isinstance(dataset, ProposalStream) and is_softmax_family(loss):
        raise ValueError("softmax losses have no background class; use a sigmoid-family loss on proposal streams")

    sampler_rng, loss_rng = run_streams(seed)
    groups = []
    if np.all(table.counts >= 1):
        groups = [assign_groups(table, "lvis"), assign_groups(table, "shot")]

    params = model.params()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    decayed = {"W", "W1"}
    history = MetricsHistory()
    batches = batch_stream(dataset, sampler, schedule, sampler_rng)
    window_loss, window_hits, window_n, window_steps = 0.0, 0, 0, 0

    for it in range(schedule.total_iters):
        lr = lr_at(schedule, it)
        idx, X, lab = next(batches)
        # overflow surfaces as non-finite logits and is reported by the guard below
        with np.errstate(over="ignore", invalid="ignore"):
            logits, h = model.forward(X)
        if not np.all(np.isfinite(logits)):
            raise DivergenceError(f"non-finite logits at iteration {it} (lr={lr})")
        res = compute_loss(loss, logits, lab, table, loss_rng)
        batch_loss = float(np.mean(res.loss))
        if not np.isfinite(batch_loss):
            raise DivergenceError(f"non-finite loss {batch_loss} at iteration {it} (lr={lr})")
        B = logits.shape[0]
        G = res.grad_logits / B
        grads = model.backward(X, h, G)
        for name, g in grads.items():
            if name in decayed and schedule.weight_decay:
                g = g + schedule.weight_decay * params[name]
            v = velocity[name]
            v *= schedule.momentum
            v += g
            step = g + schedule.momentum * v if schedule.nesterov else v
            with np.errstate(over="ignore", invalid="ignore"):
                params[name] -= lr * step
        if hooks:
            info = StepInfo(it, lr, idx, X, h, lab.targets, logits, res.grad_logits, res.probs, batch_loss, model, res.beta)
            for hook in hooks:
                hook(info)

        fg = lab.targets >= 0
        window_loss += batch_loss
        window_hits += int((logits[fg].argmax(axis=1) == lab.targets[fg]).sum())
        window_n += int(fg.sum())
        window_steps += 1
        if (it + 1) % log_every == 0 or it + 1 == schedule.total_iters:
            row = {
                "iter": it + 1,
                "lr": lr,
                "loss": window_loss / window_steps,
                "train_top1": window_hits / window_n if window_n else None,
            }
            if test_set is not None:
                rep = evaluate_logits(model.logits(test_set[0]), test_set[1], groups)
                row["test_top1"] = rep.top1
                row["test_top5"] = rep.top5
                for name, acc in rep.group_acc.items():
                    row[f"acc_{name}"] = acc
            history.append(row)
            window_loss, window_hits, window_n, window_steps = 0.0, 0, 0, 0
    return model, history
