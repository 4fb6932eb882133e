"""Run configuration and end-to-end execution of a single training run."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import datagen
from .datagen import LongTailProfile, ProposalStream, ProposalStreamConfig
from .freqstats import assign_groups, build_frequency_table, lambda_for_tail_ratio, tail_ratio
from .losses import LossSpec, compute_loss
from .sampling import SamplerSpec
from .telemetry import (
    LEDGER_COLUMNS,
    GradientLedger,
    LedgerHook,
    ProbabilityLedger,
    evaluate,
    group_means,
    ledger_rows,
    ledgers_to_json,
    record_gradients,
    record_probabilities,
    rows_to_csv,
)
from .trainer import Model, TrainSchedule, batch_stream, init_model, run_streams, train

SCHEMA_VERSION = 1
CONFIG_DIR = Path(__file__).with_name("configs")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "longtail"
    num_classes: int = 100
    n_max: int = 500
    imbalance_factor: float = 200.0
    rounding: str = "floor"
    feature_dim: int = 32
    noise_sigma: float = 1.0
    mean_scale: float = 3.0
    shared_scale: float = 0.0
    test_per_class: int = 50
    # proposal streams only
    fg_ratio: int = 1
    bg_ratio: int = 3
    max_categories_per_image: int = 3
    known_negatives_per_image: int = 0
    # load a gen-data directory instead of generating (longtail only)
    path: Optional[str] = None

    def profile(self) -> LongTailProfile:
        return LongTailProfile(self.num_classes, self.n_max, self.imbalance_factor, self.rounding)


@dataclass
class ModelConfig:
    kind: str = "linear"
    hidden_dim: Optional[int] = None


@dataclass
class TelemetryConfig:
    gradients: bool = True
    probabilities: bool = True
    log_every: int = 100


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    loss: LossSpec = field(default_factory=LossSpec)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    telemetry: TelemetryConfig = field(default_factory=TelemetryConfig)
    # when set, loss.lam is replaced by the threshold giving this tail ratio
    lam_tail_ratio: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "dataset": asdict(self.dataset),
            "model": asdict(self.model),
            "sampler": self.sampler.to_dict(),
            "loss": self.loss.to_dict(),
            "schedule": self.schedule.to_dict(),
            "telemetry": asdict(self.telemetry),
            "lam_tail_ratio": self.lam_tail_ratio,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        try:
            cfg = cls(
                seed=int(d.pop("seed", 0)),
                out_dir=d.pop("out_dir", "runs/default"),
                dataset=DatasetConfig(**d.pop("dataset", {})),
                model=ModelConfig(**d.pop("model", {})),
                sampler=SamplerSpec.from_dict(d.pop("sampler", {"kind": "uniform"})),
                loss=LossSpec.from_dict(d.pop("loss", {"kind": "sigmoid_ce"})),
                schedule=TrainSchedule.from_dict(d.pop("schedule", {})),
                telemetry=TelemetryConfig(**d.pop("telemetry", {})),
                lam_tail_ratio=d.pop("lam_tail_ratio", None),
            )
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(str(e)) from e
        if d:
            raise ConfigError(f"unknown config fields {sorted(d)}")
        if cfg.dataset.kind not in ("longtail", "proposals"):
            raise ConfigError(f"unknown dataset kind {cfg.dataset.kind!r}")
        if cfg.model.kind not in ("linear", "mlp"):
            raise ConfigError(f"unknown model kind {cfg.model.kind!r}")
        if cfg.model.kind == "mlp" and not cfg.model.hidden_dim:
            raise ConfigError("mlp model needs hidden_dim")
        return cfg


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``key.sub=value`` pairs to a config dict (copy returned)."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        if isinstance(item, str):
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            value = parse_value(raw)
        else:
            key, value = item
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot descend into {p!r} while setting {key}")
        node[parts[-1]] = value
    return doc


def load_config_doc(path) -> dict:
    p = Path(path)
    if not p.exists() and (CONFIG_DIR / p).exists():
        p = CONFIG_DIR / p
    if not p.exists() and (CONFIG_DIR / f"{path}.json").exists():
        p = CONFIG_DIR / f"{path}.json"
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: {e}") from e


def load_config(path, overrides=()) -> RunConfig:
    return RunConfig.from_dict(apply_overrides(load_config_doc(path), overrides))


# ---------------------------------------------------------------- building blocks


def build_data(cfg: RunConfig):
    """Return ``(train_source, test_set, table)`` for a config."""
    dc = cfg.dataset
    if dc.kind == "longtail":
        if dc.path:
            ds, test = datagen.load_dataset(dc.path)
            if test is None:
                test = datagen.balanced_test_set(ds, dc.test_per_class)
        else:
            ds = datagen.synth_classification_dataset(
                dc.profile(), dc.feature_dim, dc.noise_sigma, cfg.seed, dc.mean_scale, dc.shared_scale
            )
            test = datagen.balanced_test_set(ds, dc.test_per_class)
        return ds, test, ds.frequency_table()
    counts = datagen.make_longtail_counts(dc.profile())
    table = build_frequency_table(counts, int(counts.sum()))
    stream = ProposalStream(
        table,
        ProposalStreamConfig(
            fg_ratio=dc.fg_ratio,
            bg_ratio=dc.bg_ratio,
            batch_size=cfg.schedule.batch_size,
            feature_dim=dc.feature_dim,
            noise_sigma=dc.noise_sigma,
            mean_scale=dc.mean_scale,
            shared_scale=dc.shared_scale,
            max_categories_per_image=dc.max_categories_per_image,
            known_negatives_per_image=dc.known_negatives_per_image,
        ),
        seed=cfg.seed,
    )
    return stream, stream.test_set(dc.test_per_class), table


def resolve_loss(cfg: RunConfig, table) -> LossSpec:
    if cfg.lam_tail_ratio is None or cfg.loss.kind not in ("eql", "seql"):
        return cfg.loss
    lam = lambda_for_tail_ratio(table, cfg.lam_tail_ratio)
    return LossSpec.from_dict({**cfg.loss.to_dict(), "lam": lam})


def build_model(cfg: RunConfig, num_classes: int) -> Model:
    hidden = cfg.model.hidden_dim if cfg.model.kind == "mlp" else None
    return init_model(cfg.dataset.feature_dim, num_classes, hidden, seed=[cfg.seed, 7])


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: Model, directory, meta: Optional[dict] = None) -> None:
    datagen.write_arrays(directory, model.params(), {"kind": model.kind, **(meta or {})})


def load_checkpoint(directory) -> Model:
    arrays, _ = datagen.read_arrays(directory)
    return Model(**{k: v.astype(np.float64) for k, v in arrays.items()})


# ---------------------------------------------------------------- runs


@dataclass
class RunResult:
    model: Model
    history: object
    report: object
    hook: LedgerHook
    loss: LossSpec
    table: object
    summary: dict


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def run(cfg: RunConfig, out_dir=None, write: bool = True) -> RunResult:
    """Build data, train, evaluate and (optionally) persist every artefact."""
    source, test, table = build_data(cfg)
    loss = resolve_loss(cfg, table)
    model = build_model(cfg, table.num_classes)
    hook = LedgerHook(table.num_classes, cfg.telemetry.gradients, cfg.telemetry.probabilities)
    model, history = train(
        model, source, cfg.sampler, loss, cfg.schedule, table, cfg.seed,
        hooks=[hook], test_set=test, log_every=cfg.telemetry.log_every,
    )
    groups = [assign_groups(table, "lvis"), assign_groups(table, "shot")]
    report = evaluate(model, test, groups)
    lvis = groups[0]
    summary = {
        "seed": cfg.seed,
        "loss": loss.to_dict(),
        "lam": loss.lam if loss.kind in ("eql", "seql") else None,
        "tail_ratio": tail_ratio(loss.lam, table) if loss.kind in ("eql", "seql") else None,
        "eval": report.to_dict(),
        "final": history.final,
    }
    if hook.gradients is not None:
        summary["grad_norm_per_iter"] = {
            "pos": group_means(hook.gradients.pos_per_iter(), lvis),
            "neg": group_means(hook.gradients.neg_per_iter(), lvis),
        }
    if hook.probabilities is not None:
        summary["positive_prob"] = group_means(hook.probabilities.average(), lvis)
    if write:
        out = Path(out_dir or cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "config.json", cfg.to_json())
        _write(out / "metrics.csv", history.to_csv())
        _write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
        rows = ledger_rows(table, hook.gradients, hook.probabilities, lvis)
        _write(out / "ledgers.csv", rows_to_csv(rows, LEDGER_COLUMNS))
        _write(out / "ledgers.json", ledgers_to_json(hook.gradients, hook.probabilities) + "\n")
        save_checkpoint(model, out / "checkpoint", {"num_classes": table.num_classes})
    return RunResult(model, history, report, hook, loss, table, summary)


def replay_ledgers(model: Model, cfg: RunConfig, loss: Optional[LossSpec] = None, iters: Optional[int] = None):
    """Frozen-weight replay: feed the run's batch sequence through ``model`` without
    updating it and accumulate gradient / probability ledgers under ``loss``."""
    source, _, table = build_data(cfg)
    loss = loss or resolve_loss(cfg, table)
    sampler_rng, loss_rng = run_streams(cfg.seed)
    batches = batch_stream(source, cfg.sampler, cfg.schedule, sampler_rng)
    grad, prob = GradientLedger(table.num_classes), ProbabilityLedger(table.num_classes)
    for _ in range(iters or cfg.schedule.total_iters):
        _, X, lab = next(batches)
        logits, h = model.forward(X)
        res = compute_loss(loss, logits, lab, table, loss_rng)
        record_gradients(grad, res.grad_logits, h, lab.targets)
        record_probabilities(prob, res.probs, lab.targets)
    return grad, prob, table
