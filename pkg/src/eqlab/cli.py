"""Command-line experiment runner.

Subcommands: gen-data, train, sweep, eval, export-ledgers. Exit codes are
0 on success, 1 for configuration errors, 2 when training diverges and 3
for I/O failures.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import datagen
from .experiment import (
    ConfigError,
    RunConfig,
    apply_overrides,
    build_data,
    load_checkpoint,
    load_config_doc,
    replay_ledgers,
    resolve_loss,
    run,
)
from .freqstats import assign_groups
from .losses import LossSpec
from .telemetry import LEDGER_COLUMNS, GradientLedger, ProbabilityLedger, evaluate, ledger_rows, rows_to_csv
from .trainer import DivergenceError

log = logging.getLogger("eqlab")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3

SWEEP_METRICS = (
    "top1", "top5", "acc_rare", "acc_common", "acc_frequent", "acc_many", "acc_medium", "acc_few", "lam", "tail_ratio",
)


def _config_from_args(args) -> RunConfig:
    doc = load_config_doc(args.config) if args.config else {}
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(("seed", args.seed))
    if getattr(args, "out", None):
        overrides.append(("out_dir", args.out))
    return RunConfig.from_dict(apply_overrides(doc, overrides))


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out or cfg.out_dir)
    dc = cfg.dataset
    if dc.kind == "longtail":
        ds = datagen.synth_classification_dataset(
            dc.profile(), dc.feature_dim, dc.noise_sigma, cfg.seed, dc.mean_scale, dc.shared_scale
        )
        datagen.save_dataset(ds, out, datagen.balanced_test_set(ds, dc.test_per_class))
        counts = ds.counts()
    else:
        stream, test, table = build_data(cfg)
        batches = [next(stream) for _ in range(args.batches)]
        arrays = {
            "features": np.concatenate([b.features for b in batches]),
            "labels": np.concatenate([b.labels for b in batches]),
            "test_features": test[0],
            "test_labels": test[1],
        }
        meta = {"kind": "proposals", "seed": cfg.seed, "table": table.to_dict(), "batches": args.batches,
                "batch_size": cfg.schedule.batch_size, "feature_dim": dc.feature_dim}
        datagen.write_arrays(out, arrays, meta)
        counts = table.counts
    print(json.dumps({"out": str(out), "max_count": int(counts.max()), "min_count": int(counts.min()),
                      "total": int(counts.sum())}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    result = run(cfg)
    print(json.dumps({"out": cfg.out_dir, "top1": result.report.top1, "group_acc": result.report.group_acc}))
    return EXIT_OK


def _grid_points(grid: dict):
    if not grid:
        raise ConfigError("sweep grid is empty")
    keys = sorted(grid)
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigError(f"grid entry {k!r} must be a non-empty list")
    for combo in itertools.product(*(grid[k] for k in keys)):
        yield dict(zip(keys, combo))


def _sweep_one(job):
    i, base_doc, point, out_root = job
    row = {"run": i, **{f"param:{k}": v for k, v in point.items()}}
    run_dir = Path(out_root) / f"run_{i:03d}"
    try:
        doc = apply_overrides(base_doc, list(point.items()) + [("out_dir", str(run_dir))])
        cfg = RunConfig.from_dict(doc)
        res = run(cfg)
    except DivergenceError as e:
        row.update(status="diverged", error=str(e))
        return row
    except Exception as e:  # recorded per row; the sweep carries on
        row.update(status="error", error=f"{type(e).__name__}: {e}")
        return row
    s = res.summary
    row.update(status="ok", error="", top1=res.report.top1, top5=res.report.top5,
               lam=s["lam"], tail_ratio=s["tail_ratio"])
    for name, acc in res.report.group_acc.items():
        row[f"acc_{name}"] = acc
    return row


def sweep_rows(base_doc: dict, grid: dict, out_root, parallel: int = 1) -> list:
    jobs = [(i, base_doc, p, str(out_root)) for i, p in enumerate(_grid_points(grid))]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            return list(ex.map(_sweep_one, jobs))
    return [_sweep_one(j) for j in jobs]


def sweep_csv(rows: list) -> str:
    params = sorted({k for r in rows for k in r if k.startswith("param:")})
    cols = ["run", "status"] + params + list(SWEEP_METRICS) + ["error"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in cols])
    return buf.getvalue()


def cmd_sweep(args) -> int:
    base = load_config_doc(args.config) if args.config else {}
    base = apply_overrides(base, list(args.set or []))
    if args.seed is not None:
        base["seed"] = args.seed
    RunConfig.from_dict(base)
    grid = load_config_doc(args.grid) if args.grid else {}
    out = Path(args.out or base.get("out_dir", "runs/sweep"))
    rows = sweep_rows(base, grid, out, args.parallel)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(sweep_csv(rows), encoding="utf-8")
    n_ok = sum(r["status"] == "ok" for r in rows)
    print(json.dumps({"out": str(out / "sweep.csv"), "runs": len(rows), "ok": n_ok}))
    return EXIT_OK


def _load_run(run_dir: Path, overrides=()):
    doc = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    cfg = RunConfig.from_dict(apply_overrides(doc, overrides))
    model = load_checkpoint(run_dir / "checkpoint")
    return cfg, model


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    cfg, model = _load_run(run_dir, args.set or [])
    _, test, table = build_data(cfg)
    groups = [assign_groups(table, "lvis"), assign_groups(table, "shot")]
    report = evaluate(model, test, groups)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    (Path(args.out) if args.out else run_dir / "eval.json").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_export_ledgers(args) -> int:
    run_dir = Path(args.run)
    cfg, model = _load_run(run_dir, args.set or [])
    if args.replay:
        _, _, table = build_data(cfg)
        loss = LossSpec.from_dict(json.loads(args.replay_loss)) if args.replay_loss else resolve_loss(cfg, table)
        grad, prob, table = replay_ledgers(model, cfg, loss, args.iters)
    else:
        _, _, table = build_data(cfg)
        doc = json.loads((run_dir / "ledgers.json").read_text(encoding="utf-8"))
        grad = GradientLedger.from_dict(doc["gradients"]) if doc["gradients"] else None
        prob = ProbabilityLedger.from_dict(doc["probabilities"]) if doc["probabilities"] else None
    rows = ledger_rows(table, grad, prob, assign_groups(table, "lvis"))
    text = rows_to_csv(rows, LEDGER_COLUMNS)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eqlab", description="Long-tailed loss laboratory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory"):
        sp.add_argument("--config", help="run config JSON (path or name of a shipped config)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=out_help)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-path config override")

    sp = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(sp)
    sp.add_argument("--batches", type=int, default=1, help="proposal batches to dump (proposal datasets)")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="run one training job")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="run the cross product of a parameter grid")
    common(sp)
    sp.add_argument("--grid", required=True, help='JSON object {"dotted.key": [values, ...]}')
    sp.add_argument("--parallel", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("eval", help="evaluate a run's checkpoint on its test set")
    sp.add_argument("--run", required=True)
    sp.add_argument("--out")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("export-ledgers", help="per-category gradient/probability ledgers as CSV")
    sp.add_argument("--run", required=True)
    sp.add_argument("--out")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--replay", action="store_true", help="frozen-weight replay of the run's batches")
    sp.add_argument("--replay-loss", help="LossSpec JSON to use for the replay")
    sp.add_argument("--iters", type=int)
    sp.set_defaults(func=cmd_export_ledgers)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except DivergenceError as e:
        log.error("diverged: %s", e)
        return EXIT_DIVERGED
    except OSError as e:
        log.error("I/O error: %s", e)
        return EXIT_IO
    except ValueError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
