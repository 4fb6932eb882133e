import csv
import hashlib
import json
import subprocess
import sys

import pytest

from eqlab.cli import main
from eqlab.experiment import CONFIG_DIR

# short runs: 120 iterations, one decay
FAST = ["--set", "schedule.total_iters=120", "--set", "schedule.lr_decay_points=[80]",
        "--set", "telemetry.log_every=40"]


def digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir()) if p.is_file()}


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_shipped_configs_parse():
    from eqlab.experiment import load_config

    names = sorted(p.stem for p in CONFIG_DIR.glob("*.json") if not p.stem.startswith("grid_"))
    assert {"cifar_lt_sigmoid", "cifar_lt_eql", "cifar_lt_softmax", "cifar_lt_seql"} <= set(names)
    for name in names:
        load_config(name)


# ---------------------------------------------------------------- gen-data


def test_gen_data_sidecar_reports_cifar_lt_counts(tmp_path, capsys):
    assert main(["gen-data", "--config", "cifar_lt_sigmoid", "--out", str(tmp_path / "d")]) == 0
    meta = json.loads((tmp_path / "d" / "meta.json").read_text(encoding="utf-8"))
    assert max(meta["counts"]) == 500 and min(meta["counts"]) == 2
    assert meta["total_images"] == 9502
    assert meta["arrays"]["train_features"]["shape"] == [9502, 32]
    assert json.loads(capsys.readouterr().out)["min_count"] == 2


def test_gen_data_is_idempotent(tmp_path):
    for d in ("a", "b"):
        assert main(["gen-data", "--config", "cifar_lt_sigmoid", "--seed", "3", "--out", str(tmp_path / d)]) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_gen_data_rejects_imbalance_factor_of_one(tmp_path, caplog):
    code = main(["gen-data", "--config", "cifar_lt_sigmoid", "--set", "dataset.imbalance_factor=1",
                 "--out", str(tmp_path / "d")])
    assert code == 1
    assert "imbalance factor" in caplog.text
    assert not (tmp_path / "d").exists()


def test_gen_data_proposal_batches(tmp_path):
    assert main(["gen-data", "--config", "proposals_eql", "--batches", "3", "--out", str(tmp_path / "p")]) == 0
    meta = json.loads((tmp_path / "p" / "meta.json").read_text(encoding="utf-8"))
    assert meta["arrays"]["labels"]["shape"] == [3 * 128]


def test_missing_config_is_an_io_error(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 3


def test_unknown_config_field_is_a_config_error(tmp_path):
    assert main(["train", "--config", "cifar_lt_sigmoid", "--set", "dataset.colour=red", "--out", str(tmp_path)]) == 1


# ---------------------------------------------------------------- train / eval / export


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "eql"
    assert main(["train", "--config", "cifar_lt_eql", "--seed", "2", "--out", str(out), *FAST]) == 0
    return out


def test_train_writes_all_artefacts(trained_run):
    for name in ("config.json", "metrics.csv", "summary.json", "ledgers.csv", "ledgers.json"):
        assert (trained_run / name).is_file()
    assert (trained_run / "checkpoint" / "meta.json").is_file()
    summary = json.loads((trained_run / "summary.json").read_text(encoding="utf-8"))
    assert abs(summary["tail_ratio"] - 0.09) < 0.01
    rows = read_csv(trained_run / "metrics.csv")
    assert [r["iter"] for r in rows] == ["40", "80", "120"]


def test_persisted_config_replays_byte_identically(trained_run, tmp_path):
    assert main(["train", "--config", str(trained_run / "config.json"), "--out", str(tmp_path / "again")]) == 0
    for name in ("metrics.csv", "ledgers.csv"):
        assert (tmp_path / "again" / name).read_bytes() == (trained_run / name).read_bytes()


def test_seed_override_changes_only_the_seed(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", "cifar_lt_sigmoid", "--out", str(a), *FAST]) == 0
    assert main(["train", "--config", "cifar_lt_sigmoid", "--seed", "9", "--out", str(b), *FAST]) == 0
    ca = json.loads((a / "config.json").read_text(encoding="utf-8"))
    cb = json.loads((b / "config.json").read_text(encoding="utf-8"))
    assert cb["seed"] == 9 and ca["seed"] != 9
    diff = {k for k in ca if ca[k] != cb[k]}
    assert diff == {"seed", "out_dir"}


def test_eval_reproduces_final_accuracy(trained_run, tmp_path):
    out = tmp_path / "eval.json"
    assert main(["eval", "--run", str(trained_run), "--out", str(out)]) == 0
    report = json.loads(out.read_text(encoding="utf-8"))
    summary = json.loads((trained_run / "summary.json").read_text(encoding="utf-8"))
    assert report["topk"]["1"] == summary["eval"]["topk"]["1"]
    assert set(report["group_acc"]) == {"rare", "common", "frequent", "few", "medium", "many"}


def test_export_ledgers(trained_run, tmp_path):
    out = tmp_path / "ledgers.csv"
    assert main(["export-ledgers", "--run", str(trained_run), "--out", str(out)]) == 0
    assert out.read_bytes() == (trained_run / "ledgers.csv").read_bytes()
    rows = read_csv(out)
    counts = [int(r["count"]) for r in rows]
    assert counts == sorted(counts, reverse=True) and len(rows) == 100


def test_export_ledgers_replay_under_another_loss(trained_run, tmp_path):
    ce, eql = tmp_path / "ce.csv", tmp_path / "eql.csv"
    args = ["export-ledgers", "--run", str(trained_run), "--replay", "--iters", "50"]
    assert main([*args, "--replay-loss", '{"kind": "sigmoid_ce"}', "--out", str(ce)]) == 0
    assert main([*args, "--out", str(eql)]) == 0
    for a, b in zip(read_csv(ce), read_csv(eql)):
        assert float(b["neg_norm_sum"]) <= float(a["neg_norm_sum"])
        assert float(b["pos_norm_sum"]) == float(a["pos_norm_sum"])


def test_train_from_generated_files_matches_in_memory(tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--config", "cifar_lt_sigmoid", "--out", str(data)]) == 0
    assert main(["train", "--config", "cifar_lt_sigmoid", "--out", str(tmp_path / "mem"), *FAST]) == 0
    assert main(["train", "--config", "cifar_lt_sigmoid", "--set", f"dataset.path={data}",
                 "--out", str(tmp_path / "file"), *FAST]) == 0
    assert (tmp_path / "mem" / "metrics.csv").read_bytes() == (tmp_path / "file" / "metrics.csv").read_bytes()


def test_divergence_exit_code(tmp_path):
    code = main(["train", "--config", "cifar_lt_softmax", "--set", "schedule.base_lr=1e300",
                 "--out", str(tmp_path), *FAST])
    assert code == 2


def test_module_entry_point_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "eqlab", "--help"], capture_output=True, text=True)
    assert ok.returncode == 0 and "export-ledgers" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "eqlab", "gen-data", "--config", "cifar_lt_sigmoid",
                          "--set", "dataset.imbalance_factor=0.5", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert bad.returncode == 1 and bad.stderr


# ---------------------------------------------------------------- sweep


def test_lambda_grid_gives_one_summary_per_value(tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", "cifar_lt_eql", "--grid", "grid_lambda", "--out", str(out), *FAST]) == 0
    rows = read_csv(out / "sweep.csv")
    lams = [float(r["param:loss.lam"]) for r in rows]
    assert lams == [0.0, 0.000176, 0.0005, 0.0008, 0.0015, 0.00176, 0.002, 0.003, 0.005]
    assert all(r["status"] == "ok" for r in rows)
    trs = [float(r["tail_ratio"]) for r in rows]
    assert trs[0] == 0.0 and trs == sorted(trs)
    summaries = sorted(out.glob("run_*/summary.json"))
    assert len(summaries) == 9


def test_gamma_grid_gives_five_rows(tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", "cifar_lt_seql", "--grid", "grid_gamma", "--out", str(out), *FAST]) == 0
    rows = read_csv(out / "sweep.csv")
    assert len(rows) == 5
    assert [float(r["param:loss.gamma_ignore"]) for r in rows] == [0, 0.5, 0.75, 0.9, 0.95]


def test_empty_grid_is_an_error(tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text("{}", encoding="utf-8")
    assert main(["sweep", "--config", "cifar_lt_eql", "--grid", str(grid), "--out", str(tmp_path / "s")]) == 1


def test_single_point_sweep_matches_train(tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text('{"seed": [4]}', encoding="utf-8")
    assert main(["sweep", "--config", "cifar_lt_seql", "--grid", str(grid), "--out", str(tmp_path / "s"), *FAST]) == 0
    assert main(["train", "--config", "cifar_lt_seql", "--seed", "4", "--out", str(tmp_path / "t"), *FAST]) == 0
    row = read_csv(tmp_path / "s" / "sweep.csv")[0]
    summary = json.loads((tmp_path / "t" / "summary.json").read_text(encoding="utf-8"))
    assert float(row["top1"]) == summary["eval"]["topk"]["1"]
    assert float(row["acc_few"]) == summary["eval"]["group_acc"]["few"]
    assert (tmp_path / "s" / "run_000" / "metrics.csv").read_bytes() == (tmp_path / "t" / "metrics.csv").read_bytes()


def test_sweep_records_failures_and_continues(tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text('{"loss.gamma_ignore": [0.5, 2.0], "schedule.base_lr": [0.1, 1e300]}', encoding="utf-8")
    assert main(["sweep", "--config", "cifar_lt_seql", "--grid", str(grid), "--out", str(tmp_path / "s"), *FAST]) == 0
    status = [r["status"] for r in read_csv(tmp_path / "s" / "sweep.csv")]
    assert status == ["ok", "diverged", "error", "error"]


def test_parallel_sweep_matches_sequential(tmp_path):
    args = ["sweep", "--config", "cifar_lt_seql", "--grid", "grid_gamma", *FAST]
    grid = tmp_path / "grid.json"
    grid.write_text('{"loss.gamma_ignore": [0.0, 0.9]}', encoding="utf-8")
    args[4] = str(grid)
    assert main([*args, "--out", str(tmp_path / "seq")]) == 0
    assert main([*args, "--parallel", "2", "--out", str(tmp_path / "par")]) == 0
    assert (tmp_path / "seq" / "sweep.csv").read_text() == (tmp_path / "par" / "sweep.csv").read_text()
