"""Positive vs negative gradient mass per class group under sigmoid CE and EQL.

Trains the CE baseline, then replays its batch sequence with frozen weights
under both losses so the two ledgers see identical inputs.
"""

import argparse
import json

from eqlab.experiment import load_config, replay_ledgers, resolve_loss, run
from eqlab.freqstats import assign_groups, tail_ratio
from eqlab.losses import LossSpec
from eqlab.telemetry import group_means


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    args = ap.parse_args()
    out = []
    for seed in args.seeds:
        ce_cfg = load_config("cifar_lt_sigmoid", [("seed", seed)])
        ce = run(ce_cfg, write=False)
        lvis = assign_groups(ce.table, "lvis")
        eql_spec = resolve_loss(load_config("cifar_lt_eql", [("seed", seed)]), ce.table)
        row = {"seed": seed, "eql_lam": eql_spec.lam, "tail_ratio": tail_ratio(eql_spec.lam, ce.table)}
        for name, spec in (("ce", LossSpec("sigmoid_ce")), ("eql", eql_spec)):
            grad, _, _ = replay_ledgers(ce.model, ce_cfg, spec)
            row[name] = {"pos": group_means(grad.pos_per_iter(), lvis), "neg": group_means(grad.neg_per_iter(), lvis)}
        out.append(row)
        print(json.dumps(row, indent=2))


if __name__ == "__main__":
    main()
