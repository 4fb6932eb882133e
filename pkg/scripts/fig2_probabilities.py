"""Average positive-class probability and accuracy per group, CE vs EQL on proposal streams."""

import argparse

from eqlab.experiment import load_config, run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    args = ap.parse_args()
    print("config,seed,prob_rare,prob_common,prob_frequent,acc_rare,acc_common,acc_frequent")
    for name in ("proposals_sigmoid", "proposals_eql"):
        for seed in args.seeds:
            res = run(load_config(name, [("seed", seed)]), write=False)
            p, a = res.summary["positive_prob"], res.report.group_acc
            vals = [p[g] for g in ("rare", "common", "frequent")] + [a[g] for g in ("rare", "common", "frequent")]
            print(",".join([name, str(seed)] + [f"{v:.4f}" for v in vals]))


if __name__ == "__main__":
    main()
