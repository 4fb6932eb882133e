"""Softmax CE vs SEQL accuracy by shot group over a few ignore probabilities."""

import argparse

import numpy as np

from eqlab.experiment import load_config, run

GROUPS = ("many", "medium", "few", "frequent")


def mean_acc(name, seeds, overrides=()):
    accs = [[run(load_config(name, [("seed", s), *overrides]), write=False).report.group_acc[g] for g in GROUPS]
            for s in seeds]
    return np.mean(accs, axis=0)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--gammas", type=float, nargs="+", default=[0.5, 0.75, 0.9, 0.95])
    args = ap.parse_args()
    print("loss,gamma," + ",".join(GROUPS))
    print("softmax,," + ",".join(f"{v:.4f}" for v in mean_acc("cifar_lt_softmax", args.seeds)))
    for g in args.gammas:
        acc = mean_acc("cifar_lt_seql", args.seeds, [("loss.gamma_ignore", g)])
        print(f"seql,{g}," + ",".join(f"{v:.4f}" for v in acc))


if __name__ == "__main__":
    main()
