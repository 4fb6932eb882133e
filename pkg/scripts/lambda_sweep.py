"""Sweep the EQL threshold on the classification stream via the CLI sweep command."""

import argparse
import sys

from eqlab.cli import main as cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/lambda_sweep")
    ap.add_argument("--parallel", type=int, default=1)
    args = ap.parse_args()
    sys.exit(cli(["sweep", "--config", "cifar_lt_eql", "--grid", "grid_lambda",
                  "--out", args.out, "--parallel", str(args.parallel)]))


if __name__ == "__main__":
    main()
