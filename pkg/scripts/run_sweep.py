"""Sweep one of k, beta, lambda_a, lambda_lm and write a CSV of mean/std per value.

    python scripts/run_sweep.py --data data/train.jsonl --test data/test.jsonl \
        --init data/lm.ckpt --param k --values 1,2,3,4,5 --out sweep_k.csv
"""

import argparse
import logging

from decra import experiment as X
from decra import model as M
from decra import training as TR
from decra.corpus import SubsetSpec


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", required=True)
    ap.add_argument("--test", required=True)
    ap.add_argument("--init", default=None)
    ap.add_argument("--param", choices=X.SWEEP_PARAMS, required=True)
    ap.add_argument("--values", required=True)
    ap.add_argument("--mode", default="full", choices=TR.MODES)
    ap.add_argument("--subsets", type=int, default=15)
    ap.add_argument("--per-class", type=int, default=20)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--layers", type=int, default=1)
    ap.add_argument("--out", default="sweep.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    values = tuple(float(v) for v in args.values.split(","))
    base = TR.TrainConfig(mode=args.mode, epochs=args.epochs, learning_rate=1e-3)
    spec = X.SweepSpec(args.param, values, base)
    model_cfg = M.ModelConfig(vocab_size=1, hidden=args.hidden, num_layers=args.layers,
                              num_heads=2)
    rows = X.run_sweep(spec, args.data, args.test,
                       SubsetSpec(args.subsets, args.per_class, 5), model_cfg,
                       init_checkpoint=args.init, csv_path=args.out)
    for value, rep in rows:
        print(f"{args.param}={value:g}  mean {rep.mean:.4f}  std {rep.std:.4f}")


if __name__ == "__main__":
    main()
