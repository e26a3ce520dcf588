"""All modes on shared subsets, with paired full-minus-baseline deltas.

    python scripts/run_ablation.py --data data/train.jsonl --test data/test.jsonl \
        --init data/lm.ckpt --modes baseline,aug_only,full --out ablation.json
"""

import argparse
import json
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
    ap.add_argument("--modes", default=",".join(TR.MODES))
    ap.add_argument("--subsets", type=int, default=15)
    ap.add_argument("--per-class", type=int, default=20)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--layers", type=int, default=1)
    ap.add_argument("--out", default="ablation.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    model_cfg = M.ModelConfig(vocab_size=1, hidden=args.hidden, num_layers=args.layers,
                              num_heads=2)
    report = X.run_ablation(args.data, args.test, SubsetSpec(args.subsets, args.per_class, 5),
                            TR.TrainConfig(epochs=args.epochs, learning_rate=1e-3), model_cfg,
                            modes=tuple(args.modes.split(",")), init_checkpoint=args.init)
    with open(args.out, "w") as f:
        json.dump(report.to_dict(), f, indent=2)
    for mode, rep in report.reports.items():
        print(f"{mode:15s} mean {rep.mean:.4f}  std {rep.std:.4f}")
    if report.paired_deltas:
        print(f"full - baseline: {report.mean_delta:+.4f}")


if __name__ == "__main__":
    main()
