"""Directional benchmark: baseline vs aug_only vs full on synthetic 4-class data."""

import argparse
import json
import logging

from decra.benchmark import BenchmarkSpec, directional_verdict, run_benchmark


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--workdir", default="bench")
    p.add_argument("--subsets", type=int, default=None)
    p.add_argument("--init-checkpoint", default=None, help="skip pretraining and reuse this LM")
    p.add_argument("--pretrain-epochs", type=int, default=BenchmarkSpec.pretrain_epochs)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    spec = BenchmarkSpec(pretrain_epochs=args.pretrain_epochs)
    result = run_benchmark(args.workdir, spec, args.subsets, args.init_checkpoint)
    summary = result.summary()
    summary["full_passes"], summary["full_within_noise"] = directional_verdict(result.deltas("full"))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
