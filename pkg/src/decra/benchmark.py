"""Desk-scale directional benchmark on the bundled synthetic data.

Pipeline: generate a labelled pool, a test set and unlabelled text; pretrain a
small encoder with the masked-LM objective on the unlabelled text (standing in
for a pretrained language model); then run baseline, aug_only and full on the
same class-balanced subsets, all starting from that encoder.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import experiment as X
from . import model as M
from . import synthetic
from . import training as TR
from .corpus import SubsetSpec, write_jsonl

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkSpec:
    num_classes: int = 4
    pool_per_class: int = 500
    test_per_class: int = 500
    unlabeled_per_class: int = 2000
    data_seed: int = 0
    hidden: int = 32
    num_layers: int = 1
    num_heads: int = 2
    pretrain_epochs: int = 50
    pretrain_batch_size: int = 32
    learning_rate: float = 1e-3
    subsets: SubsetSpec = SubsetSpec(num_subsets=15, train_per_class=20, val_per_class=5, seed=0)
    train: TR.TrainConfig = field(default_factory=lambda: TR.TrainConfig(learning_rate=1e-3))
    modes: tuple = ("baseline", "aug_only", "full")


@dataclass
class BenchmarkResult:
    ablation: X.AblationReport
    pretrain_history: list
    seconds: float

    def deltas(self, mode: str, against: str = "baseline") -> list[float]:
        r = self.ablation.reports
        return X.paired_deltas(r[mode], r[against])

    def summary(self) -> dict:
        out = {"means": {m: r.mean for m, r in self.ablation.reports.items()},
               "stds": {m: r.std for m, r in self.ablation.reports.items()},
               "pretrain_l_lm": self.pretrain_history[-1:] or None,
               "seconds": self.seconds}
        for mode in self.ablation.reports:
            if mode != "baseline":
                d = self.deltas(mode)
                out[f"{mode}_minus_baseline"] = {
                    "mean": float(np.mean(d)), "non_negative": int(sum(x >= 0 for x in d)),
                    "n": len(d), "se": float(np.std(d, ddof=1) / np.sqrt(len(d))) if len(d) > 1
                    else float("nan")}
        return out


def write_data(spec: BenchmarkSpec, workdir: Path) -> dict:
    base = synthetic.SyntheticSpec(num_classes=spec.num_classes, per_class=spec.pool_per_class,
                                   seed=spec.data_seed)
    paths = {k: workdir / f"{k}.jsonl" for k in ("train", "test", "unlabeled")}
    write_jsonl(synthetic.generate(base, 0), paths["train"])
    write_jsonl(synthetic.generate(replace(base, per_class=spec.test_per_class), 1), paths["test"])
    unl = synthetic.generate(replace(base, per_class=spec.unlabeled_per_class), 2)
    write_jsonl([{"text": r["text"]} for r in unl], paths["unlabeled"])
    return paths


def run_benchmark(workdir, spec: BenchmarkSpec = BenchmarkSpec(), num_subsets: int | None = None,
                  init_checkpoint=None) -> BenchmarkResult:
    """Run the whole pipeline in ``workdir``; reuses ``init_checkpoint`` if given."""
    start = time.perf_counter()
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    paths = write_data(spec, workdir)
    model_cfg = M.ModelConfig(vocab_size=1, num_classes=spec.num_classes, hidden=spec.hidden,
                              num_layers=spec.num_layers, num_heads=spec.num_heads)
    history = []
    if init_checkpoint is None:
        init_checkpoint = workdir / "lm.ckpt"
        cfg = replace(spec.train, learning_rate=spec.learning_rate,
                      batch_size=spec.pretrain_batch_size)
        model, vocab, history = X.pretrain(paths["unlabeled"], model_cfg, cfg,
                                           spec.pretrain_epochs)
        M.save_checkpoint(model, init_checkpoint, extra=X.checkpoint_extra(vocab))
        log.info("pretraining done: l_lm %.3f after %d epochs", history[-1], len(history))
    subsets = spec.subsets
    if num_subsets is not None:
        subsets = replace(subsets, num_subsets=num_subsets)
    ablation = X.run_ablation(paths["train"], paths["test"], subsets,
                              replace(spec.train, learning_rate=spec.learning_rate), model_cfg,
                              modes=spec.modes, init_checkpoint=init_checkpoint,
                              epoch_log=workdir / "epochs.csv")
    result = BenchmarkResult(ablation, history, time.perf_counter() - start)
    (workdir / "benchmark.json").write_text(json.dumps(
        {"spec": asdict(spec), "summary": result.summary(), "ablation": ablation.to_dict()},
        indent=2, default=str) + "\n")
    return result


def directional_verdict(deltas, min_fraction: float = 0.8) -> tuple[bool, bool]:
    """``(passed, within_noise)`` for paired deltas of full minus baseline.

    Passing needs a positive mean delta and at least ``min_fraction`` of the
    subsets non-negative (12 of 15).  The margin is within noise when the mean
    delta is smaller than two standard errors.
    """
    d = np.asarray(deltas, dtype=np.float64)
    mean = float(d.mean())
    se = float(d.std(ddof=1) / np.sqrt(len(d))) if len(d) > 1 else float("inf")
    passed = mean > 0 and np.sum(d >= 0) >= int(np.ceil(min_fraction * len(d)))
    return bool(passed), abs(mean) < 2 * se
