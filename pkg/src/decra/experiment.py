"""Subset-protocol experiments, ablation grid, sweeps and artifact exports."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from . import tensor as tt
from . import training as TR
from .corpus import (TOKENIZER, LabeledDataset, SubsetSpec, Vocabulary, build_vocab, decode,
                     encode, load_jsonl, read_jsonl, sample_subsets, subset_manifest)
from .errors import ConfigError, DecraError, ParseError, SubsetError
from .kbeta import AugmentConfig, kbeta_augment, sample_hard
from .streams import Purpose, derive_seed, stream

log = logging.getLogger(__name__)

SWEEP_PARAMS = ("k", "beta", "lambda_a", "lambda_lm")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def subset_seed(master: int, index: int) -> int:
    return derive_seed(master, index)


@dataclass
class ExperimentReport:
    """Per-subset test accuracies with their mean and population std."""

    accuracies: list
    mean: float
    std: float
    best_epochs: list
    config: dict
    manifest: dict = field(default_factory=dict, repr=False)
    std_kind: str = "population"

    @classmethod
    def from_runs(cls, accuracies, best_epochs, config, manifest=None) -> "ExperimentReport":
        acc = np.asarray(accuracies, dtype=np.float64)
        return cls([float(a) for a in acc], float(acc.mean()), float(acc.std(ddof=0)),
                   [int(e) for e in best_epochs], config, manifest or {})

    def to_dict(self) -> dict:
        return asdict(self)


# checkpoints produced by the CLI carry the vocabulary in their extra header
def checkpoint_extra(vocab: Vocabulary, label_names=None, **more) -> dict:
    return {"vocab": list(vocab.tokens), "label_names": list(label_names or []),
            "tokenizer": TOKENIZER, **more}


def load_model(path) -> tuple[M.Model, Vocabulary, list]:
    model, extra = M.load_checkpoint(path)
    if "vocab" not in extra:
        raise ConfigError(f"{path}: checkpoint has no vocabulary; re-save it with the CLI")
    return model, Vocabulary.from_tokens(extra["vocab"]), list(extra.get("label_names", []))


def load_texts(path) -> list[str]:
    """Texts from a JSONL file (``text`` field, labels optional) or a plain text file."""
    path = Path(path)
    if path.suffix != ".jsonl":
        return [line.strip() for line in path.read_text(encoding="utf-8").splitlines()
                if line.strip()]
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out.append(row["text"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}: line {lineno}: expected an object with 'text'",
                                 lineno) from exc
            if not isinstance(out[-1], str):
                raise ParseError(f"{path}: line {lineno}: 'text' must be a string", lineno)
    return out


def pretrain(texts_path, model_cfg: M.ModelConfig, cfg: TR.TrainConfig, epochs: int,
             max_vocab: int = 2000, seed: int = 0) -> tuple[M.Model, Vocabulary, list[float]]:
    """Masked-LM pretraining from scratch on a text file; builds the vocabulary."""
    texts = load_texts(texts_path)
    if not texts:
        raise ParseError(f"{texts_path}: no texts")
    vocab = build_vocab(texts, max_vocab)
    model_cfg = replace(model_cfg, vocab_size=len(vocab))
    model = M.init_model(model_cfg, seed)
    examples = [encode(t, vocab, model_cfg.max_length) for t in texts]
    history = TR.pretrain_lm(examples, model, epochs, cfg)
    return model, vocab, history


def load_splits(data_path, test_path, max_length: int, max_vocab: int,
                vocab: Vocabulary | None = None) -> tuple[LabeledDataset, LabeledDataset]:
    pool = load_jsonl(data_path, vocab=vocab, max_length=max_length, max_vocab=max_vocab)
    test = load_jsonl(test_path, vocab=pool.vocab, max_length=max_length,
                      label_names=pool.label_names)
    return pool, test


def prepare_splits(data_path, test_path, model_cfg: M.ModelConfig, init_checkpoint=None,
                   max_vocab: int = 2000) -> tuple[LabeledDataset, LabeledDataset]:
    """Load pool and test files, reusing the checkpoint vocabulary when given."""
    if init_checkpoint is None:
        return load_splits(data_path, test_path, model_cfg.max_length, max_vocab)
    init, vocab, _ = load_model(init_checkpoint)
    return load_splits(data_path, test_path, init.config.max_length, max_vocab, vocab)


def _fresh_model(model_cfg: M.ModelConfig, seed: int, init: M.Model | None) -> M.Model:
    if init is None:
        return M.init_model(model_cfg, seed)
    model = init.copy()
    # the classifier head is always new: only the encoder and LM head are reused
    model.config = replace(model.config, num_classes=model_cfg.num_classes)
    model.cls_head = M.init_model(model.config, seed).cls_head
    return model


def resolve_model_config(model_cfg: M.ModelConfig, pool: LabeledDataset,
                         init: M.Model | None) -> M.ModelConfig:
    if init is not None:
        return replace(init.config, num_classes=pool.num_classes)
    return replace(model_cfg, vocab_size=len(pool.vocab), num_classes=pool.num_classes,
                   max_length=pool.max_length)


def run_experiment(data_path, test_path, subset_spec: SubsetSpec, train_cfg: TR.TrainConfig,
                   model_cfg: M.ModelConfig, init_checkpoint=None, max_vocab: int = 2000,
                   epoch_log=None, splits=None) -> ExperimentReport:
    """Train one model per subset and evaluate each best checkpoint on the test set.

    ``vocab_size``, ``num_classes`` and ``max_length`` of ``model_cfg`` are
    taken from the data.  With ``init_checkpoint`` the encoder and LM head
    start from that checkpoint (its vocabulary is reused) and only the
    classifier head is freshly initialised per subset.
    """
    init = load_model(init_checkpoint)[0] if init_checkpoint is not None else None
    if splits is None:
        splits = prepare_splits(data_path, test_path, model_cfg, init_checkpoint, max_vocab)
    pool, test = splits
    model_cfg = resolve_model_config(model_cfg, pool, init)
    subsets = sample_subsets(pool, subset_spec)
    seeds = [subset_seed(train_cfg.seed, i) for i in range(subset_spec.num_subsets)]

    accs, best_epochs = [], []
    for i, ((train_set, val_set), seed) in enumerate(zip(subsets, seeds)):
        start = time.perf_counter()
        try:
            model = _fresh_model(model_cfg, seed, init)
            best, reports = TR.train(train_set, val_set, model, replace(train_cfg, seed=seed))
            acc = TR.evaluate(test, best)
        except DecraError as exc:
            raise SubsetError(f"subset {i} failed: {exc}", i) from exc
        if epoch_log is not None:
            _append_epoch_log(epoch_log, i, train_cfg.mode, reports)
        accs.append(acc)
        best_epochs.append(TR.best_epoch(reports))
        log.info("%s subset %d: test acc %.4f (best epoch %d, %.1fs)", train_cfg.mode, i, acc,
                 best_epochs[-1], time.perf_counter() - start)

    manifest = {
        "train": train_cfg.to_dict(),
        "model": model_cfg.to_dict(),
        "subsets": asdict(subset_spec),
        "subset_seeds": seeds,
        "max_vocab": max_vocab,
        "inputs": {},
        "subset_indices": subset_manifest(subsets),
    }
    for key, p in (("data", data_path), ("test", test_path), ("init_checkpoint", init_checkpoint)):
        if p is not None:
            manifest[key] = str(p)
            manifest["inputs"][str(p)] = file_digest(p)
    config = {"train": train_cfg.to_dict(), "model": model_cfg.to_dict(),
              "subsets": asdict(subset_spec)}
    return ExperimentReport.from_runs(accs, best_epochs, config, manifest)


def _append_epoch_log(path, subset: int, mode: str, reports) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["mode", "subset", "epoch", "l_ce", "l_aug", "l_lm", "val_acc", "seconds"])
        for r in reports:
            w.writerow([mode, subset, r.epoch, r.l_ce, r.l_aug, r.l_lm, r.val_acc, r.seconds])


@dataclass
class AblationReport:
    reports: dict
    paired_deltas: list  # full minus baseline, per subset

    @property
    def mean_delta(self) -> float:
        return float(np.mean(self.paired_deltas)) if self.paired_deltas else float("nan")

    def to_dict(self) -> dict:
        return {"reports": {m: r.to_dict() for m, r in self.reports.items()},
                "paired_deltas": self.paired_deltas, "mean_delta": self.mean_delta,
                "non_negative": int(sum(d >= 0 for d in self.paired_deltas))}


def paired_deltas(a: ExperimentReport, b: ExperimentReport) -> list[float]:
    if a.manifest.get("subset_indices") != b.manifest.get("subset_indices"):
        raise ConfigError("reports were not run on identical subsets")
    return [x - y for x, y in zip(a.accuracies, b.accuracies)]


def run_ablation(data_path, test_path, subset_spec: SubsetSpec, base_cfg: TR.TrainConfig,
                 model_cfg: M.ModelConfig, modes: Sequence[str] = TR.MODES,
                 init_checkpoint=None, max_vocab: int = 2000, epoch_log=None) -> AblationReport:
    """Every mode on the same subsets, with paired full-minus-baseline deltas."""
    splits = prepare_splits(data_path, test_path, model_cfg, init_checkpoint, max_vocab)
    reports = {}
    for mode in modes:
        reports[mode] = run_experiment(data_path, test_path, subset_spec,
                                       replace(base_cfg, mode=mode), model_cfg,
                                       init_checkpoint, max_vocab, epoch_log, splits)
    deltas = []
    if "full" in reports and "baseline" in reports:
        deltas = paired_deltas(reports["full"], reports["baseline"])
    return AblationReport(reports, deltas)


@dataclass(frozen=True)
class SweepSpec:
    param: str
    values: tuple
    base: TR.TrainConfig = TR.TrainConfig()

    def __post_init__(self):
        if self.param not in SWEEP_PARAMS:
            raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {self.param!r}")
        if not self.values:
            raise ConfigError("sweep needs at least one value")
        for v in self.values:
            self.config_for(v)

    def config_for(self, value) -> TR.TrainConfig:
        if self.param in ("k", "beta"):
            if int(value) != value:
                raise ConfigError(f"{self.param} must be an integer, got {value!r}")
            value = int(value)
        return replace(self.base, **{self.param: value})


def run_sweep(spec: SweepSpec, data_path, test_path, subset_spec: SubsetSpec,
              model_cfg: M.ModelConfig, init_checkpoint=None, max_vocab: int = 2000,
              csv_path=None) -> list[tuple]:
    splits = prepare_splits(data_path, test_path, model_cfg, init_checkpoint, max_vocab)
    rows = [(v, run_experiment(data_path, test_path, subset_spec, spec.config_for(v), model_cfg,
                               init_checkpoint, max_vocab, splits=splits))
            for v in spec.values]
    if csv_path is not None:
        write_sweep_csv(spec.param, rows, csv_path)
    return rows


def write_sweep_csv(param: str, rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param", "value", "mean", "std_population", "n_subsets", "accuracies"])
        for value, rep in rows:
            w.writerow([param, value, repr(rep.mean), repr(rep.std), len(rep.accuracies),
                        " ".join(repr(a) for a in rep.accuracies)])


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            row["accuracies"] = [float(a) for a in row["accuracies"].split()]
            for key in ("mean", "std_population"):
                row[key] = float(row[key])
            out.append(row)
        return out


def _dataset_for_checkpoint(data_path, model: M.Model, vocab: Vocabulary,
                            label_names) -> LabeledDataset:
    return load_jsonl(data_path, vocab=vocab, max_length=model.config.max_length,
                      label_names=label_names or None)


def export_augmentations(data_path, checkpoint, aug_cfg: AugmentConfig, out_path) -> int:
    """One JSONL line per generated sequence; returns the number of lines."""
    model, vocab, label_names = load_model(checkpoint)
    data = _dataset_for_checkpoint(data_path, model, vocab, label_names)
    n = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        for i, ex in enumerate(data):
            for s in kbeta_augment(ex, model, aug_cfg, index=i):
                hard = sample_hard(s, stream(aug_cfg.seed, Purpose.SAMPLE, i, s.run_index))
                row = {"source_index": i, "run_index": s.run_index,
                       "label": data.label_names[s.label], "text": decode(hard, vocab),
                       "soft_rows": s.soft_rows()}
                fh.write(json.dumps(row) + "\n")
                n += 1
    return n


def cls_embeddings(inputs, model: M.Model, batch_size: int = 256) -> np.ndarray:
    inputs = list(inputs)
    out = []
    with tt.no_grad():
        for i in range(0, len(inputs), batch_size):
            out.append(M.encode(inputs[i:i + batch_size], model).data[:, 0, :])
    return np.concatenate(out) if out else np.zeros((0, model.config.hidden))


def export_embeddings(data_path, checkpoint, aug_cfg: AugmentConfig, out_path) -> int:
    """CLS vectors of every original and generated sequence as TSV; returns the row count."""
    model, vocab, label_names = load_model(checkpoint)
    data = _dataset_for_checkpoint(data_path, model, vocab, label_names)
    originals = cls_embeddings(data.examples, model)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("kind\tlabel\tsource_index\tvector\n")
        n = 0
        for i, ex in enumerate(data):
            rows = [("original", originals[i])]
            gen = cls_embeddings(kbeta_augment(ex, model, aug_cfg, index=i), model)
            rows += [("generated", v) for v in gen]
            for kind, vec in rows:
                fh.write(f"{kind}\t{data.label_names[ex.label]}\t{i}\t"
                         + " ".join(repr(float(x)) for x in vec) + "\n")
                n += 1
    return n


def read_embeddings(path) -> list[tuple[str, str, int, np.ndarray]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            kind, label, idx, vec = line.rstrip("\n").split("\t")
            out.append((kind, label, int(idx), np.array([float(x) for x in vec.split()])))
    return out
