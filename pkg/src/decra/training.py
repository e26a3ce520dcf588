"""Losses, their weighted combination and the training loop.

Loss terms:

* ``l_ce``  classification NLL on the clean batch
* ``l_aug`` classification NLL on the k-beta generated batch, averaged over
  the beta runs and then over examples
* ``l_lm``  masked-LM NLL of the original tokens at masked positions,
  averaged over masked positions per example, then over examples

``total = l_ce + lambda_a * l_aug + lambda_lm * l_lm`` with terms switched off
according to the training mode.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import model as M
from . import tensor as tt
from .corpus import Example, LabeledDataset, batch
from .errors import ConfigError, ContractError, NonFiniteError
from .kbeta import AugmentConfig, MaskSet, SoftSequence, apply_mask, kbeta_augment_batch, sample_mask_set
from .streams import Purpose, derive_seed, stream
from .tensor import Tensor

log = logging.getLogger(__name__)

MODES = ("baseline", "reg_only", "aug_only", "staged_reg", "staged_reg_aug", "full")

# mode -> (augmented loss, joint masked-LM loss, masked-LM pretraining stage)
MODE_TERMS = {
    "baseline": (False, False, False),
    "reg_only": (False, True, False),
    "aug_only": (True, False, False),
    "staged_reg": (False, False, True),
    "staged_reg_aug": (True, False, True),
    "full": (True, True, False),
}

# dropout sub-streams, one per forward pass kind
_CLEAN, _REG, _AUG = 0, 1, 2


@dataclass(frozen=True)
class TrainConfig:
    lambda_a: float = 1.0
    lambda_lm: float = 1.5
    k: int = 2
    beta: int = 18
    p_mask: float = 0.15
    temperature: float = 1.0
    learning_rate: float = 3e-4
    epochs: int = 20
    batch_size: int = 8
    mode: str = "full"
    pretrain_epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODE_TERMS:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.lambda_a < 0 or self.lambda_lm < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        self.augment_config()  # validates k, beta, p_mask, temperature

    @property
    def uses_aug(self) -> bool:
        return MODE_TERMS[self.mode][0]

    @property
    def uses_reg(self) -> bool:
        return MODE_TERMS[self.mode][1]

    @property
    def staged(self) -> bool:
        return MODE_TERMS[self.mode][2]

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.k, self.beta, self.p_mask, self.temperature, self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class EpochReport:
    epoch: int
    l_ce: float
    l_aug: float
    l_lm: float
    val_acc: float
    seconds: float


@dataclass
class LossTerms:
    total: Tensor
    l_ce: Tensor
    l_aug: Tensor | None = None
    l_lm: Tensor | None = None


def masked_lm_loss(examples: Sequence[Example], masks: Sequence[MaskSet], model: M.Model,
                   train_mode: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Mean NLL of the original tokens at the masked positions."""
    if len(examples) != len(masks):
        raise ContractError("one mask set per example is required")
    masked = [apply_mask(ex, m) for ex, m in zip(examples, masks)]
    emb = M.encode(masked, model, train_mode, rng)
    rows_b = np.concatenate([np.full(len(m), b) for b, m in enumerate(masks)])
    rows_t = np.concatenate([np.asarray(m.positions) for m in masks])
    logits = M.lm_predict(emb[rows_b, rows_t], model.lm_head)
    targets = np.array([examples[b].token_ids[t] for b, t in zip(rows_b, rows_t)])
    per_row = tt.cross_entropy(logits, tt.one_hot(targets, model.config.vocab_size),
                               reduction="none")
    # weight 1/(M_b * B): mean over each example's masked positions, then over the batch
    sizes = np.array([len(m) for m in masks], dtype=np.float64)
    weights = 1.0 / (sizes[rows_b] * len(masks))
    return (per_row * Tensor(weights)).sum()


def classification_loss(examples: Sequence[Example], model: M.Model, train_mode: bool = False,
                        rng: np.random.Generator | None = None) -> Tensor:
    logits = M.classify(M.encode(examples, model, train_mode, rng), model.cls_head)
    labels = np.array([ex.label for ex in examples])
    return tt.cross_entropy(logits, tt.one_hot(labels, model.config.num_classes))


def augmented_loss(examples: Sequence[Example], model: M.Model, aug_cfg: AugmentConfig,
                   indices: Sequence[int] | None = None, epoch: int = 0,
                   train_mode: bool = False, rng: np.random.Generator | None = None,
                   augmented: Sequence[Sequence[SoftSequence]] | None = None) -> Tensor:
    """Classification NLL on generated data, averaged over beta runs then examples.

    ``augmented`` may carry precomputed soft sequences (one list per example);
    otherwise they are generated from the current parameters.
    """
    if indices is None:
        indices = range(len(examples))
    if augmented is None:
        augmented = kbeta_augment_batch(examples, indices, model, aug_cfg, epoch)
    flat = [s for runs in augmented for s in runs]
    logits = M.classify(M.encode(flat, model, train_mode, rng), model.cls_head)
    labels = np.array([s.label for s in flat])
    per_seq = tt.cross_entropy(logits, tt.one_hot(labels, model.config.num_classes),
                               reduction="none")
    # every example contributes beta rows, so a flat mean equals mean-over-beta-then-batch
    weights = np.concatenate([np.full(len(runs), 1.0 / (len(runs) * len(augmented)))
                              for runs in augmented])
    return (per_seq * Tensor(weights)).sum()


def regularization_masks(examples: Sequence[Example], indices: Sequence[int], seed: int,
                         p_mask: float, epoch: int) -> list[MaskSet]:
    return [sample_mask_set(ex, p_mask, stream(seed, Purpose.REG_MASK, epoch, idx))
            for ex, idx in zip(examples, indices)]


def _term(name: str, fn):
    try:
        value = fn()
    except NonFiniteError as exc:
        raise NonFiniteError(f"loss term {name} is not finite: {exc}") from exc
    if not np.isfinite(value.data).all():
        raise NonFiniteError(f"loss term {name} is not finite")
    return value


def final_loss(examples: Sequence[Example], model: M.Model, cfg: TrainConfig,
               indices: Sequence[int] | None = None, epoch: int = 0, step: int = 0,
               train_mode: bool = False, augmented=None,
               reg_masks: Sequence[MaskSet] | None = None) -> LossTerms:
    """``l_ce + lambda_a * l_aug + lambda_lm * l_lm`` with mode-disabled terms omitted.

    Staged modes contribute their fine-tuning terms here; the pretraining
    stage is run separately by :func:`train`.
    """
    if cfg.lambda_a < 0 or cfg.lambda_lm < 0:
        raise ConfigError("loss weights must be non-negative")
    if indices is None:
        indices = list(range(len(examples)))

    def dropout_rng(kind):
        return stream(cfg.seed, Purpose.DROPOUT, epoch, step, kind) if train_mode else None

    l_ce = _term("l_ce", lambda: classification_loss(examples, model, train_mode,
                                                     dropout_rng(_CLEAN)))
    total = l_ce
    l_aug = l_lm = None
    if cfg.uses_aug:
        l_aug = _term("l_aug", lambda: augmented_loss(
            examples, model, cfg.augment_config(), indices, epoch, train_mode,
            dropout_rng(_AUG), augmented))
        total = total + cfg.lambda_a * l_aug
    if cfg.uses_reg:
        if reg_masks is None:
            reg_masks = regularization_masks(examples, indices, cfg.seed, cfg.p_mask, epoch)
        l_lm = _term("l_lm", lambda: masked_lm_loss(examples, reg_masks, model, train_mode,
                                                    dropout_rng(_REG)))
        total = total + cfg.lambda_lm * l_lm
    return LossTerms(total, l_ce, l_aug, l_lm)


def pretrain_lm(examples: Sequence[Example], model: M.Model, epochs: int,
                cfg: TrainConfig) -> list[float]:
    """Optimise only the masked-LM loss; returns the mean loss of each epoch."""
    examples = list(examples.examples if isinstance(examples, LabeledDataset) else examples)
    if not examples:
        raise ContractError("pretrain_lm needs at least one example")
    seed = derive_seed(cfg.seed, 0x5052)
    state = tt.AdamState(learning_rate=cfg.learning_rate)
    params = model.parameters()
    history = []
    for epoch in range(epochs):
        losses = []
        for step, idx in enumerate(batch(len(examples), cfg.batch_size, seed, epoch)):
            chunk = [examples[i] for i in idx]
            masks = regularization_masks(chunk, idx, seed, cfg.p_mask, epoch)
            model.zero_grad()
            with tt.Tape() as tape:
                loss = _term("l_lm", lambda: masked_lm_loss(
                    chunk, masks, model, True, stream(seed, Purpose.DROPOUT, epoch, step, _REG)))
            tt.backward(loss, tape)
            tt.adam_step(params, state)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        log.debug("pretrain epoch %d: l_lm=%.4f", epoch, history[-1])
    return history


def predict(dataset: LabeledDataset | Sequence[Example], model: M.Model,
            batch_size: int = 256) -> np.ndarray:
    examples = list(dataset.examples if isinstance(dataset, LabeledDataset) else dataset)
    out = []
    with tt.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            logits = M.classify(M.encode(chunk, model, train_mode=False), model.cls_head)
            out.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(out)


def evaluate(dataset: LabeledDataset | Sequence[Example], model: M.Model,
             batch_size: int = 256) -> float:
    """Accuracy of argmax class predictions, without dropout."""
    examples = list(dataset.examples if isinstance(dataset, LabeledDataset) else dataset)
    if not examples:
        raise ContractError("evaluate needs a non-empty dataset")
    labels = np.array([ex.label for ex in examples])
    return float(np.mean(predict(examples, model, batch_size) == labels))


def train(train_set: LabeledDataset, val_set: LabeledDataset, model: M.Model,
          cfg: TrainConfig) -> tuple[M.Model, list[EpochReport]]:
    """Train in place and return ``(best model copy, per-epoch reports)``.

    The best model is the one with the highest validation accuracy; ties keep
    the earlier epoch.  Staged modes first run masked-LM pretraining on the
    training texts.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ContractError("train and validation sets must be non-empty")
    if cfg.staged and cfg.pretrain_epochs:
        pretrain_lm(train_set.examples, model, cfg.pretrain_epochs, cfg)
    best, best_acc = model.copy(), -1.0
    reports: list[EpochReport] = []
    state = tt.AdamState(learning_rate=cfg.learning_rate)
    params = model.parameters()
    examples = train_set.examples
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        sums = {"l_ce": [], "l_aug": [], "l_lm": []}
        for step, idx in enumerate(batch(len(examples), cfg.batch_size, cfg.seed, epoch)):
            chunk = [examples[i] for i in idx]
            model.zero_grad()
            with tt.Tape() as tape:
                terms = final_loss(chunk, model, cfg, idx, epoch, step, train_mode=True)
            tt.backward(terms.total, tape)
            tt.adam_step(params, state)
            for key in sums:
                t = getattr(terms, key)
                if t is not None:
                    sums[key].append(t.item())
        acc = evaluate(val_set, model)
        reports.append(EpochReport(
            epoch, *(float(np.mean(v)) if v else float("nan") for v in sums.values()),
            acc, time.perf_counter() - start))
        log.info("epoch %d: l_ce=%.4f val_acc=%.3f", epoch, reports[-1].l_ce, acc)
        if acc > best_acc:
            best, best_acc = model.copy(), acc
    return best, reports


def best_epoch(reports: Sequence[EpochReport]) -> int:
    """Index of the first epoch reaching the highest validation accuracy (-1 if none)."""
    if not reports:
        return -1
    accs = [r.val_acc for r in reports]
    return int(np.argmax(accs))


def write_epoch_csv(reports: Sequence[EpochReport], path, append: bool = False) -> None:
    fieldnames = ["epoch", "l_ce", "l_aug", "l_lm", "val_acc", "seconds"]
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        if not append or fh.tell() == 0:
            writer.writeheader()
        for r in reports:
            writer.writerow(asdict(r))
