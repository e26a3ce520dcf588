"""Vocabulary, tokenisation, JSONL datasets and low-resource subset sampling."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ParseError
from .streams import Purpose, stream

PAD, MASK, CLS, UNK = 0, 1, 2, 3
RESERVED = ("[PAD]", "[MASK]", "[CLS]", "[UNK]")
TOKENIZER = "lowercase-whitespace-strip-punct"

_PUNCT = re.compile(r"[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple
    index: dict = field(compare=False, repr=False)

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        tokens = tuple(tokens)
        if tokens[: len(RESERVED)] != RESERVED:
            raise ContractError("vocabulary must start with the reserved tokens")
        index = {t: i for i, t in enumerate(tokens)}
        if len(index) != len(tokens):
            raise ContractError("vocabulary tokens must be unique")
        return cls(tokens, index)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def token(self, i: int) -> str:
        return self.tokens[i]


def build_vocab(texts: Iterable[str], max_vocab: int) -> Vocabulary:
    """Reserved ids 0-3, then tokens by descending count (ties: lexicographic)."""
    if max_vocab < len(RESERVED) + 1:
        raise ConfigError(f"max_vocab must be at least {len(RESERVED) + 1}, got {max_vocab}")
    texts = list(texts)
    if not texts:
        raise ContractError("build_vocab needs at least one text")
    counts = Counter(tok for text in texts for tok in tokenize(text))
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary.from_tokens(RESERVED + tuple(ranked[: max_vocab - len(RESERVED)]))


@dataclass(frozen=True)
class Example:
    token_ids: tuple
    label: int

    @property
    def length(self) -> int:
        """Number of non-PAD positions (CLS included)."""
        n = len(self.token_ids)
        while n and self.token_ids[n - 1] == PAD:
            n -= 1
        return n

    def validate(self, vocab_size: int, num_classes: int | None = None) -> None:
        ids = self.token_ids
        if not ids or ids[0] != CLS or CLS in ids[1:]:
            raise ContractError("CLS must appear exactly once, at position 0")
        if any(i < 0 or i >= vocab_size for i in ids):
            raise ContractError("token id outside the vocabulary")
        if PAD in ids[: self.length]:
            raise ContractError("PAD may only appear as a contiguous suffix")
        if num_classes is not None and not 0 <= self.label < num_classes:
            raise ContractError(f"label {self.label} outside [0, {num_classes})")


def encode(text: str, vocab: Vocabulary, max_length: int, label: int = 0) -> Example:
    if max_length < 2:
        raise ConfigError("max_length must be at least 2")
    ids = [CLS] + [vocab.id(t) for t in tokenize(text)]
    ids = ids[:max_length]
    ids += [PAD] * (max_length - len(ids))
    return Example(tuple(ids), int(label))


def decode(example: Example | Sequence[int], vocab: Vocabulary) -> str:
    ids = example.token_ids if isinstance(example, Example) else example
    return " ".join(vocab.token(i) for i in ids if i not in (PAD, CLS))


@dataclass
class LabeledDataset:
    examples: list
    num_classes: int
    max_length: int
    vocab: Vocabulary
    label_names: list = field(default_factory=list)
    texts: list | None = None
    source_indices: np.ndarray | None = None

    def __post_init__(self):
        for ex in self.examples:
            if len(ex.token_ids) != self.max_length:
                raise ContractError("every example must be padded to max_length")
            if not 0 <= ex.label < self.num_classes:
                raise ContractError(f"label {ex.label} outside [0, {self.num_classes})")
        if self.source_indices is None:
            self.source_indices = np.arange(len(self.examples))

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i: int) -> Example:
        return self.examples[i]

    @property
    def ids(self) -> np.ndarray:
        return np.array([ex.token_ids for ex in self.examples], dtype=np.int64).reshape(
            len(self.examples), self.max_length)

    @property
    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=np.int64)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            examples=[self.examples[i] for i in indices],
            num_classes=self.num_classes,
            max_length=self.max_length,
            vocab=self.vocab,
            label_names=list(self.label_names),
            texts=None if self.texts is None else [self.texts[i] for i in indices],
            source_indices=self.source_indices[indices],
        )


def read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}: invalid JSON ({exc.msg})", lineno) from exc
            if not isinstance(row, dict) or not isinstance(row.get("text"), str) \
                    or not isinstance(row.get("label"), (str, int)) or isinstance(row.get("label"), bool):
                raise ParseError(f"{path}: line {lineno}: expected {{'text': str, 'label': str|int}}",
                                 lineno)
            rows.append(row)
    return rows


def _label_key(v):
    return (isinstance(v, str), v)


def load_jsonl(path, vocab: Vocabulary | None = None, max_length: int = 32,
               num_classes: int | None = None, max_vocab: int = 2000,
               label_names: Sequence | None = None) -> LabeledDataset:
    """Load a ``{"text", "label"}`` JSONL file.

    Labels map to ``[0, C)`` by sorted unique value unless ``label_names``
    fixes the order (pass the training file's names when loading a test file).
    """
    rows = read_jsonl(path)
    if not rows:
        raise ParseError(f"{path}: no examples")
    if label_names is None:
        label_names = sorted({r["label"] for r in rows}, key=_label_key)
    label_names = list(label_names)
    if num_classes is not None and len(label_names) != num_classes:
        raise ContractError(f"{path}: found {len(label_names)} labels, expected {num_classes}")
    label_ids = {name: i for i, name in enumerate(label_names)}
    texts = [r["text"] for r in rows]
    if vocab is None:
        vocab = build_vocab(texts, max_vocab)
    examples = []
    for lineno, r in enumerate(rows, start=1):
        if r["label"] not in label_ids:
            raise ContractError(f"{path}: label {r['label']!r} not among {label_names}")
        examples.append(encode(r["text"], vocab, max_length, label_ids[r["label"]]))
    return LabeledDataset(examples, len(label_names), max_length, vocab, label_names, texts)


def write_jsonl(rows: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class SubsetSpec:
    num_subsets: int = 15
    train_per_class: int = 40
    val_per_class: int = 5
    seed: int = 0

    def __post_init__(self):
        if min(self.num_subsets, self.train_per_class, self.val_per_class) < 1:
            raise ConfigError("subset sizes must be positive")


def sample_subsets(data: LabeledDataset, spec: SubsetSpec) -> list[tuple[LabeledDataset, LabeledDataset]]:
    """Independently sample ``spec.num_subsets`` class-balanced train/val pairs.

    Within a pair sampling is without replacement and train/val are disjoint;
    different pairs may share examples.  Subset ``i`` draws from its own
    stream, so the result for a given index does not depend on the others.
    """
    need = spec.train_per_class + spec.val_per_class
    labels = data.labels
    by_class = [np.flatnonzero(labels == c) for c in range(data.num_classes)]
    for c, members in enumerate(by_class):
        if len(members) < need:
            name = data.label_names[c] if c < len(data.label_names) else c
            raise ConfigError(f"class {name!r} has {len(members)} examples, "
                              f"needs {need} for train+val")
    out = []
    for i in range(spec.num_subsets):
        rng = stream(spec.seed, Purpose.SUBSET, i)
        train_idx, val_idx = [], []
        for members in by_class:
            pick = rng.permutation(members)[:need]
            train_idx.extend(pick[: spec.train_per_class])
            val_idx.extend(pick[spec.train_per_class:])
        out.append((data.subset(sorted(train_idx)), data.subset(sorted(val_idx))))
    return out


def subset_manifest(subsets) -> list[dict]:
    return [{"subset": i,
             "train": [int(j) for j in tr.source_indices],
             "val": [int(j) for j in va.source_indices]}
            for i, (tr, va) in enumerate(subsets)]


def batch(data: LabeledDataset | int, batch_size: int, seed: int, epoch: int = 0) -> list[np.ndarray]:
    """Shuffled index batches for one epoch; the last short batch is kept."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n = data if isinstance(data, int) else len(data)
    order = stream(seed, Purpose.SHUFFLE, epoch).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
