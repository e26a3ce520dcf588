"""k-beta augmentation: beta masked copies, each refilled with top-k LM mixtures.

For every run ``j`` the example is masked at a random set of positions, the
frozen model predicts vocabulary logits at those positions, the ``k`` best
tokens are kept and renormalised with a softmax, and each masked row becomes
that sparse distribution.  All other rows stay one-hot at the original ids.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import model as M
from . import tensor as tt
from .corpus import CLS, MASK, PAD, Example
from .errors import ConfigError, ContractError
from .streams import Purpose, stream


@dataclass(frozen=True)
class AugmentConfig:
    k: int = 2
    beta: int = 18
    p_mask: float = 0.15
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.beta < 1:
            raise ConfigError("k and beta must be positive")
        if not 0.0 < self.p_mask < 1.0:
            raise ConfigError("p_mask must lie strictly between 0 and 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")


@dataclass(frozen=True)
class MaskSet:
    positions: tuple

    def __post_init__(self):
        if not self.positions:
            raise ContractError("a mask set must contain at least one position")

    def __len__(self) -> int:
        return len(self.positions)

    def indicator(self, T: int) -> np.ndarray:
        m = np.zeros(T, dtype=bool)
        m[list(self.positions)] = True
        return m


@dataclass
class SoftSequence:
    """Sparse soft token rows.

    ``ids[t]`` / ``probs[t]`` hold the support and probabilities of row ``t``;
    unused slots have probability 0.  Unmasked rows are one-hot in slot 0.
    """

    ids: np.ndarray  # (T, K) int64
    probs: np.ndarray  # (T, K) float64
    label: int
    source_index: int
    run_index: int
    mask: MaskSet
    length: int

    @property
    def rows(self) -> list[dict]:
        return [{int(i): float(p) for i, p in zip(ri, rp) if p > 0}
                for ri, rp in zip(self.ids, self.probs)]

    def soft_rows(self) -> list:
        """Masked rows as ``[position, [[token, prob], ...]]``."""
        out = []
        for t in self.mask.positions:
            pairs = [[int(i), float(p)] for i, p in zip(self.ids[t], self.probs[t]) if p > 0]
            out.append([int(t), pairs])
        return out


def eligible_positions(example: Example) -> np.ndarray:
    ids = np.asarray(example.token_ids)
    pos = np.arange(1, example.length)
    return pos[(ids[pos] != PAD) & (ids[pos] != CLS)]


def sample_mask_set(example: Example, p_mask: float, rng: np.random.Generator) -> MaskSet:
    """Independent Bernoulli(p_mask) per eligible position, at least one position."""
    eligible = eligible_positions(example)
    if eligible.size == 0:
        raise ContractError("example has no maskable token")
    draw = rng.random(eligible.size) < p_mask
    if not draw.any():
        return MaskSet((int(eligible[rng.integers(eligible.size)]),))
    return MaskSet(tuple(int(p) for p in eligible[draw]))


def apply_mask(example: Example, mask: MaskSet) -> Example:
    ids = list(example.token_ids)
    for t in mask.positions:
        ids[t] = MASK
    return Example(tuple(ids), example.label)


def topk_renormalize(logits_row, k: int, temperature: float = 1.0) -> dict:
    """Softmax over the ``k`` largest logits (ties go to the lower id)."""
    ids, probs = _topk(np.asarray(logits_row, dtype=np.float64)[None, :], k, temperature)
    return {int(i): float(p) for i, p in zip(ids[0], probs[0])}


def _topk(logits: np.ndarray, k: int, temperature: float) -> tuple[np.ndarray, np.ndarray]:
    V = logits.shape[-1]
    if k > V:
        raise ConfigError(f"k={k} exceeds vocabulary size {V}")
    if k < 1:
        raise ConfigError("k must be positive")
    # stable sort on -logits keeps lower ids first among equal values
    order = np.argsort(-logits, axis=-1, kind="stable")[:, :k]
    top = np.take_along_axis(logits, order, axis=-1) / temperature
    z = np.exp(top - top.max(axis=-1, keepdims=True))
    return order, z / z.sum(axis=-1, keepdims=True)


def augment_stream(seed: int, index: int, run: int, epoch: int = 0) -> np.random.Generator:
    return stream(seed, Purpose.AUG_MASK, epoch, index, run)


def kbeta_augment_batch(examples: Sequence[Example], indices: Sequence[int], model: M.Model,
                        cfg: AugmentConfig, epoch: int = 0) -> list[list[SoftSequence]]:
    """Augment several examples with one batched forward pass.

    Returns one list of ``cfg.beta`` soft sequences per example.  Run ``j`` of
    example ``indices[i]`` draws its mask from ``(seed, epoch, index, j)``, so
    the output for an example does not depend on what else is in the batch.
    Predictions are computed without recording, so no gradient flows back
    through the augmentation path.
    """
    V = model.config.vocab_size
    if cfg.k > V:
        raise ConfigError(f"k={cfg.k} exceeds vocabulary size {V}")
    masks, masked = [], []
    for ex, idx in zip(examples, indices):
        for j in range(1, cfg.beta + 1):
            m = sample_mask_set(ex, cfg.p_mask, augment_stream(cfg.seed, idx, j, epoch))
            masks.append(m)
            masked.append(apply_mask(ex, m))
    rows_b = np.concatenate([np.full(len(m), b) for b, m in enumerate(masks)])
    rows_t = np.concatenate([np.asarray(m.positions) for m in masks])
    with tt.no_grad():
        emb = M.encode(masked, model, train_mode=False)
        logits = M.lm_predict(emb[rows_b, rows_t], model.lm_head).data
    top_ids, top_probs = _topk(logits, cfg.k, cfg.temperature)

    out, row, seq = [], 0, 0
    for ex, idx in zip(examples, indices):
        runs = []
        base = np.asarray(ex.token_ids, dtype=np.int64)
        for j in range(1, cfg.beta + 1):
            m = masks[seq]
            ids = np.zeros((len(base), cfg.k), dtype=np.int64)
            probs = np.zeros((len(base), cfg.k))
            ids[:, 0] = base
            probs[:, 0] = 1.0
            n = len(m)
            ids[list(m.positions)] = top_ids[row:row + n]
            probs[list(m.positions)] = top_probs[row:row + n]
            runs.append(SoftSequence(ids, probs, ex.label, int(idx), j, m, ex.length))
            row += n
            seq += 1
        out.append(runs)
    return out


def kbeta_augment(example: Example, model: M.Model, cfg: AugmentConfig,
                  index: int = 0, epoch: int = 0) -> list[SoftSequence]:
    """The ``cfg.beta`` generated soft sequences for one example."""
    return kbeta_augment_batch([example], [index], model, cfg, epoch)[0]


def sample_hard(soft: SoftSequence, rng: np.random.Generator) -> Example:
    """Draw one token per row from its distribution."""
    ids = []
    for ri, rp in zip(soft.ids, soft.probs):
        if rp[0] == 1.0:
            ids.append(int(ri[0]))
        else:
            ids.append(int(ri[rng.choice(len(rp), p=rp / rp.sum())]))
    return Example(tuple(ids), soft.label)
