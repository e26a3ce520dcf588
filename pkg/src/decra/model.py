"""Transformer encoder with a language-model head and a classification head.

Both heads read the output of one shared encoder.  Inputs are either hard
token ids or soft rows (sparse distributions over the vocabulary); a soft row
embeds as the probability-weighted sum of token embedding rows.
"""

from __future__ import annotations

import copy
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tt
from .corpus import PAD, TOKENIZER, Example
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .streams import Purpose, stream
from .tensor import Tensor

INIT_STD = 0.02
ATTENTION_MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_length: int = 32
    num_classes: int = 2
    hidden: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ff_multiplier: int = 4
    dropout_rate: float = 0.1
    activation: str = "gelu"
    tie_lm_head: bool = False
    layer_norm_eps: float = 1e-12
    tokenizer: str = TOKENIZER

    def __post_init__(self):
        for name in ("vocab_size", "max_length", "num_classes", "hidden", "num_layers",
                     "num_heads", "ff_multiplier"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.hidden % self.num_heads:
            raise ConfigError(f"hidden={self.hidden} not divisible by num_heads={self.num_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.activation not in tt.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class LayerParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


@dataclass
class EncoderParams:
    token_embedding: Tensor
    position_embedding: Tensor
    embed_ln_gain: Tensor
    embed_ln_bias: Tensor
    layers: list = field(default_factory=list)


@dataclass
class LMHead:
    weight: Tensor  # (V, H); logits = e @ weight.T + bias
    bias: Tensor


@dataclass
class ClsHead:
    weight: Tensor  # (H, C)
    bias: Tensor


@dataclass
class Model:
    config: ModelConfig
    encoder: EncoderParams
    lm_head: LMHead
    cls_head: ClsHead

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        enc = self.encoder
        for name in ("token_embedding", "position_embedding", "embed_ln_gain", "embed_ln_bias"):
            out.append((f"encoder.{name}", getattr(enc, name)))
        for i, layer in enumerate(enc.layers):
            for f in fields(LayerParams):
                out.append((f"encoder.layers.{i}.{f.name}", getattr(layer, f.name)))
        if not self.config.tie_lm_head:
            out.append(("lm_head.weight", self.lm_head.weight))
        out.append(("lm_head.bias", self.lm_head.bias))
        out.append(("cls_head.weight", self.cls_head.weight))
        out.append(("cls_head.bias", self.cls_head.bias))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        for name, t in self.named_parameters():
            if name not in state:
                raise FormatError(f"missing parameter {name}")
            if state[name].shape != t.shape:
                raise FormatError(f"{name}: shape {state[name].shape} != {t.shape}")
            t.data[...] = state[name]

    def copy(self) -> "Model":
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.grad = None
        return clone


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_model(config: ModelConfig, seed: int = 0) -> Model:
    """Random initialisation: truncated normal(0, 0.02) weights, zero biases, unit gains."""
    rng = stream(seed, Purpose.INIT)
    H, V, T, C = config.hidden, config.vocab_size, config.max_length, config.num_classes
    F = H * config.ff_multiplier

    def w(*shape, name):
        return Tensor(_truncated_normal(rng, shape, INIT_STD), requires_grad=True, name=name)

    def const(value, n, name):
        return Tensor(np.full(n, value), requires_grad=True, name=name)

    token_embedding = w(V, H, name="encoder.token_embedding")
    encoder = EncoderParams(
        token_embedding=token_embedding,
        position_embedding=w(T, H, name="encoder.position_embedding"),
        embed_ln_gain=const(1.0, H, "encoder.embed_ln_gain"),
        embed_ln_bias=const(0.0, H, "encoder.embed_ln_bias"),
    )
    for i in range(config.num_layers):
        p = f"encoder.layers.{i}."
        encoder.layers.append(LayerParams(
            wq=w(H, H, name=p + "wq"), bq=const(0.0, H, p + "bq"),
            wk=w(H, H, name=p + "wk"), bk=const(0.0, H, p + "bk"),
            wv=w(H, H, name=p + "wv"), bv=const(0.0, H, p + "bv"),
            wo=w(H, H, name=p + "wo"), bo=const(0.0, H, p + "bo"),
            ln1_gain=const(1.0, H, p + "ln1_gain"), ln1_bias=const(0.0, H, p + "ln1_bias"),
            w_ff1=w(H, F, name=p + "w_ff1"), b_ff1=const(0.0, F, p + "b_ff1"),
            w_ff2=w(F, H, name=p + "w_ff2"), b_ff2=const(0.0, H, p + "b_ff2"),
            ln2_gain=const(1.0, H, p + "ln2_gain"), ln2_bias=const(0.0, H, p + "ln2_bias"),
        ))
    lm_weight = token_embedding if config.tie_lm_head else w(V, H, name="lm_head.weight")
    lm_head = LMHead(lm_weight, const(0.0, V, "lm_head.bias"))
    cls_head = ClsHead(w(H, C, name="cls_head.weight"), const(0.0, C, "cls_head.bias"))
    return Model(config, encoder, lm_head, cls_head)


@dataclass
class TokenBatch:
    """Sparse input rows: position t of sequence b is ``sum_k weights[b,t,k] * onehot(ids[b,t,k])``."""

    ids: np.ndarray  # (B, T, K) int64
    weights: np.ndarray  # (B, T, K) float64
    lengths: np.ndarray  # (B,) non-PAD length per sequence

    @classmethod
    def from_ids(cls, ids, lengths=None) -> "TokenBatch":
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise DimensionError(f"expected (batch, T) ids, got shape {ids.shape}")
        if lengths is None:
            lengths = _lengths_from_ids(ids)
        return cls(ids[..., None], np.ones(ids.shape + (1,)), np.asarray(lengths, dtype=np.int64))


def _lengths_from_ids(ids: np.ndarray) -> np.ndarray:
    nonpad = ids != PAD
    T = ids.shape[1]
    # length = 1 + index of the last non-PAD position
    last = T - np.argmax(nonpad[:, ::-1], axis=1)
    return np.where(nonpad.any(axis=1), last, 0)


def as_batch(inputs) -> TokenBatch:
    """Accept a TokenBatch, a (B, T) id array, Examples or soft sequences."""
    if isinstance(inputs, TokenBatch):
        return inputs
    if isinstance(inputs, np.ndarray):
        return TokenBatch.from_ids(inputs)
    inputs = list(inputs)
    if not inputs:
        raise ContractError("empty input batch")
    if all(isinstance(x, Example) for x in inputs):
        return TokenBatch.from_ids(np.array([x.token_ids for x in inputs]))
    # soft sequences: objects exposing ids (T, K), probs (T, K) and length
    K = max(x.ids.shape[1] for x in inputs)
    B, T = len(inputs), inputs[0].ids.shape[0]
    ids = np.zeros((B, T, K), dtype=np.int64)
    weights = np.zeros((B, T, K))
    for b, x in enumerate(inputs):
        if x.ids.shape[0] != T:
            raise DimensionError("soft sequences in one batch must share T")
        ids[b, :, : x.ids.shape[1]] = x.ids
        weights[b, :, : x.ids.shape[1]] = x.probs
    sums = weights.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-4) or np.any(weights < 0):
        raise ContractError("soft input rows must be probability distributions")
    return TokenBatch(ids, weights, np.array([x.length for x in inputs], dtype=np.int64))


def encode(inputs, model: Model, train_mode: bool = False,
           rng: np.random.Generator | None = None) -> Tensor:
    """Contextual embeddings of shape (batch, T, H).

    Dropout is applied only when ``train_mode`` is set, drawing from ``rng``.
    PAD positions (index >= length) are excluded as attention keys.
    """
    cfg = model.config
    batch = as_batch(inputs)
    B, T, _ = batch.ids.shape
    if T != cfg.max_length:
        raise DimensionError(f"sequence length {T} != configured T={cfg.max_length}")
    if np.any(np.abs(batch.weights.sum(axis=-1) - 1.0) > 1e-4):
        raise ContractError("input rows must be probability distributions")
    rate = cfg.dropout_rate if train_mode else 0.0
    if rate > 0.0 and rng is None:
        raise ContractError("train_mode with dropout needs an rng")
    act = tt.ACTIVATIONS[cfg.activation]
    enc = model.encoder
    eps = cfg.layer_norm_eps

    x = tt.embed(enc.token_embedding, batch.ids, batch.weights) + enc.position_embedding
    x = tt.layer_norm(x, enc.embed_ln_gain, enc.embed_ln_bias, eps)
    x = tt.dropout(x, rate, rng)

    key_pad = np.arange(T)[None, :] >= batch.lengths[:, None]
    mask = Tensor(np.where(key_pad, ATTENTION_MASK_VALUE, 0.0)[:, None, None, :])
    nh, d = cfg.num_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(d)
    for layer in enc.layers:
        def heads(t):
            return t.reshape(B, T, nh, d).transpose(0, 2, 1, 3)

        q = heads(x @ layer.wq + layer.bq)
        k = heads(x @ layer.wk + layer.bk)
        v = heads(x @ layer.wv + layer.bv)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale + mask
        attn = tt.softmax(scores, axis=-1)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.hidden)
        out = tt.dropout(ctx @ layer.wo + layer.bo, rate, rng)
        x = tt.layer_norm(x + out, layer.ln1_gain, layer.ln1_bias, eps)
        ff = act(x @ layer.w_ff1 + layer.b_ff1) @ layer.w_ff2 + layer.b_ff2
        ff = tt.dropout(ff, rate, rng)
        x = tt.layer_norm(x + ff, layer.ln2_gain, layer.ln2_bias, eps)
    return x


def lm_predict(embeddings: Tensor, head: LMHead) -> Tensor:
    """Vocabulary logits for every row of ``embeddings`` (no softmax)."""
    H = head.weight.shape[1]
    if embeddings.shape[-1] != H:
        raise DimensionError(f"lm_predict: embedding size {embeddings.shape[-1]} != {H}")
    if embeddings.ndim == 1:
        embeddings = embeddings.reshape(1, H)
        return (embeddings @ head.weight.transpose() + head.bias).reshape(head.bias.shape)
    return embeddings @ head.weight.transpose() + head.bias


def classify(embeddings: Tensor, head: ClsHead) -> Tensor:
    """Class logits from the CLS (position 0) embedding of each sequence."""
    if embeddings.ndim != 3 or embeddings.shape[-1] != head.weight.shape[0]:
        raise DimensionError(f"classify expects (B, T, {head.weight.shape[0]}), "
                             f"got {embeddings.shape}")
    return embeddings[:, 0, :] @ head.weight + head.bias


# checkpoint container
#
#   magic       8 bytes  b"DECRACKP"
#   version     u32
#   header_len  u32, then header_len bytes of UTF-8 JSON {"config": ..., "extra": ...}
#   n_blocks    u32
#   per block:  u32 name_len, name bytes, u32 rank, rank x u32 dims,
#               prod(dims) little-endian float64 values
#   crc32       u32 over every preceding byte

MAGIC = b"DECRACKP"
FORMAT_VERSION = 1


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    """Write the binary checkpoint plus a ``<path>.json`` config sidecar."""
    header = json.dumps({"config": model.config.to_dict(), "extra": extra or {}},
                        sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    named = model.named_parameters()
    parts.append(struct.pack("<I", len(named)))
    for name, t in named:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    body = b"".join(parts)
    path = Path(path)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(model.config.to_dict(), indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[Model, dict]:
    """Return ``(model, extra)``; raise FormatError on any damage."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{path}: checksum mismatch (corrupt or truncated)")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise FormatError(f"{path}: truncated")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    version, header_len = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(take(header_len).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad header ({exc})") from exc
    (n_blocks,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(n_blocks):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        state[name] = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(body):
        raise FormatError(f"{path}: trailing bytes after parameter blocks")
    model = init_model(config, seed=0)
    model.load_state_dict(state)
    return model, header.get("extra", {})
