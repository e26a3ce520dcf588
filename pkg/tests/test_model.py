import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_grad_close, finite_difference, random_examples
from decra import model as M
from decra import tensor as tt
from decra.corpus import CLS, PAD, Example
from decra.errors import ConfigError, ContractError, DimensionError, FormatError
from decra.kbeta import MaskSet, SoftSequence
from decra.tensor import Tensor


def one_hot_soft(ex: Example, k: int = 1) -> SoftSequence:
    T = len(ex.token_ids)
    ids = np.zeros((T, k), dtype=np.int64)
    probs = np.zeros((T, k))
    ids[:, 0] = ex.token_ids
    probs[:, 0] = 1.0
    return SoftSequence(ids, probs, ex.label, 0, 1, MaskSet((1,)), ex.length)


class TestConfig:
    def test_heads_must_divide_hidden(self):
        with pytest.raises(ConfigError):
            M.ModelConfig(vocab_size=10, hidden=10, num_heads=3)

    @pytest.mark.parametrize("field", ["vocab_size", "max_length", "num_classes", "hidden",
                                       "num_layers", "num_heads", "ff_multiplier"])
    def test_sizes_positive(self, field):
        kw = dict(vocab_size=10, hidden=8, num_heads=2)
        kw[field] = 0
        with pytest.raises(ConfigError):
            M.ModelConfig(**kw)

    @pytest.mark.parametrize("rate", [-0.1, 1.0])
    def test_dropout_range(self, rate):
        with pytest.raises(ConfigError):
            M.ModelConfig(vocab_size=10, hidden=8, num_heads=2, dropout_rate=rate)

    def test_unknown_activation(self):
        with pytest.raises(ConfigError):
            M.ModelConfig(vocab_size=10, hidden=8, num_heads=2, activation="swish")

    def test_dict_round_trip(self, tiny_config):
        assert M.ModelConfig.from_dict(tiny_config.to_dict()) == tiny_config


class TestInit:
    def test_deterministic(self, tiny_config):
        a, b = M.init_model(tiny_config, 5), M.init_model(tiny_config, 5)
        for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and ta.data.tobytes() == tb.data.tobytes()
        c = M.init_model(tiny_config, 6)
        assert c.encoder.token_embedding.data.tobytes() != a.encoder.token_embedding.data.tobytes()

    def test_gains_and_biases(self, tiny_config):
        m = M.init_model(tiny_config, 0)
        for name, t in m.named_parameters():
            if "gain" in name:
                assert np.all(t.data == 1.0), name
            elif name.endswith("bias") or ".b" in name:
                assert np.all(t.data == 0.0), name

    def test_scale_and_truncation(self):
        cfg = M.ModelConfig(vocab_size=400, hidden=64, num_heads=4)
        E = M.init_model(cfg, 1).encoder.token_embedding.data
        assert abs(E.mean()) < 3 * 0.02 / math.sqrt(E.size)
        assert np.abs(E).max() <= 0.04
        # truncated normal at 2 sigma has std 0.02 * 0.8796
        assert abs(E.std() - 0.02 * 0.8796) < 0.001

    def test_shapes(self, tiny_config):
        m = M.init_model(tiny_config, 0)
        V, T, H, C = 12, 6, 8, 3
        assert m.encoder.token_embedding.shape == (V, H)
        assert m.encoder.position_embedding.shape == (T, H)
        assert m.lm_head.weight.shape == (V, H) and m.lm_head.bias.shape == (V,)
        assert m.cls_head.weight.shape == (H, C) and m.cls_head.bias.shape == (C,)
        assert m.encoder.layers[0].w_ff1.shape == (H, 4 * H)


def _oracle_encode(model: M.Model, ids):
    """Plain-loop forward for a one-layer, one-head model."""
    from scipy.special import erf

    enc, L = model.encoder, model.encoder.layers[0]
    eps = model.config.layer_norm_eps
    n = len(ids)
    length = max(i + 1 for i, t in enumerate(ids) if t != PAD)

    def ln(v, g, b):
        mu = sum(v) / len(v)
        var = sum((a - mu) ** 2 for a in v) / len(v)
        return np.array([(a - mu) / math.sqrt(var + eps) * gg + bb for a, gg, bb in zip(v, g, b)])

    def gelu(z):
        return 0.5 * z * (1.0 + erf(z / math.sqrt(2.0)))

    x = [ln(enc.token_embedding.data[t] + enc.position_embedding.data[p],
            enc.embed_ln_gain.data, enc.embed_ln_bias.data) for p, t in enumerate(ids)]
    q = [xi @ L.wq.data + L.bq.data for xi in x]
    k = [xi @ L.wk.data + L.bk.data for xi in x]
    v = [xi @ L.wv.data + L.bv.data for xi in x]
    H = len(x[0])
    out = []
    for i in range(n):
        s = [float(q[i] @ k[j]) / math.sqrt(H) if j < length else -math.inf for j in range(n)]
        m = max(s)
        w = [math.exp(a - m) for a in s]
        z = sum(w)
        ctx = sum((wj / z) * v[j] for j, wj in enumerate(w))
        h = ln(x[i] + ctx @ L.wo.data + L.bo.data, L.ln1_gain.data, L.ln1_bias.data)
        ff = gelu(h @ L.w_ff1.data + L.b_ff1.data) @ L.w_ff2.data + L.b_ff2.data
        out.append(ln(h + ff, L.ln2_gain.data, L.ln2_bias.data))
    return np.array(out)


class TestEncode:
    def test_attention_oracle_two_tokens(self):
        cfg = M.ModelConfig(vocab_size=10, max_length=2, num_classes=2, hidden=8,
                            num_layers=1, num_heads=1, dropout_rate=0.0)
        m = M.init_model(cfg, 3)
        rng = np.random.default_rng(0)
        for _, t in m.named_parameters():
            t.data[...] = rng.normal(0, 0.3, t.shape)
        ids = [CLS, 7]
        got = M.encode([Example(tuple(ids), 0)], m).data[0]
        np.testing.assert_allclose(got, _oracle_encode(m, ids), atol=1e-8, rtol=0)

    def test_attention_oracle_with_padding(self):
        cfg = M.ModelConfig(vocab_size=10, max_length=4, num_classes=2, hidden=8,
                            num_layers=1, num_heads=1, dropout_rate=0.0)
        m = M.init_model(cfg, 4)
        rng = np.random.default_rng(1)
        for _, t in m.named_parameters():
            t.data[...] = rng.normal(0, 0.3, t.shape)
        ids = [CLS, 5, PAD, PAD]
        got = M.encode([Example(tuple(ids), 0)], m).data[0]
        np.testing.assert_allclose(got, _oracle_encode(m, ids), atol=1e-8, rtol=0)

    def test_soft_one_hot_equals_hard(self, tiny_config):
        m = M.init_model(tiny_config, 0)
        exs = random_examples(np.random.default_rng(0), 5, 6, 12, 3)
        hard = M.encode(exs, m).data
        soft = M.encode([one_hot_soft(e, k=2) for e in exs], m).data
        assert np.max(np.abs(hard - soft)) < 1e-12

    def test_soft_mixture_is_weighted_embedding(self, tiny_config):
        m = M.init_model(tiny_config, 0)
        ids = np.zeros((6, 2), dtype=np.int64)
        probs = np.zeros((6, 2))
        ids[:, 0] = [CLS, 4, 5, 6, PAD, PAD]
        probs[:, 0] = 1.0
        ids[2] = [7, 9]
        probs[2] = [0.25, 0.75]
        soft = SoftSequence(ids, probs, 0, 0, 1, MaskSet((2,)), 4)
        batch = M.as_batch([soft])
        E = m.encoder.token_embedding.data
        got = tt.embed(m.encoder.token_embedding, batch.ids, batch.weights).data[0, 2]
        np.testing.assert_allclose(got, 0.25 * E[7] + 0.75 * E[9], atol=1e-15)

    def test_pad_content_does_not_leak(self, tiny_config):
        m = M.init_model(tiny_config, 2)
        base = (CLS, 5, 6, PAD, PAD, PAD)
        ref = M.encode(M.TokenBatch.from_ids([base], lengths=[3]), m).data[0, :3]
        for junk in [(7, 8, 9), (11, 4, 4)]:
            ids = base[:3] + junk
            out = M.encode(M.TokenBatch.from_ids([ids], lengths=[3]), m).data[0, :3]
            assert np.max(np.abs(out - ref)) < 1e-9

    def test_bad_distribution(self, tiny_config):
        m = M.init_model(tiny_config, 0)
        ex = Example((CLS, 4, 5, PAD, PAD, PAD), 0)
        s = one_hot_soft(ex, k=2)
        s.probs[1] = [0.5, 0.4]
        with pytest.raises(ContractError):
            M.encode([s], m)

    def test_wrong_length(self, tiny_config):
        m = M.init_model(tiny_config, 0)
        with pytest.raises(DimensionError):
            M.encode([Example((CLS, 4, 5), 0)], m)

    def test_dropout_needs_rng_and_only_in_train(self, tiny_config):
        m = M.init_model(tiny_config, 0)
        exs = random_examples(np.random.default_rng(3), 3, 6, 12, 3)
        with pytest.raises(ContractError):
            M.encode(exs, m, train_mode=True)
        a = M.encode(exs, m).data
        b = M.encode(exs, m, rng=np.random.default_rng(0)).data
        assert np.array_equal(a, b)
        c = M.encode(exs, m, train_mode=True, rng=np.random.default_rng(0)).data
        assert not np.allclose(a, c)


class TestHeads:
    def test_lm_zero_embedding_gives_bias(self, tiny_config):
        m = M.init_model(tiny_config, 0)
        m.lm_head.bias.data[...] = np.arange(12.0)
        out = M.lm_predict(Tensor(np.zeros((2, 6, 8))), m.lm_head).data
        assert out.shape == (2, 6, 12)
        assert np.array_equal(out, np.broadcast_to(np.arange(12.0), (2, 6, 12)))

    def test_lm_affine_oracle(self, tiny_config):
        m = M.init_model(tiny_config, 0)
        m.lm_head.bias.data[...] = np.random.default_rng(0).normal(size=12)
        e = np.random.default_rng(1).normal(size=(3, 6, 8))
        W, b = m.lm_head.weight.data, m.lm_head.bias.data
        expected = np.einsum("bth,vh->btv", e, W) + b
        assert np.max(np.abs(M.lm_predict(Tensor(e), m.lm_head).data - expected)) < 1e-12

    def test_lm_dim_mismatch(self, tiny_config):
        m = M.init_model(tiny_config, 0)
        with pytest.raises(DimensionError):
            M.lm_predict(Tensor(np.zeros((2, 6, 5))), m.lm_head)

    def test_classify_uses_position_zero(self, tiny_config):
        m = M.init_model(tiny_config, 0)
        e = np.random.default_rng(2).normal(size=(4, 6, 8))
        ref = M.classify(Tensor(e), m.cls_head).data
        e[:, 1:] = np.random.default_rng(3).normal(size=(4, 5, 8))
        assert np.array_equal(M.classify(Tensor(e), m.cls_head).data, ref)

    def test_classify_zero_cls_gives_bias(self, tiny_config):
        m = M.init_model(tiny_config, 0)
        m.cls_head.bias.data[...] = [1.0, -2.0, 0.5]
        e = np.random.default_rng(2).normal(size=(2, 6, 8))
        e[:, 0] = 0.0
        assert np.array_equal(M.classify(Tensor(e), m.cls_head).data, [[1.0, -2.0, 0.5]] * 2)

    def test_classify_affine_oracle(self, tiny_config):
        m = M.init_model(tiny_config, 0)
        m.cls_head.bias.data[...] = [0.3, 0.1, -0.2]
        e = np.random.default_rng(4).normal(size=(5, 6, 8))
        expected = e[:, 0] @ m.cls_head.weight.data + m.cls_head.bias.data
        assert np.max(np.abs(M.classify(Tensor(e), m.cls_head).data - expected)) < 1e-12

    def test_classify_dim_mismatch(self, tiny_config):
        m = M.init_model(tiny_config, 0)
        with pytest.raises(DimensionError):
            M.classify(Tensor(np.zeros((2, 6, 4))), m.cls_head)


def test_end_to_end_gradients(tiny_config):
    cfg = M.ModelConfig(**{**tiny_config.to_dict(), "dropout_rate": 0.0})
    m = M.init_model(cfg, 0)
    rng = np.random.default_rng(9)
    for _, t in m.named_parameters():
        t.data += rng.normal(0, 0.1, t.shape)
    exs = random_examples(np.random.default_rng(1), 3, 6, 12, 3)
    labels = tt.one_hot(np.array([e.label for e in exs]), 3)

    def loss():
        e = M.encode(exs, m)
        lm = M.lm_predict(e, m.lm_head)
        return (tt.cross_entropy(M.classify(e, m.cls_head), labels)
                + 0.01 * (lm * lm).mean())

    m.zero_grad()
    with tt.Tape() as tape:
        out = loss()
    tt.backward(out, tape)
    for name, t in m.named_parameters():
        num = finite_difference(lambda: loss().item(), t.data)
        assert_grad_close(t.grad, num, rtol=1e-3, atol=1e-8)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, tiny_config):
        m = M.init_model(tiny_config, 0)
        for _, t in m.named_parameters():
            t.data += np.random.default_rng(1).normal(size=t.shape)
        p = tmp_path / "m.ckpt"
        M.save_checkpoint(m, p, extra={"note": "x"})
        back, extra = M.load_checkpoint(p)
        assert back.config == m.config and extra == {"note": "x"}
        for (na, a), (nb, b) in zip(m.named_parameters(), back.named_parameters()):
            assert na == nb and a.data.tobytes() == b.data.tobytes()
        assert (tmp_path / "m.ckpt.json").exists()

    def test_logit_replay_two_layer(self, tmp_path):
        cfg = M.ModelConfig(vocab_size=50, max_length=8, num_classes=4, hidden=32,
                            num_layers=2, num_heads=4)
        m = M.init_model(cfg, 7)
        exs = random_examples(np.random.default_rng(0), 6, 8, 50, 4)
        p = tmp_path / "m.ckpt"
        M.save_checkpoint(m, p)
        back, _ = M.load_checkpoint(p)
        before, after = (M.classify(M.encode(exs, x), x.cls_head).data for x in (m, back))
        assert np.array_equal(before, after)

    @pytest.mark.parametrize("offset", [0, 9, 20])
    def test_corrupt_byte(self, tmp_path, tiny_config, offset):
        p = tmp_path / "m.ckpt"
        M.save_checkpoint(M.init_model(tiny_config, 0), p)
        raw = bytearray(p.read_bytes())
        raw[offset] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            M.load_checkpoint(p)

    def test_truncated(self, tmp_path, tiny_config):
        p = tmp_path / "m.ckpt"
        M.save_checkpoint(M.init_model(tiny_config, 0), p)
        p.write_bytes(p.read_bytes()[:-50])
        with pytest.raises(FormatError):
            M.load_checkpoint(p)

    def test_version_mismatch(self, tmp_path, tiny_config):
        import struct
        import zlib
        p = tmp_path / "m.ckpt"
        M.save_checkpoint(M.init_model(tiny_config, 0), p)
        body = bytearray(p.read_bytes()[:-4])
        body[8:12] = struct.pack("<I", 99)
        p.write_bytes(bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))))
        with pytest.raises(FormatError, match="version"):
            M.load_checkpoint(p)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4))
def test_hard_soft_equivalence_property(seed, n):
    cfg = M.ModelConfig(vocab_size=12, max_length=6, num_classes=3, hidden=8,
                        num_layers=1, num_heads=2)
    m = M.init_model(cfg, seed % 1000)
    exs = random_examples(np.random.default_rng(seed), n, 6, 12, 3, min_len=1)
    hard = M.encode(exs, m).data
    soft = M.encode([one_hot_soft(e, k=3) for e in exs], m).data
    assert np.max(np.abs(hard - soft)) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_pad_invariance_property(seed):
    cfg = M.ModelConfig(vocab_size=12, max_length=6, num_classes=3, hidden=8,
                        num_layers=2, num_heads=2)
    rng = np.random.default_rng(seed)
    m = M.init_model(cfg, 0)
    length = int(rng.integers(1, 6))
    ids = np.array([[CLS] + list(rng.integers(4, 12, length - 1)) + [PAD] * (6 - length)])
    other = ids.copy()
    other[0, length:] = rng.integers(4, 12, 6 - length)
    a = M.encode(M.TokenBatch.from_ids(ids, [length]), m).data[0, :length]
    b = M.encode(M.TokenBatch.from_ids(other, [length]), m).data[0, :length]
    assert np.max(np.abs(a - b)) < 1e-9
