import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from decra import tensor as tt
from decra.errors import ContractError, DimensionError, NonFiniteError
from decra.tensor import AdamState, Tape, Tensor, adam_step, backward

from conftest import assert_grad_close, finite_difference

mpmath.mp.dps = 50


def naive_matmul(a, b):
    m, n = a.shape
    p = b.shape[1]
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            s = 0.0
            for k in range(n):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def mp_softmax(row):
    es = [mpmath.exp(mpmath.mpf(float(v))) for v in row]
    total = mpmath.fsum(es)
    return np.array([float(e / total) for e in es])


def grad_of(fn, *inputs):
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = fn(*leaves)
    backward(out, tape)
    return [leaf.grad for leaf in leaves]


class TestMatmul:
    def test_identity(self):
        out = tt.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_scalar_case(self):
        assert tt.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        out = tt.matmul(Tensor(a), Tensor(b)).data
        assert np.max(np.abs(out - naive_matmul(a, b))) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            tt.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        out = tt.matmul(Tensor(a), Tensor(b)).data
        for i in range(2):
            assert np.max(np.abs(out[i] - naive_matmul(a[i], b))) < 1e-12

    @pytest.mark.parametrize("shape_a,shape_b", [((3, 4), (4, 2)), ((2, 3, 4), (4, 2)),
                                                 ((2, 3, 4), (2, 4, 5))])
    def test_gradient(self, shape_a, shape_b):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=shape_a), rng.normal(size=shape_b)
        ga, gb = grad_of(lambda x, y: (tt.matmul(x, y) * Tensor(np.cos(np.arange(
            np.prod(shape_a[:-1]) * shape_b[-1]).reshape(shape_a[:-1] + shape_b[-1:])))).sum(), a, b)

        def f():
            return float((np.matmul(a, b) * np.cos(np.arange(
                np.prod(shape_a[:-1]) * shape_b[-1]).reshape(shape_a[:-1] + shape_b[-1:]))).sum())

        assert_grad_close(ga, finite_difference(f, a), 1e-6)
        assert_grad_close(gb, finite_difference(f, b), 1e-6)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(tt.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3,
                                   atol=1e-15)

    def test_large_values_do_not_overflow(self):
        np.testing.assert_allclose(tt.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])

    def test_high_precision_oracle(self):
        out = tt.softmax(Tensor([1.0, 2.0, 3.0])).data
        assert np.max(np.abs(out - mp_softmax([1, 2, 3]))) < 1e-9

    def test_empty_axis(self):
        with pytest.raises(DimensionError):
            tt.softmax(Tensor(np.zeros((2, 0))), axis=-1)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-1e3, 1e3)),
           st.floats(-100, 100), st.sampled_from([0, 1, -1]))
    def test_sums_to_one_and_shift_invariant(self, x, c, axis):
        y = tt.softmax(Tensor(x), axis=axis).data
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-6)
        y2 = tt.softmax(Tensor(x + c), axis=axis).data
        assert np.max(np.abs(y - y2)) < 1e-9

    def test_gradient(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 6))
        w = rng.normal(size=(4, 6))
        (g,) = grad_of(lambda t: (tt.softmax(t, axis=-1) * Tensor(w)).sum(), x)

        def f():
            e = np.exp(x - x.max(-1, keepdims=True))
            return float(((e / e.sum(-1, keepdims=True)) * w).sum())

        assert_grad_close(g, finite_difference(f, x, 1e-5), 1e-4)


class TestLayerNorm:
    def test_constant_row(self):
        out = tt.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, [[0.0, 0.0, 0.0]])

    def test_standardises(self):
        out = tt.layer_norm(Tensor([1.0, 2.0, 3.0]), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
        assert abs(out.mean()) < 1e-5
        assert abs(out.var() - 1.0) < 1e-5

    def test_high_precision_oracle(self):
        rng = np.random.default_rng(4)
        row = rng.normal(size=7)
        gain, bias = rng.normal(size=7), rng.normal(size=7)
        out = tt.layer_norm(Tensor(row), Tensor(gain), Tensor(bias)).data
        mrow = [mpmath.mpf(float(v)) for v in row]
        mu = mpmath.fsum(mrow) / 7
        var = mpmath.fsum((v - mu) ** 2 for v in mrow) / 7
        ref = np.array([float((v - mu) / mpmath.sqrt(var + mpmath.mpf("1e-12")) * g + b)
                        for v, g, b in zip(mrow, gain, bias)])
        np.testing.assert_allclose(out, ref, rtol=1e-8, atol=1e-12)

    def test_zero_length_row(self):
        with pytest.raises(DimensionError):
            tt.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.ones(0)), Tensor(np.zeros(0)))

    def test_gradient(self):
        rng = np.random.default_rng(5)
        x, gain, bias = rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)
        w = rng.normal(size=(3, 5))
        grads = grad_of(lambda a, g, b: (tt.layer_norm(a, g, b) * Tensor(w)).sum(), x, gain, bias)

        def f():
            xc = x - x.mean(-1, keepdims=True)
            xh = xc / np.sqrt((xc**2).mean(-1, keepdims=True) + 1e-12)
            return float(((xh * gain + bias) * w).sum())

        for g, arr in zip(grads, (x, gain, bias)):
            assert_grad_close(g, finite_difference(f, arr, 1e-5), 1e-4)


class TestCrossEntropy:
    def test_confident_correct(self):
        loss = tt.cross_entropy(Tensor([[10.0, -10.0]]), np.array([[1.0, 0.0]]))
        assert loss.item() < 1e-8

    @pytest.mark.parametrize("C", [2, 5, 17])
    def test_uniform_logits(self, C):
        target = np.eye(C)[[0]]
        assert abs(tt.cross_entropy(Tensor(np.zeros((1, C))), target).item() - math.log(C)) < 1e-12

    def test_direct_formula_oracle(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(4, 6)) * 3
        target = rng.dirichlet(np.ones(6), size=4)
        got = tt.cross_entropy(Tensor(logits), target).item()
        ref = mpmath.mpf(0)
        for row, t in zip(logits, target):
            lse = mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(v))) for v in row))
            ref += -mpmath.fsum(mpmath.mpf(float(ti)) * (mpmath.mpf(float(v)) - lse)
                                for v, ti in zip(row, t))
        assert abs(got - float(ref / 4)) < 1e-8

    def test_bad_target(self):
        with pytest.raises(ContractError):
            tt.cross_entropy(Tensor(np.zeros((1, 3))), np.array([[0.5, 0.2, 0.2]]))

    def test_gradient(self):
        rng = np.random.default_rng(7)
        logits = rng.normal(size=(3, 4))
        target = rng.dirichlet(np.ones(4), size=3)
        (g,) = grad_of(lambda t: tt.cross_entropy(t, target), logits)

        def f():
            z = logits - logits.max(-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
            return float(-(target * logp).sum() / 3)

        assert_grad_close(g, finite_difference(f, logits, 1e-5), 1e-4)


class TestElementwiseGradients:
    @pytest.mark.parametrize("op", ["gelu", "tanh", "mul", "div", "sub", "getitem", "embed",
                                    "concat", "log_softmax"])
    def test_against_finite_differences(self, op):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3, 4))
        y = rng.normal(size=(3, 4)) + 3.0
        w = rng.normal(size=(3, 4))
        ids = np.array([[0, 2], [1, 1], [2, 0]])
        mix = np.array([[0.3, 0.7], [0.5, 0.5], [1.0, 0.0]])
        fn = {
            "gelu": lambda a, b: tt.gelu(a) + b,
            "tanh": lambda a, b: tt.tanh(a) * b,
            "mul": lambda a, b: a * b,
            "div": lambda a, b: a / b,
            "sub": lambda a, b: a - b,
            "getitem": lambda a, b: tt.concat([a[[0, 2, 2]], b[1:]], 0)[:3],
            "embed": lambda a, b: tt.concat([tt.embed(a, ids, mix), b], 0)[:3],
            "concat": lambda a, b: tt.concat([a, b], axis=1)[:, 2:6],
            "log_softmax": lambda a, b: tt.log_softmax(a * b, axis=0),
        }[op]
        ga, gb = grad_of(lambda a, b: (fn(a, b) * Tensor(w)).sum(), x, y)
        ga = np.zeros_like(x) if ga is None else ga
        gb = np.zeros_like(y) if gb is None else gb

        def f():
            with tt.no_grad():
                return float((fn(Tensor(x), Tensor(y)).data * w).sum())

        assert_grad_close(ga, finite_difference(f, x, 1e-5), 1e-4)
        assert_grad_close(gb, finite_difference(f, y, 1e-5), 1e-4)


class TestBackward:
    def test_sum_gives_ones(self):
        (g,) = grad_of(lambda w: w.sum(), np.array([1.0, -2.0, 3.0]))
        np.testing.assert_array_equal(g, [1.0, 1.0, 1.0])

    def test_dot(self):
        (g,) = grad_of(lambda w: (w * w).sum(), np.array([1.0, 2.0]))
        np.testing.assert_array_equal(g, [2.0, 4.0])

    def test_accumulates_without_reset(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = (w * w).sum()
        backward(loss, tape)
        backward(loss, tape)
        np.testing.assert_array_equal(w.grad, [4.0, 8.0])

    def test_non_scalar_loss(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            out = w * 2.0
        with pytest.raises(ContractError):
            backward(out, tape)

    def test_tape_is_topological_and_each_node_replayed_once(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            a = w * 3.0
            b = a + a
            loss = (b * a).sum()
        produced = set()
        for node in tape.nodes:
            for inp in node.inputs:
                assert inp is w or not inp.requires_grad or id(inp) in produced
            produced.add(id(node.out))
        calls = []
        for node in tape.nodes:
            original = node.vjp
            node.vjp = lambda g, original=original, n=node: calls.append(n) or original(g)
        backward(loss, tape)
        assert len(calls) == len(tape.nodes) == len({id(n) for n in calls})
        # loss = 2 * (3w)^2 = 18 w^2
        np.testing.assert_allclose(w.grad, 36 * np.array([1.0, 2.0]))

    def test_no_grad_blocks_recording(self):
        w = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            with tt.no_grad():
                frozen = w * 5.0
            loss = (w * frozen).sum()
        backward(loss, tape)
        np.testing.assert_array_equal(w.grad, [5.0])

    def test_non_finite_is_an_error(self):
        with pytest.raises(NonFiniteError):
            tt.div(Tensor([1.0]), Tensor([0.0]))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (2, 6), elements=st.floats(-1e3, 1e3)))
    def test_ops_stay_finite_in_range(self, x):
        t = Tensor(x)
        tt.softmax(t)
        tt.log_softmax(t)
        tt.gelu(t)
        tt.tanh(t)
        tt.layer_norm(t, Tensor(np.ones(6)), Tensor(np.zeros(6)))
        tt.cross_entropy(t, np.eye(6)[[0, 3]])


class TestAdam:
    def test_first_step_moves_by_lr(self):
        w = Tensor([0.0], requires_grad=True)
        w.grad = np.array([1.0])
        state = AdamState(learning_rate=0.1)
        adam_step([w], state)
        assert abs(w.data[0] + 0.1) < 1e-6
        assert w.grad is None
        assert state.step == 1

    def test_zero_grad_leaves_parameter(self):
        w = Tensor([1.5, -2.0], requires_grad=True)
        w.zero_grad()
        adam_step([w], AdamState(learning_rate=0.1))
        np.testing.assert_array_equal(w.data, [1.5, -2.0])

    def test_converges_on_quadratic(self):
        w = Tensor([0.0], requires_grad=True)
        state = AdamState(learning_rate=0.1)
        for step in range(100):
            with Tape() as tape:
                loss = ((w - 3.0) * (w - 3.0)).sum()
            backward(loss, tape)
            adam_step([w], state)
            assert state.step == step + 1
        assert abs(w.data[0] - 3.0) < 0.1

    def test_missing_grad(self):
        with pytest.raises(ContractError):
            adam_step([Tensor([1.0], requires_grad=True)], AdamState())

    def test_moment_shapes_match(self):
        ws = [Tensor(np.zeros((2, 3)), requires_grad=True), Tensor(np.zeros(4), requires_grad=True)]
        for w in ws:
            w.grad = np.ones_like(w.data)
        state = AdamState()
        adam_step(ws, state)
        assert [m.shape for m in state.first_moment] == [(2, 3), (4,)]
        assert [v.shape for v in state.second_moment] == [(2, 3), (4,)]


def test_tensor_invariants():
    t = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    assert int(np.prod(t.shape)) == t.values.size
    t.zero_grad()
    assert t.grad.size == t.values.size
