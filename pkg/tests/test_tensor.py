import numpy as np
import pytest

from speclab import tensor as tn
from speclab.tensor import Category, DimensionError, Tensor

from conftest import numeric_grad, rel_err


def _grad_of(op, *arrays):
    ts = [Tensor.parameter(a) for a in arrays]
    tn.sum(op(*ts)).backward()
    return [t.grad for t in ts]


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        assert np.array_equal(tn.matmul(eye, eye).data, np.eye(2))

    def test_hand_product(self):
        out = tn.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[0], [1]]))
        assert out.data.tolist() == [[2.0], [4.0]]

    def test_grad_is_ones_times_b_transposed(self, rng):
        a = rng.standard_normal((3, 4)).astype(np.float32)
        b = rng.standard_normal((4, 5)).astype(np.float32)
        ga, _ = _grad_of(tn.matmul, a, b)
        np.testing.assert_allclose(ga, np.ones((3, 5)) @ b.T, rtol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_left_operand(self, rng):
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((4, 5))
        np.testing.assert_allclose(tn.matmul(Tensor(a), Tensor(b)).data, a @ b, rtol=1e-5)


class TestSoftmax:
    def test_symmetric(self):
        assert tn.softmax(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]

    def test_no_overflow(self):
        out = tn.softmax(Tensor([1000.0, 0.0])).data
        assert abs(out[0] - 1.0) <= 1e-7 and out[1] == 0.0

    def test_log_weights(self):
        out = tn.softmax(Tensor(np.log([1.0, 2.0, 3.0]))).data
        np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-7)

    def test_rows_sum_to_one_at_large_magnitude(self, rng):
        x = rng.uniform(-1e4, 1e4, size=(50, 17))
        np.testing.assert_allclose(tn.softmax(Tensor(x)).data.sum(axis=1), 1.0, atol=1e-6)

    def test_empty_axis(self):
        with pytest.raises(DimensionError):
            tn.softmax(Tensor(np.zeros((3, 0))))

    def test_sum_of_softmax_has_zero_grad(self, rng):
        (g,) = _grad_of(tn.softmax, rng.standard_normal(6).astype(np.float32))
        np.testing.assert_allclose(g, 0.0, atol=1e-7)


class TestElementwise:
    def test_rms_norm_constant(self):
        out = tn.rms_norm(Tensor(np.full(8, 3.5)), Tensor(np.ones(8)))
        np.testing.assert_allclose(out.data, 1.0, atol=1e-6)

    def test_concat_rows(self):
        assert tn.concat_rows(Tensor([1, 2]), Tensor([3])).data.tolist() == [1, 2, 3]

    def test_silu_zero(self):
        assert tn.silu(Tensor([0.0])).data[0] == 0.0

    def test_embedding_out_of_range(self):
        with pytest.raises(IndexError):
            tn.embedding_lookup(Tensor(np.ones((4, 2))), [4])

    def test_slice_out_of_range(self):
        with pytest.raises(IndexError):
            tn.slice(Tensor(np.ones(4)), 2, 5)

    def test_embedding_scatters_repeated_rows(self):
        table = Tensor.parameter(np.zeros((3, 2)))
        tn.sum(tn.embedding_lookup(table, [1, 1, 2])).backward()
        assert table.grad.tolist() == [[0, 0], [2, 2], [1, 1]]

    def test_product_rule(self):
        x, y = Tensor.parameter([2.0]), Tensor.parameter([3.0])
        tn.sum(tn.mul(x, y)).backward()
        assert x.grad[0] == 3.0 and y.grad[0] == 2.0


OPS = {
    "add": (lambda a, b: tn.add(a, b), 2),
    "mul": (lambda a, b: tn.mul(a, b), 2),
    "div": (lambda a, b: tn.div(a, tn.add(tn.mul(b, b), Tensor(np.ones(b.shape)))), 2),
    "matmul": (lambda a, b: tn.matmul(a, tn.transpose(b)), 2),
    "softmax": (lambda a: tn.mul(tn.softmax(a), a), 1),
    "silu": (lambda a: tn.silu(a), 1),
    "exp": (lambda a: tn.exp(tn.scale(a, 0.5)), 1),
    "log": (lambda a: tn.log(tn.add(tn.mul(a, a), Tensor(np.ones(a.shape)))), 1),
    "rms_norm": (lambda a, w: tn.mul(tn.rms_norm(a, tn.reshape(tn.slice(w, 0, 1, axis=0), (-1,))), a), 2),
    "concat_cols": (lambda a, b: tn.mul(tn.concat_cols(a, b), tn.concat_cols(b, a)), 2),
    "slice": (lambda a: tn.mul(tn.slice(a, 1, a.shape[0], axis=0), tn.slice(a, 0, a.shape[0] - 1, axis=0)), 1),
    "reshape": (lambda a: tn.mul(tn.reshape(a, (-1,)), tn.reshape(a, (-1,))), 1),
    "sum_axis": (lambda a: tn.mul(tn.sum(a, axis=1, keepdims=True), a), 1),
}


class TestFiniteDifferences:
    """Every differentiable op vs central differences on random small shapes."""

    @pytest.mark.parametrize("case", range(100))
    def test_random_op(self, case):
        rng = np.random.default_rng(case)
        name = sorted(OPS)[case % len(OPS)]
        op, arity = OPS[name]
        rows = int(rng.integers(2, 5))
        cols = int(rng.integers(2, 5))
        arrays = [rng.standard_normal((rows, cols)).astype(np.float32) for _ in range(arity)]
        weights = rng.standard_normal(op(*[Tensor(a) for a in arrays]).shape)

        def f(*arrs):
            with tn.no_grad():
                return float((op(*[Tensor(a) for a in arrs]).data.astype(np.float64) * weights).sum())

        ts = [Tensor.parameter(a) for a in arrays]
        out = op(*ts)
        out.backward(weights.astype(np.float32))
        for i, t in enumerate(ts):
            num = numeric_grad(lambda x: f(*[x if j == i else arrays[j] for j in range(arity)]), arrays[i])
            assert rel_err(t.grad, num) < 1e-2, name

    def test_composed_graph(self, rng):
        x0 = rng.standard_normal((3, 4)).astype(np.float32)
        w0 = rng.standard_normal((4, 4)).astype(np.float32)

        def graph(x, w):
            h = tn.silu(tn.matmul(x, w))
            return tn.sum(tn.mul(tn.softmax(h), h))

        x, w = Tensor.parameter(x0), Tensor.parameter(w0)
        graph(x, w).backward()
        num = numeric_grad(lambda a: graph(Tensor(a), Tensor(w0)).item(), x0)
        assert rel_err(x.grad, num) < 1e-2


class TestBackward:
    def test_non_scalar_root(self):
        with pytest.raises(DimensionError):
            Tensor.parameter(np.ones(3)).backward()

    def test_grad_only_on_requires_grad(self):
        a = Tensor.parameter(np.ones(2))
        b = Tensor(np.ones(2))
        tn.sum(tn.mul(a, b)).backward()
        assert a.grad is not None and b.grad is None

    def test_no_grad_records_nothing(self):
        a = Tensor.parameter(np.ones(2))
        with tn.no_grad():
            out = tn.mul(a, a)
        assert not out.requires_grad

    def test_shared_subgraph_accumulates(self):
        x = Tensor.parameter([3.0])
        y = tn.mul(x, x)
        tn.backward_many([(y, np.ones(1, np.float32)), (tn.scale(y, 2.0), np.ones(1, np.float32))])
        assert x.grad[0] == pytest.approx(18.0)

    def test_deterministic(self, rng):
        a0 = rng.standard_normal((5, 5)).astype(np.float32)
        grads = []
        for _ in range(2):
            a = Tensor.parameter(a0)
            tn.sum(tn.softmax(tn.matmul(a, a))).backward()
            grads.append(a.grad.tobytes())
        assert grads[0] == grads[1]


class TestMeter:
    def test_empty_body(self):
        assert tn.meter_scope(Category.SCRATCH, lambda: None) == 0

    def test_one_scratch_tensor(self):
        def body():
            Tensor(np.zeros((4, 4)), category=Category.SCRATCH)

        assert tn.meter_scope(Category.SCRATCH, body) == 64

    def test_nested_scopes_feed_outer(self):
        meter = tn.get_meter()
        with tn.measure(Category.SCRATCH) as outer:
            with tn.measure(Category.SCRATCH) as inner:
                with meter.track(Category.SCRATCH, 100):
                    pass
            with meter.track(Category.SCRATCH, 40):
                pass
        assert inner.peak == 100 and outer.peak == 100

    def test_peak_at_least_current(self):
        m = tn.AllocationMeter()
        m.alloc(Category.ACTIVATION, 10)
        m.alloc(Category.ACTIVATION, 5)
        m.free(Category.ACTIVATION, 12)
        assert m.peak[Category.ACTIVATION] == 15 >= m.current[Category.ACTIVATION] == 3
        m.reset()
        assert m.peak[Category.ACTIVATION] == 3

    def test_dense_logits_counted(self, rng):
        from speclab.attention import causal_mask, dense_masked_attention

        q = Tensor(rng.standard_normal((512, 8)))
        with tn.no_grad():
            peak = tn.meter_scope(Category.SCRATCH, lambda: dense_masked_attention(q, q, q, causal_mask(512)))
        assert peak >= 512 * 512 * 4
