import numpy as np
import pytest

from speclab import tensor as tn
from speclab.attention import (
    DegenerateRowError,
    MaskStateError,
    TTTState,
    causal_mask,
    dense_masked_attention,
    multihead_attention,
    streaming_attention,
    tree_decode_attention,
    ttt_attention_step,
    ttt_dense_reference,
)
from speclab.blockmask import MaskParams, build_blockmask, expand_dense
from speclab.tensor import Category, Tensor

from conftest import numeric_grad, rel_err


def _rand(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


def _row_softmax_oracle(q, k, v, allow):
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        idx = np.nonzero(allow[i])[0]
        s = k[idx].astype(np.float64) @ q[i] / np.sqrt(q.shape[1])
        w = np.exp(s - s.max())
        out[i] = (w / w.sum()) @ v[idx]
    return out


class TestDense:
    def test_single_key(self):
        v = np.array([[2.0, -1.0]], np.float32)
        out = dense_masked_attention(Tensor([[1.0, 0.0]]), Tensor([[0.3, 0.4]]), Tensor(v), [[True]])
        np.testing.assert_allclose(out.data, v, atol=1e-7)

    def test_uniform_logits_average(self, rng):
        v = _rand(rng, 5, 3)
        allow = np.array([[1, 0, 1, 1, 0]], bool)
        out = dense_masked_attention(Tensor(np.zeros((1, 4))), Tensor(_rand(rng, 5, 4)), Tensor(v), allow)
        np.testing.assert_allclose(out.data[0], v[[0, 2, 3]].mean(axis=0), atol=1e-6)

    def test_causal_per_row(self, rng):
        q, k, v = _rand(rng, 8, 4), _rand(rng, 8, 4), _rand(rng, 8, 3)
        out = dense_masked_attention(Tensor(q), Tensor(k), Tensor(v), causal_mask(8))
        np.testing.assert_allclose(out.data, _row_softmax_oracle(q, k, v, causal_mask(8)), atol=1e-6)

    def test_degenerate_row(self, rng):
        allow = causal_mask(3)
        allow[1] = False
        with pytest.raises(DegenerateRowError):
            dense_masked_attention(Tensor(_rand(rng, 3, 2)), Tensor(_rand(rng, 3, 2)), Tensor(_rand(rng, 3, 2)), allow)

    def test_convex_combination(self, rng):
        q, k, v = _rand(rng, 6, 4) * 5, _rand(rng, 9, 4), _rand(rng, 9, 3)
        allow = rng.random((6, 9)) < 0.5
        allow[:, 0] = True
        out = dense_masked_attention(Tensor(q), Tensor(k), Tensor(v), allow).data
        for i in range(6):
            vals = v[allow[i]]
            assert np.all(out[i] >= vals.min(axis=0) - 1e-6) and np.all(out[i] <= vals.max(axis=0) + 1e-6)

    def test_masked_positions_inert(self, rng):
        q, k, v = _rand(rng, 4, 4), _rand(rng, 8, 4), _rand(rng, 8, 2)
        allow = np.zeros((4, 8), bool)
        allow[:, :5] = True
        k2, v2 = k.copy(), v.copy()
        perm = 5 + rng.permutation(3)
        k2[5:], v2[5:] = k[perm], v[perm]
        a = dense_masked_attention(Tensor(q), Tensor(k), Tensor(v), allow).data
        b = dense_masked_attention(Tensor(q), Tensor(k2), Tensor(v2), allow).data
        assert a.tobytes() == b.tobytes()

    def test_multihead_is_per_head(self, rng):
        q, k, v = _rand(rng, 6, 8), _rand(rng, 6, 8), _rand(rng, 6, 8)
        out = multihead_attention(Tensor(q), Tensor(k), Tensor(v), 2, causal_mask(6)).data
        for h in range(2):
            s = np.s_[:, 4 * h : 4 * h + 4]
            ref = dense_masked_attention(Tensor(q[s]), Tensor(k[s]), Tensor(v[s]), causal_mask(6)).data
            np.testing.assert_allclose(out[s], ref, atol=1e-6)


class TestStreaming:
    def test_causal_step_zero(self, rng):
        q, k, v = _rand(rng, 16, 8), _rand(rng, 16, 8), _rand(rng, 16, 4)
        out = streaming_attention(Tensor(q), Tensor(k), Tensor(v), build_blockmask(MaskParams(16, 16, 0, 4)))
        np.testing.assert_allclose(out.data, _row_softmax_oracle(q, k, v, causal_mask(16)), atol=1e-5)

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_dense_q32_step3(self, seed):
        rng = np.random.default_rng(seed)
        p = MaskParams(32, int(rng.integers(1, 33)), 3, int(rng.choice([4, 8, 16])))
        m = build_blockmask(p)
        q, k, v = _rand(rng, 32, 8), _rand(rng, p.kv_len, 8), _rand(rng, p.kv_len, 8)
        a = streaming_attention(Tensor(q), Tensor(k), Tensor(v), m).data
        b = dense_masked_attention(Tensor(q), Tensor(k), Tensor(v), expand_dense(m).astype(bool)).data
        assert np.abs(a - b).max() <= 1e-5

    @pytest.mark.parametrize("seed", range(6))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        p = MaskParams(8, int(rng.integers(2, 9)), int(rng.integers(0, 3)), 4)
        m = build_blockmask(p)
        arrs = [_rand(rng, 8, 4), _rand(rng, p.kv_len, 4), _rand(rng, p.kv_len, 3)]
        w = rng.standard_normal((8, 3))

        def f(i, x):
            a = [Tensor(x if j == i else arrs[j]) for j in range(3)]
            with tn.no_grad():
                return float((streaming_attention(*a, m).data * w).sum())

        ts = [Tensor.parameter(a) for a in arrs]
        streaming_attention(*ts, m).backward(w.astype(np.float32))
        for i in range(3):
            assert rel_err(ts[i].grad, numeric_grad(lambda x: f(i, x), arrs[i])) < 1e-2

    def test_gradients_match_dense(self, rng):
        p = MaskParams(16, 13, 2, 4)
        m = build_blockmask(p)
        arrs = [_rand(rng, 16, 8), _rand(rng, p.kv_len, 8), _rand(rng, p.kv_len, 8)]
        g = _rand(rng, 16, 8)
        s = [Tensor.parameter(a) for a in arrs]
        d = [Tensor.parameter(a) for a in arrs]
        streaming_attention(*s, m).backward(g)
        dense_masked_attention(*d, expand_dense(m).astype(bool)).backward(g)
        for a, b in zip(s, d):
            assert np.abs(a.grad - b.grad).max() < 1e-5

    def test_scratch_linear_vs_quadratic(self, rng):
        stream, dense = [], []
        for L in (256, 512, 1024):
            m = build_blockmask(MaskParams(L, L, 0, 16))
            q = Tensor(_rand(rng, L, 8))
            with tn.no_grad():
                stream.append(tn.meter_scope(Category.SCRATCH, lambda: streaming_attention(q, q, q, m)))
                dense.append(tn.meter_scope(Category.SCRATCH, lambda: dense_masked_attention(q, q, q, causal_mask(L))))
        for i in (1, 2):
            assert stream[i] / stream[i - 1] < 2.5
            assert dense[i] / dense[i - 1] > 3.5

    def test_shape_checked(self, rng):
        m = build_blockmask(MaskParams(8, 8, 1, 4))
        with pytest.raises(tn.DimensionError):
            streaming_attention(Tensor(_rand(rng, 8, 4)), Tensor(_rand(rng, 8, 4)), Tensor(_rand(rng, 8, 4)), m)


def _ttt_unroll(qs, ks, vs, seq_len, block=4):
    """Run len(qs) TTT steps; return outputs and the masks used."""
    state = TTTState()
    outs, masks = [], []
    for j, (q, k, v) in enumerate(zip(qs, ks, vs)):
        m = build_blockmask(MaskParams(q.shape[0], seq_len, j, block))
        outs.append(ttt_attention_step(state, q, k, v, m))
        masks.append(m)
    return outs, masks


class TestTTT:
    def test_step_zero_is_causal(self, rng):
        q, k, v = _rand(rng, 8, 4), _rand(rng, 8, 4), _rand(rng, 8, 4)
        outs, _ = _ttt_unroll([Tensor(q)], [Tensor(k)], [Tensor(v)], 8)
        np.testing.assert_allclose(outs[0].data, _row_softmax_oracle(q, k, v, causal_mask(8)), atol=1e-6)

    def test_state_grows(self, rng):
        qs = [Tensor(_rand(rng, 8, 4)) for _ in range(3)]
        state = TTTState()
        for j in range(3):
            ttt_attention_step(state, qs[j], qs[j], qs[j], build_blockmask(MaskParams(8, 6, j, 4)))
        assert state.cached_steps == 3 and len(state.step_k) == 2

    def test_step_mismatch(self, rng):
        x = Tensor(_rand(rng, 8, 4))
        with pytest.raises(MaskStateError):
            ttt_attention_step(TTTState(), x, x, x, build_blockmask(MaskParams(8, 8, 1, 4)))

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_dense_and_streaming(self, seed):
        rng = np.random.default_rng(seed)
        Q, d = 16, 8
        T = int(rng.integers(1, Q + 1))
        qs, ks, vs = ([Tensor(_rand(rng, Q, d)) for _ in range(3)] for _ in range(3))
        outs, masks = _ttt_unroll(qs, ks, vs, T)
        for j in range(3):
            ref = ttt_dense_reference(qs[j], ks[: j + 1], vs[: j + 1], masks[j]).data
            st = streaming_attention(qs[j], tn.concat_rows(*ks[: j + 1]), tn.concat_rows(*vs[: j + 1]), masks[j]).data
            assert np.abs(outs[j].data - ref)[:T].max() <= 1e-5
            assert np.abs(st - ref).max() <= 1e-5

    def test_batched_matches_rows(self, rng):
        B, Q, d = 3, 8, 4
        lens = [8, 5, 2]
        qs, ks, vs = ([_rand(rng, B, Q, d) for _ in range(2)] for _ in range(3))
        state = TTTState()
        outs = []
        for j in range(2):
            masks = [MaskParams(Q, t, j, 4) for t in lens]
            outs.append(ttt_attention_step(state, Tensor(qs[j]), Tensor(ks[j]), Tensor(vs[j]), masks).data)
        for b, t in enumerate(lens):
            single, _ = _ttt_unroll(*([Tensor(x[j][b]) for j in range(2)] for x in (qs, ks, vs)), t)
            for j in range(2):
                np.testing.assert_allclose(outs[j][b, :t], single[j].data[:t], atol=1e-6)

    def test_gradients_three_steps(self, rng):
        Q, d, T = 8, 4, 6
        arrs = [_rand(rng, Q, d) for _ in range(9)]
        w = rng.standard_normal((Q, d))

        def run(tensors):
            outs, _ = _ttt_unroll(tensors[0:3], tensors[3:6], tensors[6:9], T)
            return outs

        def f(i, x):
            with tn.no_grad():
                outs = run([Tensor(x if j == i else arrs[j]) for j in range(9)])
            return float(sum((o.data[:T] * w[:T]).sum() for o in outs))

        ts = [Tensor.parameter(a) for a in arrs]
        seed = np.zeros((Q, d), np.float32)
        seed[:T] = w[:T]
        tn.backward_many([(o, seed) for o in run(ts)])
        for i in range(9):
            assert rel_err(ts[i].grad, numeric_grad(lambda x: f(i, x), arrs[i])) < 1e-2


class TestTreeDecode:
    def test_matches_dense_per_node(self, rng):
        n, L, j, d = 3, 5, 2, 4
        q, pk, pv = _rand(rng, n, d), _rand(rng, L, d), _rand(rng, L, d)
        ck, cv = _rand(rng, n, j, d), _rand(rng, n, j, d)
        out = tree_decode_attention(q, pk, pv, ck, cv)
        for i in range(n):
            k = np.concatenate([pk, ck[i]])
            v = np.concatenate([pv, cv[i]])
            ref = dense_masked_attention(Tensor(q[i : i + 1]), Tensor(k), Tensor(v), np.ones((1, L + j), bool)).data
            np.testing.assert_allclose(out[i], ref[0], atol=1e-6)
