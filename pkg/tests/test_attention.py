import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnroute import attention as A
from attnroute.errors import ContractError, ShapeError
from attnroute.tensor import Tensor, backward, finite_diff_check, tsum


def dense_masked_oracle(q, k, v, visible):
    """Reference: per-query softmax over the visible key set, plain loops."""
    s, h, d = q.shape
    out = np.zeros_like(q)
    for hi in range(h):
        for qi in range(s):
            keys = np.flatnonzero(visible[qi])
            logits = q[qi, hi] @ k[keys, hi].T / np.sqrt(d)
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[qi, hi] = w @ v[keys, hi]
    return out


def rand_qkv(rng, s, h, d, dtype=np.float64):
    q = rng.normal(size=(s, h, d)).astype(dtype)
    k = rng.normal(size=(s, h, d)).astype(dtype)
    v = rng.normal(size=(s, h, d)).astype(dtype)
    return q, k, v


class TestFullAttention:
    def test_single_token_returns_value(self):
        rng = np.random.default_rng(0)
        q, k, v = rand_qkv(rng, 1, 2, 4)
        out = A.full_attention(Tensor(q), Tensor(k), Tensor(v)).data
        assert np.abs(out - v).max() <= 1e-12

    def test_equal_logits_average_prefix_values(self):
        # zero queries make every logit equal, so row i averages V[0..i]
        rng = np.random.default_rng(1)
        s, h, d = 3, 2, 4
        q = np.zeros((s, h, d))
        k = rng.normal(size=(s, h, d))
        v = rng.normal(size=(s, h, d))
        out = A.full_attention(Tensor(q), Tensor(k), Tensor(v)).data
        for i in range(s):
            assert np.abs(out[i] - v[: i + 1].mean(axis=0)).max() <= 1e-12

    def test_random_matches_dense_oracle(self):
        rng = np.random.default_rng(2)
        q, k, v = rand_qkv(rng, 7, 2, 4)
        out = A.full_attention(Tensor(q), Tensor(k), Tensor(v)).data
        causal = np.tril(np.ones((7, 7), bool))
        assert np.abs(out - dense_masked_oracle(q, k, v, causal)).max() <= 1e-6

    def test_causality(self):
        rng = np.random.default_rng(3)
        q, k, v = rand_qkv(rng, 8, 2, 4)
        out = A.full_attention(Tensor(q), Tensor(k), Tensor(v)).data
        k2, v2 = k.copy(), v.copy()
        k2[5:] = rng.normal(size=k2[5:].shape)
        v2[5:] = rng.normal(size=v2[5:].shape)
        out2 = A.full_attention(Tensor(q), Tensor(k2), Tensor(v2)).data
        assert np.abs(out[:5] - out2[:5]).max() <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            A.full_attention(
                Tensor(np.zeros((4, 2, 3))), Tensor(np.zeros((4, 2, 4))), Tensor(np.zeros((4, 2, 4)))
            )

    def test_batched_matches_unbatched(self):
        rng = np.random.default_rng(4)
        qs, ks, vs = [], [], []
        for _ in range(3):
            q, k, v = rand_qkv(rng, 5, 2, 4)
            qs.append(q), ks.append(k), vs.append(v)
        batched = A.full_attention(
            Tensor(np.stack(qs)), Tensor(np.stack(ks)), Tensor(np.stack(vs))
        ).data
        for i in range(3):
            single = A.full_attention(Tensor(qs[i]), Tensor(ks[i]), Tensor(vs[i])).data
            assert np.abs(batched[i] - single).max() <= 1e-12

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(5)
        q, k, v = rand_qkv(rng, 4, 1, 3)
        tq, tk, tv = Tensor(q, True), Tensor(k, True), Tensor(v, True)

        def loss():
            out = A.full_attention(tq, tk, tv)
            return tsum(out * out)

        rep = finite_diff_check(loss, [tq, tk, tv], tol=1e-6)
        assert rep.passed, rep


class TestSsaPattern:
    def test_examples(self):
        p = A.make_ssa_pattern(4, sink=0, local=2)
        assert list(p.visible(3)) == [2, 3]
        p = A.make_ssa_pattern(10, sink=2, local=3)
        assert list(p.visible(7)) == [0, 1, 5, 6, 7]

    def test_degenerate_covers_full_causal(self):
        p = A.make_ssa_pattern(6, sink=3, local=3)
        assert p.is_full_causal()
        full = A.make_full_pattern(6)
        assert np.array_equal(p.mask(), full.mask())

    @settings(max_examples=60, deadline=None)
    @given(
        s=st.integers(1, 24), sink=st.integers(0, 6), local=st.integers(1, 8), q=st.integers(0, 23)
    )
    def test_visible_set_matches_definition(self, s, sink, local, q):
        if q >= s:
            q = s - 1
        p = A.make_ssa_pattern(s, sink, local)
        want = sorted(set(range(min(sink, q + 1))) | set(range(max(0, q - local + 1), q + 1)))
        assert list(p.visible(q)) == want
        assert len(p.visible(q)) <= sink + local
        assert q in p.visible(q)

    def test_mode_validation(self):
        with pytest.raises(ContractError):
            A.SSA(sink=-1, local=4)
        with pytest.raises(ContractError):
            A.SSA(sink=0, local=0)


class TestSparseAttention:
    def test_full_pattern_equals_full_attention(self):
        rng = np.random.default_rng(6)
        q, k, v = rand_qkv(rng, 9, 2, 4)
        p = A.make_full_pattern(9)
        dense = A.full_attention(Tensor(q), Tensor(k), Tensor(v)).data
        sparse = A.sparse_attention(Tensor(q), Tensor(k), Tensor(v), p).data
        assert np.abs(dense - sparse).max() <= 1e-12

    def test_self_only_pattern_returns_values(self):
        rng = np.random.default_rng(7)
        q, k, v = rand_qkv(rng, 6, 2, 4)
        p = A.make_ssa_pattern(6, sink=0, local=1)
        out = A.sparse_attention(Tensor(q), Tensor(k), Tensor(v), p).data
        assert np.abs(out - v).max() <= 1e-12

    def test_ssa_matches_masked_oracle(self):
        rng = np.random.default_rng(8)
        q, k, v = rand_qkv(rng, 16, 2, 4)
        p = A.make_ssa_pattern(16, sink=2, local=4)
        out = A.sparse_attention(Tensor(q), Tensor(k), Tensor(v), p).data
        assert np.abs(out - dense_masked_oracle(q, k, v, p.mask())).max() <= 1e-12

    def test_block_pattern_matches_oracle(self):
        rng = np.random.default_rng(9)
        s, bs = 12, 4
        grid = np.tril(np.ones((3, 3), bool))
        grid[2, 0] = False
        p = A.make_block_pattern(s, bs, grid)
        q, k, v = rand_qkv(rng, s, 2, 4)
        out = A.sparse_attention(Tensor(q), Tensor(k), Tensor(v), p).data
        assert np.abs(out - dense_masked_oracle(q, k, v, p.mask())).max() <= 1e-12

    def test_block_grid_validation(self):
        bad = np.ones((3, 3), bool)  # upper triangle visible -> acausal
        with pytest.raises(ContractError):
            A.make_block_pattern(12, 4, bad)
        no_diag = np.tril(np.ones((3, 3), bool))
        no_diag[1, 1] = False
        with pytest.raises(ContractError):
            A.make_block_pattern(12, 4, no_diag)

    @settings(max_examples=25, deadline=None)
    @given(s=st.integers(2, 20), sink=st.integers(0, 4), local=st.integers(1, 6), seed=st.integers(0, 999))
    def test_pattern_equivalence_property(self, s, sink, local, seed):
        # sparse kernel == dense kernel with -inf style masking of invisible logits
        rng = np.random.default_rng(seed)
        q, k, v = rand_qkv(rng, s, 1, 4)
        p = A.make_ssa_pattern(s, sink, local)
        got = A.sparse_attention(Tensor(q), Tensor(k), Tensor(v), p).data
        assert np.abs(got - dense_masked_oracle(q, k, v, p.mask())).max() <= 1e-12

    def test_float32_equivalence_tolerance(self):
        rng = np.random.default_rng(10)
        q, k, v = rand_qkv(rng, 16, 2, 4, dtype=np.float32)
        p = A.make_ssa_pattern(16, sink=2, local=4)
        got = A.sparse_attention(Tensor(q), Tensor(k), Tensor(v), p).data
        want = dense_masked_oracle(q.astype(np.float64), k.astype(np.float64), v.astype(np.float64), p.mask())
        assert np.abs(got - want).max() <= 1e-6


class TestDecodeAttention:
    def test_single_cached_token(self):
        rng = np.random.default_rng(11)
        q = rng.normal(size=(2, 4))
        k = rng.normal(size=(2, 1, 4))
        v = rng.normal(size=(2, 1, 4))
        out = A.decode_attention(q, k, v)
        assert np.abs(out - v[:, 0]).max() <= 1e-12

    def test_empty_cache_rejected(self):
        with pytest.raises(ContractError):
            A.decode_attention(np.zeros((2, 4)), np.zeros((2, 0, 4)), np.zeros((2, 0, 4)))

    def test_matches_dense_oracle_over_visible_set(self):
        rng = np.random.default_rng(12)
        s, h, d = 64, 2, 4
        q, k, v = rand_qkv(rng, s, h, d)
        p = A.make_ssa_pattern(s, sink=4, local=8)
        vis = p.visible(s - 1)
        # cache layout is heads-first
        ck = k[vis].transpose(1, 0, 2).copy()
        cv = v[vis].transpose(1, 0, 2).copy()
        out = A.decode_attention(q[s - 1], ck, cv)
        want = dense_masked_oracle(q, k, v, p.mask())[s - 1]
        assert np.abs(out - want).max() <= 1e-12

    def test_windowed_vs_full_storage_identical(self):
        # same visible set, different storage -> same output
        rng = np.random.default_rng(13)
        s, h, d = 32, 2, 4
        q, k, v = rand_qkv(rng, s, h, d)
        p = A.make_ssa_pattern(s, sink=2, local=6)
        vis = p.visible(s - 1)
        full_k = k.transpose(1, 0, 2).copy()
        full_v = v.transpose(1, 0, 2).copy()
        out_full = A.decode_attention(q[s - 1], full_k[:, vis], full_v[:, vis])
        out_win = A.decode_attention(
            q[s - 1], full_k[:, vis].copy(), full_v[:, vis].copy()
        )
        assert np.abs(out_full - out_win).max() <= 1e-6
