"""Predictor tests: low-rank queries, approximate scores, group selection."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvspill.compress import ProjectionMatrix, fit_projection
from kvspill.errors import ParameterError
from kvspill.predictor import HeadMap, approx_scores, low_rank_queries, select_groups

from oracles import brute_force_select


def orthonormal(joint, r, seed=0):
    q = np.linalg.qr(np.random.default_rng(seed).standard_normal((joint, joint)))[0]
    return ProjectionMatrix(a=q[:, :r], sigma=joint / r)


class TestHeadMap:
    def test_block_assignment(self):
        hm = HeadMap(h_q=8, h_kv=2)
        assert [hm.kv_head(h) for h in range(8)] == [0, 0, 0, 0, 1, 1, 1, 1]

    def test_indivisible_rejected(self):
        with pytest.raises(ParameterError):
            HeadMap(h_q=6, h_kv=4)


class TestLowRankQueries:
    def test_identity_projection_returns_raw_query(self):
        rng = np.random.default_rng(1)
        d, dm = 4, 6
        w = rng.standard_normal((1, dm, d))
        x = rng.standard_normal(dm)
        proj = ProjectionMatrix(a=np.eye(d), sigma=1.0)
        out = low_rank_queries(x, w, proj, HeadMap(1, 1))
        assert np.allclose(out[0], x @ w[0])

    def test_zero_input_gives_zero_queries(self):
        w = np.random.default_rng(2).standard_normal((2, 6, 4))
        proj = orthonormal(4, 2, seed=3)
        out = low_rank_queries(np.zeros(6), w, proj, HeadMap(2, 1))
        assert np.array_equal(out, np.zeros((2, 2)))

    def test_matches_straight_line_reference(self):
        # two query heads sharing one KV head, everything fixed-seed
        rng = np.random.default_rng(4)
        d, dm, r = 4, 6, 3
        w = rng.standard_normal((2, dm, d))
        x = rng.standard_normal(dm)
        proj = orthonormal(d, r, seed=5)  # h_kv=1 so joint dim == d
        out = low_rank_queries(x, w, proj, HeadMap(2, 1))
        for h in range(2):
            q_h = np.array([sum(x[i] * w[h, i, e] for i in range(dm)) for e in range(d)])
            expect = np.array([sum(q_h[e] * proj.a[e, j] for e in range(d)) for j in range(r)])
            assert np.allclose(out[h], expect)

    def test_each_head_uses_its_kv_heads_slice(self):
        rng = np.random.default_rng(6)
        d, dm, h_kv = 3, 5, 2
        w = rng.standard_normal((4, dm, d))
        proj = orthonormal(h_kv * d, 2, seed=7)
        x = rng.standard_normal(dm)
        out = low_rank_queries(x, w, proj, HeadMap(4, 2))
        for h in range(4):
            block = proj.head_slice(h // 2, d)
            assert np.allclose(out[h], (x @ w[h]) @ block)

    def test_dimension_mismatch_rejected(self):
        w = np.zeros((2, 6, 4))
        proj = orthonormal(4, 2, seed=8)
        with pytest.raises(ParameterError):
            low_rank_queries(np.zeros(5), w, proj, HeadMap(2, 1))


class TestApproxScores:
    def test_one_hot_keys_select_components(self):
        q = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        k = np.eye(3)
        scores = approx_scores(q, k)
        assert np.array_equal(scores, q)

    def test_zero_queries_zero_scores(self):
        k = np.random.default_rng(9).standard_normal((7, 3))
        assert np.array_equal(approx_scores(np.zeros((2, 3)), k), np.zeros((2, 7)))

    def test_full_rank_projection_recovers_exact_scores(self):
        # sigma=1 basis fitted on the actual keys: scores in the projected
        # space equal the raw query-key products
        rng = np.random.default_rng(10)
        n, h_kv, d, h_q = 24, 2, 4, 4
        k = rng.standard_normal((n, h_kv, d))
        flat = k.reshape(n, h_kv * d)
        proj = fit_projection(flat, sigma=1)
        hm = HeadMap(h_q, h_kv)
        q = rng.standard_normal((h_q, d))
        q_lr = np.stack([q[h] @ proj.head_slice(hm.kv_head(h), d) for h in range(h_q)])
        approx = approx_scores(q_lr, flat @ proj.a)
        exact = np.stack([k[:, hm.kv_head(h), :] @ q[h] for h in range(h_q)])
        rel = np.linalg.norm(approx - exact) / np.linalg.norm(exact)
        assert rel < 1e-5


class TestSelectGroups:
    def test_worked_example(self):
        scores = np.array([[1.0, 0.0, 2.0, 5.0], [0.0, 1.0, 1.0, 1.0]])
        out = select_groups(scores, group_size=2, m=1)
        assert np.array_equal(out.token_scores, [1.0, 1.0, 3.0, 6.0])
        assert np.array_equal(out.group_scores, [1.0, 6.0])
        assert out.selected == [1]

    def test_exhaustive_selection(self):
        scores = np.random.default_rng(11).standard_normal((3, 9))
        out = select_groups(scores, group_size=1, m=9)
        assert out.selected == list(range(9))

    def test_fixed_seed_against_enumeration_oracle(self):
        rng = np.random.default_rng(12)
        scores = rng.standard_normal((4, 64))
        out = select_groups(scores, group_size=4, m=3)
        assert out.selected == brute_force_select(scores, 4, 3)

    def test_many_seeds_against_enumeration_oracle(self):
        for seed in range(25):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(5, 40))
            g = int(rng.integers(1, 6))
            heads = int(rng.integers(1, 5))
            n_groups = -(-n // g)
            m = int(rng.integers(1, n_groups + 1))
            scores = rng.standard_normal((heads, n))
            assert select_groups(scores, g, m).selected == brute_force_select(scores, g, m)

    def test_ties_break_toward_lower_index(self):
        scores = np.zeros((2, 8))
        assert select_groups(scores, group_size=2, m=2).selected == [0, 1]

    def test_m_larger_than_group_count_rejected(self):
        with pytest.raises(ParameterError):
            select_groups(np.zeros((1, 4)), group_size=2, m=3)

    def test_partial_trailing_group_counted(self):
        scores = np.array([[0.0, 0.0, 0.0, 0.0, 10.0]])
        out = select_groups(scores, group_size=2, m=1)
        assert len(out.group_scores) == 3
        assert out.selected == [2]

    @given(st.integers(0, 2**32 - 1), st.floats(0.001, 1000.0))
    @settings(max_examples=60, deadline=None)
    def test_invariant_under_positive_rescaling(self, seed, scale):
        rng = np.random.default_rng(seed)
        scores = rng.standard_normal((3, 24))
        base = select_groups(scores, 4, 3).selected
        assert select_groups(scores * scale, 4, 3).selected == base

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_selection_size_and_order(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 50))
        g = int(rng.integers(1, 8))
        n_groups = -(-n // g)
        m = int(rng.integers(0, n_groups + 1))
        sel = select_groups(rng.standard_normal((2, n)), g, m).selected
        assert len(sel) == min(m, n_groups)
        assert all(a < b for a, b in zip(sel, sel[1:]))
