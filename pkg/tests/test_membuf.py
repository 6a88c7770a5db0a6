"""Reuse buffer, rolling buffer, and mapping table tests."""

import numpy as np
import pytest

from kvspill.errors import ConfigurationError, ContractViolation, ParameterError
from kvspill.kvstore import DiskLayout, GroupId, GroupPayload
from kvspill.membuf import ReuseBuffer, RollingBuffer, build_mapping

from oracles import materialized_mapping

LAYOUT = DiskLayout(num_layers=2, h_kv=2, head_dim=4, group_size=3, elem_bytes=4)


def payload(gid, seed=None):
    rng = np.random.default_rng(seed if seed is not None else gid.layer * 1000 + gid.index)
    shape = (LAYOUT.group_size, LAYOUT.h_kv, LAYOUT.head_dim)
    raw = LAYOUT.encode_group(rng.standard_normal(shape), rng.standard_normal(shape))
    return GroupPayload(gid, raw)


def fill(buf, ids):
    res = buf.lookup_and_reserve(ids)
    for gid in res.misses:
        buf.insert_loaded(gid, res.reserved[gid], payload(gid))
    return res


class TestReuseBuffer:
    def test_cold_start_all_misses(self):
        buf = ReuseBuffer(4)
        res = buf.lookup_and_reserve([GroupId(0, 1), GroupId(0, 2)])
        assert res.hits == {} and len(res.misses) == 2 and len(res.reserved) == 2

    def test_fifo_evicts_oldest(self):
        buf = ReuseBuffer(2)
        fill(buf, [GroupId(0, 1)])
        fill(buf, [GroupId(0, 2)])
        res = fill(buf, [GroupId(0, 3)])
        assert res.misses == [GroupId(0, 3)]
        assert not buf.contains(GroupId(0, 1))  # oldest went first
        assert buf.contains(GroupId(0, 2))
        buf.audit()

    def test_repeat_selection_fully_hits(self):
        buf = ReuseBuffer(4)
        ids = [GroupId(0, 3), GroupId(0, 7), GroupId(1, 2)]
        fill(buf, ids)
        res = buf.lookup_and_reserve(ids)
        assert set(res.hits) == set(ids) and res.misses == []

    def test_current_step_hits_are_pinned(self):
        buf = ReuseBuffer(2)
        fill(buf, [GroupId(0, 1), GroupId(0, 2)])
        # g1 is a hit this step, so the miss must evict g2, not g1
        res = fill(buf, [GroupId(0, 1), GroupId(0, 9)])
        assert GroupId(0, 1) in res.hits
        assert buf.contains(GroupId(0, 1)) and buf.contains(GroupId(0, 9))
        assert not buf.contains(GroupId(0, 2))
        buf.audit()

    def test_selection_exceeding_capacity_is_configuration_error(self):
        buf = ReuseBuffer(2)
        with pytest.raises(ConfigurationError):
            buf.lookup_and_reserve([GroupId(0, i) for i in range(3)])

    def test_insert_without_reservation_is_contract_violation(self):
        buf = ReuseBuffer(2)
        with pytest.raises(ContractViolation):
            buf.insert_loaded(GroupId(0, 1), 0, payload(GroupId(0, 1)))

    def test_reinsert_after_eviction_is_fresh(self):
        buf = ReuseBuffer(2)
        fill(buf, [GroupId(0, 1)])
        fill(buf, [GroupId(0, 2)])
        fill(buf, [GroupId(0, 3)])  # evicts g1
        fill(buf, [GroupId(0, 1)])  # evicts g2, g1 newest again
        fill(buf, [GroupId(0, 4)])  # evicts g3 (oldest), keeps g1
        assert buf.contains(GroupId(0, 1))
        buf.audit()

    def test_insertion_order_tracked_up_to_capacity(self):
        buf = ReuseBuffer(5)
        ids = [GroupId(0, i) for i in (4, 1, 7)]
        for gid in ids:
            fill(buf, [gid])
        assert len(buf) == 3
        assert [buf._slot_gid[s] for s in buf._fifo] == ids

    def test_duplicate_ids_rejected(self):
        buf = ReuseBuffer(4)
        with pytest.raises(ParameterError):
            buf.lookup_and_reserve([GroupId(0, 1), GroupId(0, 1)])

    def test_fuzz_10k_operations_stay_consistent(self):
        # acceptance-level: randomized lookup/insert churn with periodic audit
        rng = np.random.default_rng(123)
        buf = ReuseBuffer(8)
        hits = requests = 0
        for op in range(10_000):
            n = int(rng.integers(1, 9))
            ids = [GroupId(int(rng.integers(0, 2)), int(j))
                   for j in rng.choice(24, size=n, replace=False)]
            ids = sorted(set(ids))
            res = buf.lookup_and_reserve(ids)
            requests += len(ids)
            hits += len(res.hits)
            for gid in res.misses:
                buf.insert_loaded(gid, res.reserved[gid], payload(gid))
            if op % 97 == 0:
                buf.audit()
        buf.audit()
        assert 0 < hits < requests


class TestRollingBuffer:
    def entry(self, seed):
        rng = np.random.default_rng(seed)
        return rng.standard_normal((2, 4)), rng.standard_normal((2, 4))

    def test_fills_then_flushes_at_group_size(self):
        rb = RollingBuffer(num_layers=1, group_size=4)
        for i in range(3):
            assert rb.append(0, *self.entry(i)) is None
        assert rb.length(0) == 3
        out = rb.append(0, *self.entry(3))
        assert out is not None
        k, v = out
        assert k.shape == (4, 2, 4)
        assert rb.length(0) == 0
        for i in range(4):
            ek, ev = self.entry(i)
            assert np.array_equal(k[i], ek) and np.array_equal(v[i], ev)

    def test_flushed_group_bytes_match_layout(self):
        rb = RollingBuffer(num_layers=1, group_size=3)
        out = None
        for i in range(3):
            rng = np.random.default_rng(i)
            out = rb.append(0, rng.standard_normal((2, 4)), rng.standard_normal((2, 4)))
        raw = LAYOUT.encode_group(*out)
        assert len(raw) == LAYOUT.group_byte_size

    def test_seed_with_remainder(self):
        rb = RollingBuffer(num_layers=2, group_size=4)
        rng = np.random.default_rng(9)
        rb.seed(1, rng.standard_normal((2, 2, 4)), rng.standard_normal((2, 2, 4)))
        assert rb.length(1) == 2 and rb.length(0) == 0
        with pytest.raises(ParameterError):
            rb.seed(0, rng.standard_normal((4, 2, 4)), rng.standard_normal((4, 2, 4)))


class TestBuildMapping:
    def _payloads(self, ids):
        return {gid: payload(gid) for gid in ids}

    def test_groups_only_ascending(self):
        ids = [GroupId(0, 2), GroupId(0, 7)]
        loaded = self._payloads(ids)
        table = build_mapping(ids, {}, loaded, np.empty(0), np.empty(0), LAYOUT)
        assert [seg.gid for seg in table.segments] == ids
        assert [seg.source for seg in table.segments] == ["staging", "staging"]
        assert table.n_tokens() == 2 * LAYOUT.group_size

    def test_rolling_only(self):
        rng = np.random.default_rng(3)
        rk, rv = rng.standard_normal((2, 2, 4)), rng.standard_normal((2, 2, 4))
        table = build_mapping([], {}, {}, rk, rv, LAYOUT)
        assert len(table.segments) == 1
        assert table.segments[0].source == "rolling"
        k, v = table.materialize()
        assert np.array_equal(k, rk) and np.array_equal(v, rv)

    def test_mixed_case_matches_copy_reference(self):
        ids = [GroupId(0, 5), GroupId(0, 1), GroupId(0, 3)]
        pay = self._payloads(ids)
        hits = {ids[1]: pay[ids[1]]}
        loaded = {ids[0]: pay[ids[0]], ids[2]: pay[ids[2]]}
        rng = np.random.default_rng(4)
        rk, rv = rng.standard_normal((2, 2, 4)), rng.standard_normal((2, 2, 4))
        table = build_mapping(ids, hits, loaded, rk, rv, LAYOUT)
        k, v = table.materialize()
        ref_k, ref_v = materialized_mapping(
            ids, {g: p.arrays(LAYOUT) for g, p in pay.items()}, rk, rv)
        assert np.array_equal(k, ref_k) and np.array_equal(v, ref_v)

    def test_no_payload_copies(self):
        ids = [GroupId(0, 1)]
        pay = self._payloads(ids)
        decoded_k, decoded_v = pay[ids[0]].arrays(LAYOUT)
        rng = np.random.default_rng(5)
        rk, rv = rng.standard_normal((1, 2, 4)), rng.standard_normal((1, 2, 4))
        table = build_mapping(ids, {}, pay, rk, rv, LAYOUT)
        assert table.segments[0].k is decoded_k
        assert table.segments[0].v is decoded_v
        assert np.shares_memory(table.segments[1].k, rk)

    def test_coverage_gap_rejected(self):
        ids = [GroupId(0, 1), GroupId(0, 2)]
        with pytest.raises(ContractViolation):
            build_mapping(ids, {}, self._payloads(ids[:1]), np.empty(0), np.empty(0), LAYOUT)

    def test_duplicate_coverage_rejected(self):
        ids = [GroupId(0, 1)]
        pay = self._payloads(ids)
        with pytest.raises(ContractViolation):
            build_mapping(ids, {ids[0]: pay[ids[0]]}, pay, np.empty(0), np.empty(0), LAYOUT)
