import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mae_ast.masking import (
    MaskError,
    MaskStrategy,
    SpanMaskCalibration,
    broadcast_mask,
    calibrate_span_p,
    clustering_stat,
    mask_frame_chunked,
    mask_patch_chunked,
    mask_random,
    target_count,
)


def assert_partition(plan, n):
    both = np.concatenate([plan.masked, plan.unmasked])
    assert sorted(both.tolist()) == list(range(n))
    assert np.all(np.diff(plan.masked) > 0) and np.all(np.diff(plan.unmasked) > 0)


class TestRandom:
    def test_496(self):
        plan = mask_random(496, 0.75, 0)
        assert (len(plan.masked), len(plan.unmasked)) == (372, 124)
        assert_partition(plan, 496)

    def test_enumerated_count(self):
        # round-half-up by enumeration over the integer grid
        for n in range(2, 60):
            for p in (0.25, 0.5, 0.75):
                expected = min(range(n + 1), key=lambda k: (abs(k - p * n), -k))
                assert target_count(n, p) == expected

    def test_two_tokens(self):
        plan = mask_random(2, 0.5, 3)
        assert len(plan.masked) == 1 and len(plan.unmasked) == 1

    def test_uniform_marginals(self):
        counts = np.zeros(4)
        trials = 100_000
        rng = np.random.default_rng(0)
        for _ in range(trials):
            counts[mask_random(4, 0.5, rng).masked] += 1
        assert np.all(np.abs(counts / trials - 0.5) < 0.01)

    def test_seeded(self):
        a, b = mask_random(100, 0.5, 42), mask_random(100, 0.5, 42)
        np.testing.assert_array_equal(a.masked, b.masked)

    @pytest.mark.parametrize("n, p", [(4, 0.0), (4, 1.0), (1, 0.5), (3, 0.1), (3, 0.9)])
    def test_degenerate(self, n, p):
        with pytest.raises(MaskError):
            mask_random(n, p, 0)


class TestPatchChunked:
    def test_exact_count_and_partition(self):
        plan = mask_patch_chunked(62, 8, 0.75, 0)
        assert len(plan.masked) == 372
        assert_partition(plan, 496)
        assert plan.strategy is MaskStrategy.PATCH_CHUNKED

    def test_deterministic(self):
        a, b = mask_patch_chunked(62, 8, 0.75, 9), mask_patch_chunked(62, 8, 0.75, 9)
        np.testing.assert_array_equal(a.masked, b.masked)

    def test_small_p_single_chunk(self):
        plan = mask_patch_chunked(62, 8, 0.01, 5)
        assert len(plan.masked) == target_count(496, 0.01) == 5
        grid = plan.bool_mask().reshape(62, 8)
        t, r = np.nonzero(grid)
        # everything lies inside one 5x5 window
        assert t.max() - t.min() < 5 and r.max() - r.min() < 5

    def test_clusters_more_than_random(self):
        chunk = [clustering_stat(mask_patch_chunked(62, 8, 0.5, s), 8) for s in range(200)]
        rand = [clustering_stat(mask_random(496, 0.5, s), 8) for s in range(200)]
        assert np.mean(chunk) > np.mean(rand) + 0.3

    def test_narrow_grid_falls_back(self, caplog):
        with caplog.at_level(logging.WARNING):
            plan = mask_patch_chunked(50, 2, 0.5, 0)
        assert len(plan.masked) == 50
        assert plan.notes and "random" in plan.notes[0]
        assert any("too small" in r.message for r in caplog.records)


class TestSpanCalibration:
    def test_closed_form(self):
        cal = calibrate_span_p(0.75, 10)
        assert cal.P == pytest.approx(1 - 0.25**0.1)
        assert cal.P == pytest.approx(0.12945, abs=5e-6)

    def test_limits(self):
        assert calibrate_span_p(1e-9, 10).P < 1e-9
        assert calibrate_span_p(0.3, 1).P == pytest.approx(0.3)

    def test_monte_carlo(self):
        cal = calibrate_span_p(0.75, 10)
        rng = np.random.default_rng(0)
        fracs = [mask_frame_chunked(500, cal, rng).fraction for _ in range(10_000)]
        assert abs(np.mean(fracs) - 0.75) < 0.02

    def test_bad_input(self):
        with pytest.raises(MaskError):
            calibrate_span_p(1.0)
        with pytest.raises(MaskError):
            calibrate_span_p(0.5, 0)


class TestFrameChunked:
    def test_zero_probability_rejected(self):
        with pytest.raises(MaskError, match="100"):
            mask_frame_chunked(50, SpanMaskCalibration(10, 0.0, 0.5), 0)

    def test_too_short(self):
        with pytest.raises(MaskError):
            mask_frame_chunked(10, calibrate_span_p(0.5), 0)

    def test_run_lengths(self):
        cal = calibrate_span_p(0.4, 10)
        for seed in range(200):
            plan = mask_frame_chunked(120, cal, seed)
            assert_partition(plan, 120)
            m = plan.bool_mask()
            edges = np.flatnonzero(np.diff(np.concatenate([[0], m.astype(int), [0]])))
            for start, stop in zip(edges[::2], edges[1::2]):
                # a run that reaches the end may have been clipped
                assert stop - start >= 10 or stop == 120

    def test_never_degenerate(self):
        cal = calibrate_span_p(0.95, 10)
        for seed in range(100):
            plan = mask_frame_chunked(30, cal, seed)
            assert 0 < len(plan.masked) < 30


class TestBroadcast:
    class _Clip:
        def __init__(self, n):
            self.n_tokens = n

    def test_identity_and_copies(self):
        plan = mask_patch_chunked(62, 8, 0.75, 0)
        assert broadcast_mask(plan, [self._Clip(496)]) == [plan]
        plans = broadcast_mask(plan, [self._Clip(496)] * 8)
        assert len(plans) == 8 and all(p is plan for p in plans)

    def test_unequal(self):
        plan = mask_patch_chunked(62, 8, 0.75, 0)
        with pytest.raises(MaskError):
            broadcast_mask(plan, [self._Clip(496), self._Clip(488)])


@settings(max_examples=60, deadline=None)
@given(n_time=st.integers(3, 128), p=st.sampled_from([0.25, 0.5, 0.75]), seed=st.integers(0, 10**6))
def test_partition_property_all_strategies(n_time, p, seed):
    n = n_time * 8
    for plan in (mask_random(n, p, seed), mask_patch_chunked(n_time, 8, p, seed)):
        assert_partition(plan, n)
        assert len(plan.masked) == target_count(n, p)
    if n > 10:
        assert_partition(mask_frame_chunked(n, calibrate_span_p(p), seed), n)


def test_clustering_stat_by_hand():
    from mae_ast.masking import MaskPlan

    # 3x2 grid, masked cells (0,0),(0,1),(1,0): each has 2,1,1 masked neighbours
    mask = np.array([1, 1, 1, 0, 0, 0], dtype=bool)
    plan = MaskPlan(np.flatnonzero(mask), np.flatnonzero(~mask), 0.5, MaskStrategy.PATCH_RANDOM)
    assert clustering_stat(plan, 2) == pytest.approx(4 / 3)
