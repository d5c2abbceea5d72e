"""Slice allocation, important sampling, and extraction."""

import numpy as np
import pytest

from adapt3d import slicer as sl
from adapt3d.volumes import Volume


class TestAllocation:
    def test_valid(self):
        a = sl.SliceAllocation((4, 4, 4), 12, 1, 10)
        assert a.counts == (4, 4, 4)

    def test_sum_mismatch(self):
        with pytest.raises(sl.AllocationError):
            sl.SliceAllocation((4, 4, 5), 12, 1, 10)

    def test_bounds_violated(self):
        with pytest.raises(sl.AllocationError):
            sl.SliceAllocation((11, 1, 0), 12, 1, 10)

    def test_infeasible_bounds(self):
        with pytest.raises(sl.AllocationError):
            sl.SliceAllocation((4, 4, 4), 12, 5, 10)

    def test_default_bounds(self):
        assert sl.default_bounds(12) == (1, 10)
        assert sl.default_bounds(48) == (4, 40)


class TestImportantIndices:
    def test_reference_window(self):
        idx = sl.important_indices(224, 16, 52, 172)
        assert idx == list(range(52, 173, 8))

    def test_two_gives_endpoints(self):
        assert sl.important_indices(100, 2, 10, 90) == [10, 90]

    def test_one_gives_midpoint(self):
        assert sl.important_indices(100, 1, 10, 90) == [50]
        assert sl.important_indices(100, 1, 10, 91) == [51]  # x.5 rounds up

    def test_cardinality_sorted_unique_in_window(self, rng):
        for _ in range(200):
            extent = int(rng.integers(8, 128))
            lo = int(rng.integers(0, extent - 1))
            hi = int(rng.integers(lo, extent))
            n = int(rng.integers(1, hi - lo + 2))
            idx = sl.important_indices(extent, n, lo, hi)
            assert len(idx) == n
            assert idx == sorted(set(idx))
            assert all(lo <= i <= hi for i in idx)

    def test_dense_request_uses_whole_window(self):
        assert sl.important_indices(20, 5, 3, 7) == [3, 4, 5, 6, 7]

    def test_too_many_rejected(self):
        with pytest.raises(ValueError):
            sl.important_indices(20, 6, 3, 7)

    def test_bad_window_rejected(self):
        with pytest.raises(ValueError):
            sl.important_indices(20, 2, 5, 25)

    def test_window_scaling(self):
        assert sl.default_window(224) == (52, 172)
        assert sl.default_window(64) == (15, 49)


class TestExtractSlices:
    def test_reference_uniform_allocation(self):
        vol = Volume(np.zeros((224, 224, 224), dtype=np.float32))
        alloc = sl.SliceAllocation((16, 16, 16), 48, 4, 40)
        stack = sl.extract_slices(vol, alloc)
        assert stack.slices.shape == (48, 224, 224)
        views = [v for v, _ in stack.provenance]
        assert views == [0] * 16 + [1] * 16 + [2] * 16

    def test_uneven_allocation_group_sizes(self):
        vol = Volume(np.zeros((64, 64, 64), dtype=np.float32))
        alloc = sl.SliceAllocation((10, 19, 19), 48, 4, 40)
        stack = sl.extract_slices(vol, alloc)
        views = [v for v, _ in stack.provenance]
        assert (views.count(0), views.count(1), views.count(2)) == (10, 19, 19)

    def test_planes_match_views(self, rng):
        vox = rng.normal(size=(16, 16, 16)).astype(np.float32)
        vol = Volume(vox)
        alloc = sl.SliceAllocation((2, 2, 2), 6, 1, 4)
        stack = sl.extract_slices(vol, alloc)
        for pos, (view, idx) in enumerate(stack.provenance):
            if view == 0:
                expected = vox[idx, :, :]
            elif view == 1:
                expected = vox[:, idx, :]
            else:
                expected = vox[:, :, idx]
            np.testing.assert_array_equal(stack.slices[pos], expected)

    def test_constant_volume_constant_slices(self):
        vol = Volume(np.full((32, 32, 32), 1.5, dtype=np.float32))
        alloc = sl.SliceAllocation((4, 4, 4), 12, 1, 10)
        stack = sl.extract_slices(vol, alloc)
        assert (stack.slices == 1.5).all()

    def test_non_cubic_rejected(self, rng):
        vol = Volume(rng.normal(size=(16, 16, 8)).astype(np.float32))
        with pytest.raises(ValueError, match="cubic"):
            sl.extract_slices(vol, sl.SliceAllocation((2, 2, 2), 6, 1, 4))

    def test_total_token_count_allocation_invariant(self):
        vol = Volume(np.zeros((64, 64, 64), dtype=np.float32))
        shapes = set()
        for counts in [(4, 4, 4), (1, 1, 10), (10, 1, 1), (2, 5, 5)]:
            alloc = sl.SliceAllocation(counts, 12, 1, 10)
            shapes.add(sl.extract_slices(vol, alloc).slices.shape)
        assert shapes == {(12, 64, 64)}

    def test_view_members(self):
        vol = Volume(np.zeros((32, 32, 32), dtype=np.float32))
        alloc = sl.SliceAllocation((2, 3, 1), 6, 1, 4)
        stack = sl.extract_slices(vol, alloc)
        assert stack.view_members(0) == [0, 1]
        assert stack.view_members(1) == [2, 3, 4]
        assert stack.view_members(2) == [5]
