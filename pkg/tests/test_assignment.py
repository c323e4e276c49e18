import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnidet.assignment import GridSpec, assign_levels, build_targets, grid_points
from omnidet.data import DatasetItem, Granularity
from omnidet.geometry import Box, Dot, InstanceMask


def item(g, anns, size=128):
    return DatasetItem("x", "x.png", g, anns, image_size=(size, size))


def partition_ok(tm):
    cover = tm.certain_pos.astype(int) + tm.certain_neg.astype(int)
    for r in tm.regions:
        cover[r.indices] += 1
    return np.all(cover == 1)


class TestGrid:
    def test_points(self):
        p8 = grid_points((32, 32), [8])[0]
        assert p8.shape == (4, 4, 2)
        assert tuple(p8[0, 0]) == (4.0, 4.0)
        assert tuple(p8[1, 3]) == (28.0, 12.0)

    def test_level_shapes(self):
        assert GridSpec().level_shapes((128, 128)) == [(16, 16), (8, 8), (4, 4)]

    def test_indivisible_size(self):
        with pytest.raises(ValueError):
            GridSpec().level_shapes((100, 128))

    @pytest.mark.parametrize("kw", [dict(strides=(16, 8, 32)),
                                    dict(ranges=((0, 64), (64, 128))),
                                    dict(ranges=((0, 64), (70, 128), (128, math.inf))),
                                    dict(dot_levels="coarsest")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            GridSpec(**kw)

    def test_level_boundaries(self):
        r = GridSpec().ranges
        # extent is max(w, h) / 2
        assert assign_levels([Box(0, 0, 127.9, 10)], r) == [0]
        assert assign_levels([Box(0, 0, 128, 10)], r) == [1]
        assert assign_levels([Box(0, 0, 10, 256)], r) == [2]


class TestBuildTargets:
    def test_unlabeled_all_uncertain(self):
        tm = build_targets(item(Granularity.UNLABELED, []))
        assert tm.num_points == 16 * 16 + 8 * 8 + 4 * 4
        assert len(tm.regions) == 1 and tm.regions[0].size == tm.num_points
        assert not tm.certain_pos.any() and not tm.certain_neg.any()

    def test_dot_positive_on_every_level(self):
        tm = build_targets(item(Granularity.DOT, [Dot(20.0, 44.0)]))
        lv = tm.split_levels(tm.certain_pos)
        assert lv[0][5, 2] and lv[1][2, 1] and lv[2][1, 0]
        assert tm.certain_pos.sum() == 3
        assert not tm.certain_neg.any()
        assert tm.regions[0].size == tm.num_points - 3
        assert partition_ok(tm)

    def test_dot_positive_on_finest_level_only(self):
        tm = build_targets(item(Granularity.DOT, [Dot(20.0, 44.0)]), GridSpec(dot_levels="finest"))
        lv = tm.split_levels(tm.certain_pos)
        assert lv[0][5, 2] and tm.certain_pos.sum() == 1
        assert tm.regions[0].size == tm.num_points - 1
        assert partition_ok(tm)

    def test_dot_outside_image(self):
        with pytest.raises(ValueError, match="outside image"):
            build_targets(item(Granularity.DOT, [Dot(130.0, 4.0)]))

    def test_dot_item_without_dots(self):
        tm = build_targets(item(Granularity.DOT, []))
        assert not tm.certain_pos.any() and tm.certain_neg.all() and tm.regions == []

    def test_box_region_and_regression(self):
        box = Box(10, 10, 30, 26)
        tm = build_targets(item(Granularity.BOX, [box]))
        assert partition_ok(tm)
        r = tm.regions[0]
        assert r.level == 0 and r.box == box
        pts = np.concatenate([p.reshape(-1, 2) for p in grid_points((128, 128), (8, 16, 32))])
        inside = pts[r.indices]
        assert np.all((inside[:, 0] > 10) & (inside[:, 0] < 30) & (inside[:, 1] > 10) & (inside[:, 1] < 26))
        assert r.size == 6  # x in {12, 20, 28}, y in {12, 20}
        k = int(np.flatnonzero((pts[:, 0] == 20) & (pts[:, 1] == 20))[0])
        assert np.allclose(tm.regression[k], [10, 10, 10, 6])
        assert tm.reg_valid[r.indices].all() and tm.reg_valid.sum() == 6

    def test_tiny_box_keeps_nearest_point(self):
        tm = build_targets(item(Granularity.BOX, [Box(1, 1, 2, 2)]))
        assert tm.region_sizes == [1]
        assert partition_ok(tm)
        assert not tm.reg_valid.any()

    def test_overlap_smaller_box_wins(self):
        big, small = Box(0, 0, 60, 60), Box(10, 10, 30, 30)
        tm = build_targets(item(Granularity.BOX, [big, small]))
        assert partition_ok(tm)
        a, b = (set(r.indices.tolist()) for r in tm.regions)
        assert not (a & b) and len(b) == 9
        pts = np.concatenate([p.reshape(-1, 2) for p in grid_points((128, 128), (8, 16, 32))])
        k = int(np.flatnonzero((pts[:, 0] == 20) & (pts[:, 1] == 20))[0])
        assert k in b

    def test_mask_region_follows_shape(self):
        bm = np.zeros((128, 128), bool)
        bm[8:48, 8:16] = True  # vertical bar
        bm[40:48, 8:48] = True  # horizontal base, an L
        tm = build_targets(item(Granularity.MASK, [InstanceMask(bm)]))
        assert partition_ok(tm)
        r = tm.regions[0]
        assert r.box == Box(8, 8, 48, 48)
        lv0 = np.zeros(16 * 16, bool)
        lv0[r.indices] = True
        lv0 = lv0.reshape(16, 16)
        assert lv0[2, 1] and lv0[5, 4] and not lv0[2, 4]

    def test_invalid_item_shape(self):
        with pytest.raises(ValueError):
            build_targets(item(Granularity.BOX, [], size=100))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 110), st.floats(0, 110), st.floats(1, 60), st.floats(1, 60)),
                    max_size=4))
    def test_partition_property(self, raw):
        boxes = [Box(x, y, min(x + w, 128), min(y + h, 128)) for x, y, w, h in raw]
        tm = build_targets(item(Granularity.BOX, boxes))
        assert partition_ok(tm)
        assert len(tm.regions) == len(boxes)
        assert (tm.regression[tm.reg_valid] > 0).all()
