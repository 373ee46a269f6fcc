import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polarfuse.bev import (
    BevConfig,
    box_sum,
    bev_encode,
    build_targets,
    context_channels,
    decode_box,
    encode_box,
    lidar_input,
    peak_mask,
)
from polarfuse.geometry import Box3D
from polarfuse.metrics import bev_iou

BEV = BevConfig()


def brute_force_pillars(pts, bev):
    out = np.zeros((bev.H, bev.W, 4))
    cells = {}
    for p in pts:
        i = math.floor((p[0] - bev.x_range[0]) / bev.cell)
        j = math.floor((p[1] - bev.y_range[0]) / bev.cell)
        if 0 <= i < bev.H and 0 <= j < bev.W:
            cells.setdefault((i, j), []).append(p)
    for (i, j), members in cells.items():
        m = np.array(members, dtype=np.float64)
        out[i, j] = [math.log1p(len(m)), m[:, 2].mean(), m[:, 2].max(), m[:, 3].mean()]
    return out


class TestEncode:
    def test_grid_size(self):
        assert (BEV.H, BEV.W) == (64, 64)

    def test_empty(self):
        assert not bev_encode(np.zeros((0, 4)), BEV).any()

    def test_one_point(self):
        g = bev_encode([[10.0, 1.0, -0.5, 0.4]], BEV)
        assert np.count_nonzero(g.any(axis=-1)) == 1

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        pts = np.column_stack([rng.uniform(-2, 40, 400), rng.uniform(-21, 21, 400),
                               rng.uniform(-2, 1, 400), rng.uniform(0, 1, 400)])
        pts[:50, :2] = pts[50:100, :2]  # force shared cells
        np.testing.assert_allclose(bev_encode(pts, BEV), brute_force_pillars(pts, BEV), rtol=1e-5, atol=1e-6)

    def test_context_channel_count(self, small_scenes):
        assert lidar_input(small_scenes[0].raw_points(), BEV).shape == (64, 64, context_channels())

    @settings(max_examples=30)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 3))
    def test_box_sum_brute_force(self, seed, r):
        a = np.random.default_rng(seed).standard_normal((5, 7, 2))
        out = box_sum(a, r)
        for i in range(5):
            for j in range(7):
                win = a[max(0, i - r):i + r + 1, max(0, j - r):j + r + 1].sum(axis=(0, 1))
                np.testing.assert_allclose(out[i, j], win, atol=1e-10)

    def test_bad_range(self):
        with pytest.raises(ValueError):
            BevConfig(x_range=(0, 1.0), cell=0.3)

    def test_fingerprint_changes(self):
        assert BevConfig(cell=0.3).fingerprint() != BEV.fingerprint()


class TestTargets:
    def test_center_cell_and_peak(self):
        box = Box3D((10.2, 1.1, -1.0), (4.0, 1.8, 1.5), 0.4, "Car")
        t = build_targets([box], BEV)
        (i, j), vec = encode_box(box, BEV)
        assert t.mask[i, j] and t.mask.sum() == 1
        assert t.heatmap[i, j, BEV.classes.index("Car")] == 1.0
        np.testing.assert_allclose(t.regression[i, j], vec, rtol=1e-6)

    def test_out_of_range_ignored(self):
        t = build_targets([Box3D((-5, 0, 0), (1, 1, 1), 0, "Car")], BEV)
        assert not t.mask.any() and not t.heatmap.any()

    @settings(max_examples=50)
    @given(st.floats(1, 37), st.floats(-18, 18), st.floats(0, 2 * math.pi), st.floats(0.5, 5), st.floats(0.5, 2.5))
    def test_encode_decode_round_trip(self, x, y, yaw, l, w):
        box = Box3D((x, y, BEV.ground_z + 0.78), (l, w, 1.56), yaw, "Car")
        (i, j), vec = encode_box(box, BEV)
        back = decode_box(i, j, vec, "Car", BEV)
        # yaw is recovered modulo pi, which leaves the footprint unchanged
        assert bev_iou(box, back) == pytest.approx(1.0, abs=1e-6)

    def test_peak_mask(self):
        s = np.zeros((4, 4))
        s[1, 1], s[1, 2], s[3, 3] = 0.9, 0.5, 0.3
        assert np.argwhere(peak_mask(s) & (s > 0)).tolist() == [[1, 1], [3, 3]]
