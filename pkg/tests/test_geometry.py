import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polarfuse.geometry import (
    TWO_PI,
    Box3D,
    DegenerateCenter,
    direction_angle,
    group_index,
    polar_index_of,
    rotate_boxes_about_sensor,
    rotation_angle,
    to_global,
    to_local,
)


def box(center=(10.0, 0.0, -1.0), dims=(4.0, 2.0, 1.5), yaw=0.0, label="Car"):
    return Box3D(center, dims, yaw, label)


class TestDirection:
    def test_on_axis(self):
        assert direction_angle(box((10, 0, -1))) == 0.0

    def test_quadrant_boundary(self):
        assert direction_angle(box((0, 5, 0))) == pytest.approx(math.pi / 2, abs=1e-15)

    def test_third_quadrant(self):
        # atan2(-3, -3) = -3pi/4, wrapped by +2pi
        assert direction_angle(box((-3, -3, 0))) == pytest.approx(5 * math.pi / 4, abs=1e-12)

    def test_origin_rejected(self):
        with pytest.raises(DegenerateCenter):
            direction_angle(box((0, 0, 3)))

    @given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-5, 5), st.floats(-5, 5))
    def test_z_invariant(self, x, y, z1, z2):
        if x == 0 and y == 0:
            return
        assert direction_angle(box((x, y, z1))) == direction_angle(box((x, y, z2)))


class TestRotation:
    @pytest.mark.parametrize("yaw,expected", [
        (0.0, 0.0),
        (-math.pi / 2, 3 * math.pi / 2),
        (7 * math.pi / 2, 3 * math.pi / 2),  # 7pi/2 - 2pi
    ])
    def test_normalization(self, yaw, expected):
        assert rotation_angle(box(yaw=yaw)) == pytest.approx(expected, abs=1e-12)

    @given(st.floats(-100, 100))
    def test_range(self, yaw):
        assert 0.0 <= rotation_angle(box(yaw=yaw)) < TWO_PI


class TestGroupIndex:
    def test_first_bin(self):
        idx = group_index(0.0, 0.0, "Car", 8)
        assert (idx.dir_bin, idx.rot_bin) == (0, 0)

    def test_hand_value(self):
        # floor(pi * 8 / 2pi) = 4, floor(1.5pi * 8 / 2pi) = 6
        idx = group_index(math.pi, 3 * math.pi / 2, "Car", 8)
        assert (idx.dir_bin, idx.rot_bin) == (4, 6)

    def test_upper_boundary(self):
        idx = group_index(TWO_PI - 1e-9, 0.0, "Car", 8)
        assert (idx.dir_bin, idx.rot_bin) == (7, 0)

    @given(st.floats(0, TWO_PI, exclude_max=True), st.floats(0, TWO_PI, exclude_max=True),
           st.integers(1, 64))
    def test_bins_in_range(self, a, b, n):
        idx = group_index(a, b, "Ped", n)
        assert 0 <= idx.dir_bin < n and 0 <= idx.rot_bin < n

    @given(st.floats(0, TWO_PI, exclude_max=True), st.floats(0, TWO_PI, exclude_max=True))
    def test_single_bin(self, a, b):
        idx = group_index(a, b, "Car", 1)
        assert (idx.dir_bin, idx.rot_bin) == (0, 0)

    @settings(max_examples=200)
    @given(st.floats(1.0, 40.0), st.floats(0, TWO_PI, exclude_max=True), st.integers(2, 32))
    def test_rotation_by_one_sector(self, r, phi, n):
        sector = TWO_PI / n
        frac = (phi / sector) % 1.0
        if frac < 1e-6 or frac > 1 - 1e-6:
            return  # too close to a bin boundary for float rotation
        b = box((r * math.cos(phi), r * math.sin(phi), 0.0))
        (rotated,) = rotate_boxes_about_sensor([b], sector)
        before = polar_index_of(b, n).dir_bin
        after = polar_index_of(rotated, n).dir_bin
        assert after == (before + 1) % n


class TestFrames:
    def test_center_maps_to_origin(self):
        b = box((3.0, -2.0, 0.5), yaw=1.1)
        np.testing.assert_allclose(to_local([b.center], b), [[0, 0, 0]], atol=1e-12)

    def test_quarter_turn(self):
        b = box((1.0, 2.0, 0.0), yaw=math.pi / 2)
        p = np.array([[1.0, 3.0, 0.0]])  # center + (0, 1, 0)
        np.testing.assert_allclose(to_local(p, b), [[1.0, 0.0, 0.0]], atol=1e-12)
        np.testing.assert_allclose(to_global([[1.0, 0.0, 0.0]], b), p, atol=1e-12)

    def test_intensity_passes_through(self):
        b = box(yaw=0.3)
        p = np.array([[1.0, 2.0, 3.0, 0.7]])
        assert to_local(p, b)[0, 3] == 0.7

    @given(st.lists(st.tuples(*[st.floats(-1e3, 1e3)] * 3), min_size=1, max_size=20),
           st.floats(-10, 10), st.floats(-50, 50), st.floats(-50, 50))
    def test_round_trip(self, pts, yaw, cx, cy):
        b = box((cx, cy, 0.3), yaw=yaw)
        p = np.array(pts)
        np.testing.assert_allclose(to_global(to_local(p, b), b), p, atol=1e-6)
        np.testing.assert_allclose(to_local(to_global(p, b), b), p, atol=1e-6)


class TestBox:
    def test_rejects_nonpositive_dims(self):
        with pytest.raises(ValueError):
            Box3D((0, 0, 0), (1, 0, 1), 0.0)

    def test_yaw_normalized(self):
        assert Box3D((1, 0, 0), (1, 1, 1), -0.5).yaw == pytest.approx(TWO_PI - 0.5)
