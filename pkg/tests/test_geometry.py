import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from bevsan.geometry import (BevGridSpec, CameraModel, FrustumSpec, HeightSlice, bev_cell_index,
                             frustum_points, project_ego_to_image, project_points, ring_cameras,
                             slice_contains, unproject)
from bevsan.verify import random_camera, random_rotation


def test_projection_hand_example():
    cam = CameraModel(10.0, 10.0, 2.0, 2.0)
    u, v, d = project_ego_to_image([1.0, 2.0, 5.0], cam)
    assert (u, v, d) == (4.0, 6.0, 5.0)


def test_point_behind_camera_is_none():
    cam = CameraModel(10.0, 10.0, 2.0, 2.0)
    assert project_ego_to_image([0.0, 0.0, -1.0], cam) is None
    assert project_ego_to_image([0.0, 0.0, 0.0], cam) is None
    uvd, valid = project_points(np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 2.0]]), cam)
    assert_array_equal(valid, [False, True])
    assert np.isnan(uvd[0]).all()


def test_camera_rejects_bad_rotation_and_focal():
    with pytest.raises(ValueError):
        CameraModel(1.0, 1.0, 0.0, 0.0, rotation=np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        CameraModel(0.0, 1.0, 0.0, 0.0)


def test_camera_arrays_are_frozen():
    cam = CameraModel(1.0, 1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        cam.rotation[0, 0] = 2.0


def test_frustum_spec_validation_and_bins():
    fs = FrustumSpec(2, 3, 1.0, 5.0, 4)
    assert_allclose(fs.bin_centers(), [1.5, 2.5, 3.5, 4.5])
    assert fs.bin_of(1.0) == 0
    assert fs.bin_of(4.999) == 3
    assert fs.bin_of(5.0) is None
    with pytest.raises(ValueError):
        FrustumSpec(2, 3, 0.0, 5.0, 4)
    with pytest.raises(ValueError):
        FrustumSpec(2, 3, 1.0, 5.0, 1)


def test_ring_camera_zero_looks_along_x():
    cams = ring_cameras(6)
    forward = cams[0].rotation[:, 2]
    assert_allclose(forward, [1.0, 0.0, 0.0], atol=1e-15)
    # image y (down) maps to ego -z
    assert_allclose(cams[0].rotation[:, 1], [0.0, 0.0, -1.0], atol=1e-15)
    yaws = [math.atan2(c.rotation[1, 2], c.rotation[0, 2]) % (2 * math.pi) for c in cams]
    assert_allclose(np.diff(yaws), np.full(5, math.pi / 3), atol=1e-12)


def test_frustum_points_round_trip_random_poses():
    rng = np.random.default_rng(5)
    fs = FrustumSpec(4, 6, 1.0, 30.0, 5)
    for _ in range(50):
        cam = random_camera(rng, fs)
        pts = frustum_points(cam, fs)
        uvd, valid = project_points(pts, cam)
        assert valid.all()
        d, i, j = np.meshgrid(fs.bin_centers(), np.arange(fs.Hf), np.arange(fs.Wf), indexing="ij")
        assert_allclose(uvd, np.stack([j, i, d], axis=-1), atol=1e-9)


@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(0.1, 80), st.integers(0, 2**32 - 1))
def test_unproject_inverts_projection(u, v, d, seed):
    cam = random_camera(np.random.default_rng(seed), FrustumSpec(4, 6, 1.0, 30.0, 5))
    p = unproject(u, v, d, cam)
    got = project_ego_to_image(p, cam)
    assert_allclose(got, (u, v, d), rtol=1e-9, atol=1e-9)


@given(st.integers(0, 2**32 - 1))
def test_random_rotation_is_proper(seed):
    r = random_rotation(np.random.default_rng(seed))
    assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(r) - 1.0) < 1e-12


def test_cell_index_half_open():
    g = BevGridSpec(-2.0, 2.0, -2.0, 2.0, 4, 4)
    assert bev_cell_index((-2.0, -2.0), g) == (0, 0)
    assert bev_cell_index((-1.0, 0.5), g) == (1, 2)
    assert bev_cell_index((1.999, 1.999), g) == (3, 3)
    assert bev_cell_index((2.0, 0.0), g) is None
    assert bev_cell_index((0.0, -2.0001), g) is None


def test_point_rounding_onto_top_edge_stays_in_last_cell():
    # y - y_min rounds to exactly 32.0 here
    y = np.nextafter(16.0, 0.0)
    assert y - (-16.0) == 32.0
    assert bev_cell_index((0.0, y), BevGridSpec()) == (8, 15)


@given(st.floats(-16, 16, exclude_max=True), st.floats(-16, 16, exclude_max=True))
def test_cell_center_lies_in_its_cell(x, y):
    g = BevGridSpec()
    ix, iy = bev_cell_index((x, y), g)
    cx, cy = g.cell_center(ix, iy)
    assert bev_cell_index((cx, cy), g) == (ix, iy)
    assert abs(cx - x) <= g.cell_x / 2 + 1e-12 and abs(cy - y) <= g.cell_y / 2 + 1e-12


def test_slice_membership_closed_only_at_range_top():
    g = BevGridSpec()
    low, top = HeightSlice(-6.0, 0.0), HeightSlice(0.0, 4.0)
    assert slice_contains(low, -6.0, g) and not slice_contains(low, 0.0, g)
    assert slice_contains(top, 0.0, g) and slice_contains(top, 4.0, g)
    assert not slice_contains(top, 4.0000001, g)


def test_slice_validation():
    with pytest.raises(ValueError):
        HeightSlice(1.0, 1.0)
    with pytest.raises(ValueError):
        HeightSlice(-7.0, 0.0).validate(BevGridSpec())
    assert str(HeightSlice(-6.0, 4.0)) == "[-6, 4]"
