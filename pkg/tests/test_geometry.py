import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from dynfield.geometry import (
    DESK_SYSTEM, PAPER_SYSTEM, DomainBox, DomainError, ImagingSystem, frame_times,
    pixel_centers, pixel_index, ring_radii, sensor_angle, sensor_position, sensor_positions,
)


def test_reference_defaults():
    s = PAPER_SYSTEM
    assert (s.fov_size_L, s.pixels_per_side_Ns, s.aperture_R, s.acquisition_T) == (2.9, 200, 2.05, 5.0)
    assert (s.n_frames_K, s.rings_per_view_I, s.rotation_dtheta, s.quadrature_points_Q) == (180, 283, 2.0, 512)
    assert s.n_pixels == 40000
    assert s.n_measurements == 180 * 4 * 283


def test_invalid_systems():
    with pytest.raises(DomainError):
        ImagingSystem(aperture_R=1.0)
    with pytest.raises(DomainError):
        ImagingSystem(n_frames_K=0)
    with pytest.raises(DomainError):
        ImagingSystem(relative_noise=-0.1)


def test_sensor_angles():
    s = PAPER_SYSTEM
    assert sensor_angle(s, 1, 1) == 0.0
    assert_allclose(sensor_angle(s, 1, 2), math.pi / 2)
    assert_allclose(sensor_angle(s, 2, 1), math.radians(2.0))
    assert_allclose(sensor_position(s, 1, 1), [2.05, 0.0])
    assert_allclose(np.linalg.norm(sensor_positions(s, 7), axis=1), 2.05)
    with pytest.raises(DomainError):
        sensor_angle(s, 0, 1)
    with pytest.raises(DomainError):
        sensor_angle(s, 1, 5)


def test_rings_reach_far_corner():
    s = PAPER_SYSTEM
    l = ring_radii(s)
    assert len(l) == 283
    assert_allclose(l[-1], 2.05 + 2.9 / math.sqrt(2))
    assert_allclose(np.diff(l), l[0])


def test_frame_times():
    t = frame_times(DESK_SYSTEM)
    assert t[0] == 0.0 and t[-1] == pytest.approx(5.0)
    assert len(t) == 32


def test_box_normalization_roundtrip(rng, box):
    x = box.sample(100, rng)
    assert np.all(box.contains(x))
    u = box.normalize(x)
    assert np.all(np.abs(u) <= 1)
    assert_allclose(box.denormalize(u), x, atol=1e-14)
    assert_allclose(box.normalize([1.45, -1.45, 5.0]), [1, -1, 1])
    assert box.volume == pytest.approx(2.9**2 * 5)
    with pytest.raises(DomainError):
        box.check(np.array([[0.0, 0.0, 5.5]]))


def test_pixel_index_matches_centers():
    s = DESK_SYSTEM
    c = pixel_centers(s)
    idx, inside = pixel_index(s, c)
    assert inside.all()
    assert_allclose(idx, np.arange(s.n_pixels))
    # row 0 is the top row
    assert c[0, 1] > 0 and c[0, 0] < 0


def test_digest_stable():
    assert PAPER_SYSTEM.digest() == ImagingSystem().digest()
    assert PAPER_SYSTEM.digest() != DESK_SYSTEM.digest()
