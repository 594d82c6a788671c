import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maskreg.volgrid import DisplacementField, GridMeta, LabelVolume, ScalarVolume, voxel_grid
from maskreg.warp import folding_count, jacobian_determinant, warp_labels, warp_scalar


def _uniform(meta, v):
    return DisplacementField(meta, np.broadcast_to(np.asarray(v, float), meta.dims + (3,)))


def test_zero_field_is_identity():
    rng = np.random.default_rng(0)
    meta = GridMeta((5, 4, 3))
    vol = ScalarVolume(meta, rng.random(meta.dims))
    lab = LabelVolume(meta, rng.integers(0, 4, meta.dims).astype(np.uint8))
    zero = DisplacementField.zeros(meta)
    assert warp_scalar(vol, zero) == vol
    assert warp_labels(lab, zero) == lab


def test_integer_shift_with_far_face_clamp():
    rng = np.random.default_rng(1)
    meta = GridMeta((6, 3, 2))
    v = rng.random(meta.dims)
    out = warp_scalar(ScalarVolume(meta, v), _uniform(meta, (1, 0, 0))).values
    np.testing.assert_array_equal(out[:-1], v[1:])
    np.testing.assert_array_equal(out[-1], v[-1])


def test_half_voxel_scalar():
    meta = GridMeta((2, 1, 1))
    vol = ScalarVolume(meta, np.array([10.0, 20.0]).reshape(2, 1, 1))
    out = warp_scalar(vol, _uniform(meta, (0.5, 0, 0)))
    assert out.values[0, 0, 0] == 15.0


def test_label_rounding_and_clamp():
    meta = GridMeta((4, 1, 1))
    lab = LabelVolume(meta, np.array([1, 2, 3, 4], np.uint8).reshape(4, 1, 1))
    np.testing.assert_array_equal(warp_labels(lab, _uniform(meta, (0.4, 0, 0))).labels.ravel(),
                                  [1, 2, 3, 4])
    np.testing.assert_array_equal(warp_labels(lab, _uniform(meta, (0.5, 0, 0))).labels.ravel(),
                                  [2, 3, 4, 4])
    np.testing.assert_array_equal(warp_labels(lab, _uniform(meta, (50, 0, 0))).labels.ravel(), 4)
    np.testing.assert_array_equal(warp_labels(lab, _uniform(meta, (-50, 0, 0))).labels.ravel(), 1)


def test_jacobian_of_zero_and_translation_is_one():
    meta = GridMeta((5, 6, 7))
    np.testing.assert_array_equal(jacobian_determinant(DisplacementField.zeros(meta)).values, 1.0)
    np.testing.assert_array_equal(jacobian_determinant(_uniform(meta, (2.5, -1, 3))).values, 1.0)


def test_jacobian_of_linear_field():
    meta = GridMeta((6, 6, 6))
    jd = jacobian_determinant(DisplacementField(meta, 0.1 * voxel_grid(meta.dims))).values
    assert np.abs(jd[1:-1, 1:-1, 1:-1] - 1.331).max() < 1e-12
    # one-sided differences are exact for linear fields too
    assert np.abs(jd - 1.331).max() < 1e-12


def test_folding_detected():
    meta = GridMeta((8, 3, 3))
    vec = np.zeros(meta.dims + (3,))
    vec[..., 0] = -1.5 * voxel_grid(meta.dims)[..., 0]
    jd = jacobian_determinant(DisplacementField(meta, vec))
    assert folding_count(jd) == jd.values.size
    assert np.allclose(jd.values, -0.5)


def test_degenerate_axis():
    meta = GridMeta((4, 1, 1))
    vec = np.zeros(meta.dims + (3,))
    vec[..., 0] = 0.5 * np.arange(4).reshape(4, 1, 1)
    np.testing.assert_allclose(jacobian_determinant(DisplacementField(meta, vec)).values, 1.5)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=9, max_size=9))
def test_affine_jacobian_matches_determinant(entries):
    a = np.array(entries).reshape(3, 3) * 0.2
    meta = GridMeta((4, 4, 4))
    vec = voxel_grid(meta.dims) @ a.T
    jd = jacobian_determinant(DisplacementField(meta, vec)).values
    assert np.allclose(jd, np.linalg.det(np.eye(3) + a), atol=1e-9)
