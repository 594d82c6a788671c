import math

import numpy as np
import pytest

from maskreg.pyramid import (KERNEL, SIGMA, Channel, ChannelStack, build_pyramid,
                             gaussian_downsample, upsample_field)
from maskreg.volgrid import DisplacementField, GridMeta, GridMismatchError, ScalarVolume


def _stack(values, mask=None):
    meta = GridMeta(values.shape)
    chans = [Channel("ff", ScalarVolume(meta, values))]
    if mask is not None:
        chans.append(Channel("sat", ScalarVolume(meta, mask), 0.6, is_mask=True))
    return ChannelStack(meta, tuple(chans))


def test_kernel_is_normalized_five_taps():
    assert len(KERNEL) == 5
    assert KERNEL.sum() == pytest.approx(1.0, abs=1e-15)
    raw = np.exp(-0.5 * (np.arange(-2, 3) / SIGMA) ** 2)
    np.testing.assert_allclose(KERNEL, raw / raw.sum(), rtol=1e-15)
    assert SIGMA == pytest.approx(math.sqrt(3) / 2)


def test_constant_is_preserved():
    vol = ScalarVolume(GridMeta((7, 6, 5)), np.full((7, 6, 5), 7.0))
    out = gaussian_downsample(vol)
    assert out.meta.dims == (4, 3, 3)
    np.testing.assert_allclose(out.values, 7.0, rtol=0, atol=1e-12)


def test_impulse_gives_kernel_samples():
    v = np.zeros((12, 12, 12))
    v[6, 6, 6] = 1.0
    out = gaussian_downsample(ScalarVolume(GridMeta(v.shape), v)).values
    # retained voxel 2k sits at offset 2k - 6 from the impulse
    k3 = KERNEL[:, None, None] * KERNEL[None, :, None] * KERNEL[None, None, :]
    for i in range(6):
        for j in range(6):
            for k in range(6):
                off = np.array([2 * i, 2 * j, 2 * k]) - 6
                want = k3[tuple(off + 2)] if np.all(np.abs(off) <= 2) else 0.0
                assert out[i, j, k] == pytest.approx(want, abs=1e-15)


def test_ceil_dims():
    vol = ScalarVolume(GridMeta((3, 1, 1)), np.arange(3.0).reshape(3, 1, 1))
    assert gaussian_downsample(vol).meta.dims == (2, 1, 1)


def test_pyramid_levels_and_spacing():
    dims = (362, 174, 224)
    meta = GridMeta(dims)
    for _ in range(5):
        meta = meta.halved()
    assert meta.dims == (12, 6, 7)
    assert meta.spacing == (32.0, 32.0, 32.0)

    rng = np.random.default_rng(0)
    mask = (rng.random((20, 18, 10)) > 0.5).astype(float)
    pyr = build_pyramid(_stack(rng.random((20, 18, 10)), mask), 4)
    assert [p.meta.dims for p in pyr] == [(20, 18, 10), (10, 9, 5), (5, 5, 3), (3, 3, 2)]
    m2 = pyr[2].channels[1].volume.values
    assert m2.min() >= 0 and m2.max() <= 1
    assert pyr[2].channels[1].is_mask and pyr[2].channels[1].weight == 0.6


def test_single_level_is_input():
    s = _stack(np.ones((4, 4, 4)))
    assert build_pyramid(s, 1) == [s]
    with pytest.raises(ValueError):
        build_pyramid(s, 0)


def test_upsample_zero_and_uniform():
    coarse = GridMeta((3, 2, 2))
    fine = GridMeta((5, 4, 3))
    assert upsample_field(DisplacementField.zeros(coarse), fine) == DisplacementField.zeros(fine)
    vec = np.zeros((3, 2, 2, 3))
    vec[..., 0] = 1.0
    up = upsample_field(DisplacementField(coarse, vec), fine)
    np.testing.assert_array_equal(up.vectors[..., 0], 2.0)
    np.testing.assert_array_equal(up.vectors[..., 1:], 0.0)


def test_upsample_row_hand_values():
    vec = np.zeros((2, 1, 1, 3))
    vec[1, 0, 0, 0] = 2.0
    up = upsample_field(DisplacementField(GridMeta((2, 1, 1)), vec), GridMeta((4, 1, 1)))
    # coarse samples at 0, 0.5, 1, 1.5 (clamped) are 0, 1, 2, 2; doubled
    np.testing.assert_array_equal(up.vectors[:, 0, 0, 0], [0.0, 2.0, 4.0, 4.0])


def test_upsample_grid_mismatch():
    with pytest.raises(GridMismatchError):
        upsample_field(DisplacementField.zeros(GridMeta((3, 2, 2))), GridMeta((8, 4, 4)))
