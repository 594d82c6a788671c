"""Gaussian resampling pyramid for channel stacks and displacement fields."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volgrid import (DisplacementField, GridMeta, GridMismatchError, ScalarVolume,
                      check_same_grid, trilinear_array, voxel_grid)

# anti-alias sigma for factor-2 decimation, in voxels of the finer grid
SIGMA = math.sqrt(3.0) / 2.0
RADIUS = 2


def gaussian_kernel(sigma: float = SIGMA, radius: int = RADIUS) -> np.ndarray:
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (k / sigma) ** 2)
    return w / w.sum()


KERNEL = gaussian_kernel()


@dataclass(frozen=True)
class Channel:
    name: str
    volume: ScalarVolume
    weight: float = 1.0
    is_mask: bool = False

    def __post_init__(self):
        w = float(self.weight)
        if not (math.isfinite(w) and w >= 0):
            raise ValueError(f"channel {self.name!r}: weight must be finite and >= 0")
        object.__setattr__(self, "weight", w)


@dataclass(frozen=True)
class ChannelStack:
    """Ordered, weighted channels sharing one grid."""

    meta: GridMeta
    channels: tuple[Channel, ...]

    def __post_init__(self):
        chans = tuple(self.channels)
        if not chans:
            raise ValueError("a channel stack needs at least one channel")
        names = [c.name for c in chans]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate channel names: {names}")
        for c in chans:
            check_same_grid(self.meta, c.volume.meta)
        object.__setattr__(self, "channels", chans)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.channels]

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.channels])

    def data(self) -> np.ndarray:
        """Channel values as one ``(C, nx, ny, nz)`` float64 array."""
        return np.stack([c.volume.values for c in self.channels])

    def without_masks(self) -> "ChannelStack":
        return ChannelStack(self.meta, tuple(c for c in self.channels if not c.is_mask))

    def with_weights(self, intensity: float | None = None, mask: float | None = None):
        out = []
        for c in self.channels:
            w = c.weight
            if c.is_mask and mask is not None:
                w = mask
            elif not c.is_mask and intensity is not None:
                w = intensity
            out.append(Channel(c.name, c.volume, w, c.is_mask))
        return ChannelStack(self.meta, tuple(out))


def gaussian_downsample(vol: ScalarVolume) -> ScalarVolume:
    """Blur with a 5-tap Gaussian (clamped borders) and keep even voxels."""
    return ScalarVolume(vol.meta.halved(), _downsample_array(vol.values))


def _downsample_array(values: np.ndarray) -> np.ndarray:
    out = np.asarray(values, dtype=np.float64)
    for axis in range(3):
        out = ndimage.correlate1d(out, KERNEL, axis=axis, mode="nearest")
    return np.ascontiguousarray(out[::2, ::2, ::2])


def build_pyramid(stack: ChannelStack, levels: int) -> list[ChannelStack]:
    """Level 0 is ``stack``; level L has dims ``ceil(dims / 2**L)``.

    Mask channels are downsampled like any other channel and become
    fractional at coarse levels.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    pyr = [stack]
    for _ in range(1, levels):
        prev = pyr[-1]
        meta = prev.meta.halved()
        chans = tuple(Channel(c.name, ScalarVolume(meta, _downsample_array(c.volume.values)),
                              c.weight, c.is_mask) for c in prev.channels)
        pyr.append(ChannelStack(meta, chans))
    return pyr


def upsample_field(field: DisplacementField, target: GridMeta) -> DisplacementField:
    """Carry a coarse field to the next finer grid.

    Each fine voxel ``p`` reads the coarse field at ``p / 2`` (trilinear,
    clamped) and doubles it, since voxel units halve in size.
    """
    if tuple(-(-d // 2) for d in target.dims) != field.meta.dims:
        raise GridMismatchError(
            f"target dims {target.dims} do not halve to field dims {field.meta.dims}")
    coords = voxel_grid(target.dims) / 2.0
    out = np.empty(target.dims + (3,))
    for c in range(3):
        out[..., c] = 2.0 * trilinear_array(field.vectors[..., c], coords)
    return DisplacementField(target, out)
