"""Registration objective: weighted multi-channel SSD plus quadratic smoothness."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pyramid import Channel, ChannelStack
from .volgrid import (DisplacementField, GridMismatchError, ScalarVolume, check_same_grid,
                      trilinear_array, voxel_grid)


@dataclass(frozen=True)
class EnergyParams:
    regularization_weight: float = 0.1
    regularization_scale: float = 1.0
    regularization_exponent: float = 2.0

    def __post_init__(self):
        if not self.regularization_weight >= 0:
            raise ValueError("regularization_weight must be >= 0")
        if not self.regularization_scale > 0:
            raise ValueError("regularization_scale must be > 0")
        if not self.regularization_exponent > 0:
            raise ValueError("regularization_exponent must be > 0")


@dataclass(frozen=True)
class EnergyReport:
    data_term: float
    regularization_term: float

    @property
    def total(self) -> float:
        return self.data_term + self.regularization_term

    def as_dict(self) -> dict:
        return {"data_term": self.data_term,
                "regularization_term": self.regularization_term,
                "total": self.total}


def normalize_channels(stack: ChannelStack) -> ChannelStack:
    """Min-max rescale every channel to [0, 1]; constant channels become 0."""
    out = []
    for c in stack.channels:
        v = c.volume.values
        lo = v.min()
        hi = v.max()
        if hi > lo:
            nv = (v - lo) / (hi - lo)
        else:
            nv = np.zeros_like(v)
        out.append(Channel(c.name, ScalarVolume(c.volume.meta, nv), c.weight, c.is_mask))
    return ChannelStack(stack.meta, tuple(out))


def _check_channels(fixed: ChannelStack, moving: ChannelStack) -> None:
    if len(fixed.channels) != len(moving.channels):
        raise ValueError(
            f"channel count mismatch: {len(fixed.channels)} vs {len(moving.channels)}")


def unary_cost(fixed: ChannelStack, moving: ChannelStack, p, u) -> float:
    """Weighted SSD at reference voxel ``p`` for displacement ``u``.

    Weights come from the fixed (reference) stack.
    """
    _check_channels(fixed, moving)
    p = np.asarray(p, dtype=np.intp)
    coord = p.astype(np.float64) + np.asarray(u, dtype=np.float64)
    total = 0.0
    for fc, mc in zip(fixed.channels, moving.channels):
        m = trilinear_array(mc.volume.values, coord[None, :])[0]
        f = fc.volume.values[p[0], p[1], p[2]]
        total += fc.weight * (m - f) ** 2
    return float(total)


def pairwise_cost(u_p, u_q, params: EnergyParams = EnergyParams()) -> float:
    """``weight * (|u_p - u_q| / scale) ** exponent``."""
    d = np.asarray(u_p, dtype=np.float64) - np.asarray(u_q, dtype=np.float64)
    n2 = float(d @ d) / params.regularization_scale ** 2
    return params.regularization_weight * n2 ** (params.regularization_exponent / 2.0)


def data_cost_map(fixed_data: np.ndarray, moving_data: np.ndarray, weights: np.ndarray,
                  vectors: np.ndarray) -> np.ndarray:
    """Per-voxel weighted SSD for a whole field (arrays, not volumes)."""
    coords = voxel_grid(fixed_data.shape[1:]) + vectors
    cost = np.zeros(fixed_data.shape[1:])
    for c in range(len(weights)):
        diff = trilinear_array(moving_data[c], coords) - fixed_data[c]
        cost += weights[c] * diff * diff
    return cost


def regularization_map_sum(vectors: np.ndarray, params: EnergyParams) -> float:
    """Sum of the pairwise cost over all unordered 6-neighbor pairs."""
    total = 0.0
    half_e = params.regularization_exponent / 2.0
    s2 = params.regularization_scale ** 2
    for axis in range(3):
        d = np.diff(vectors, axis=axis)
        n2 = (d * d).sum(axis=-1) / s2
        total += float((n2 ** half_e).sum())
    return params.regularization_weight * total


def total_energy(field: DisplacementField, fixed: ChannelStack, moving: ChannelStack,
                 params: EnergyParams = EnergyParams()) -> EnergyReport:
    _check_channels(fixed, moving)
    check_same_grid(field.meta, fixed.meta)
    if moving.meta.dims != fixed.meta.dims:
        raise GridMismatchError(f"grid mismatch: {fixed.meta.dims} vs {moving.meta.dims}")
    data = data_cost_map(fixed.data(), moving.data(), fixed.weights, field.vectors)
    reg = regularization_map_sum(field.vectors, params)
    return EnergyReport(float(data.sum()), reg)


def is_submodular_step(u_p, u_q, delta, params: EnergyParams) -> bool:
    a = pairwise_cost(u_p, u_q, params)
    b = pairwise_cost(u_p, np.add(u_q, delta), params)
    c = pairwise_cost(np.add(u_p, delta), u_q, params)
    d = pairwise_cost(np.add(u_p, delta), np.add(u_q, delta), params)
    return b + c - a - d >= -1e-12 * max(1.0, abs(a) + abs(b) + abs(c) + abs(d))
