"""Apply displacement fields and compute local volume change."""

from __future__ import annotations

import numpy as np

from .volgrid import (DisplacementField, LabelVolume, ScalarVolume, nearest_array,
                      trilinear_array, voxel_grid)


def _targets(field: DisplacementField) -> np.ndarray:
    return voxel_grid(field.meta.dims) + field.vectors


def warp_scalar(vol: ScalarVolume, field: DisplacementField) -> ScalarVolume:
    """Pull ``vol`` back onto the field's grid: ``out(p) = vol(p + u(p))``."""
    return ScalarVolume(field.meta, trilinear_array(vol.values, _targets(field)))


def warp_labels(labels: LabelVolume, field: DisplacementField) -> LabelVolume:
    """Nearest-neighbor pull-back of a label map."""
    out = nearest_array(labels.labels, _targets(field))
    return LabelVolume(field.meta, out.astype(labels.labels.dtype), labels.names)


def _gradient(comp: np.ndarray, axis: int) -> np.ndarray:
    # central differences inside, one-sided on the faces
    if comp.shape[axis] < 2:
        return np.zeros_like(comp)
    return np.gradient(comp, axis=axis, edge_order=1)


def jacobian_determinant(field: DisplacementField) -> ScalarVolume:
    """``det(I + grad u)`` per voxel, derivatives in voxel units.

    Values above 1 mean the moving anatomy mapped to that voxel was
    expanded, below 1 compressed; non-positive values indicate folding.
    """
    u = field.vectors
    jac = np.empty(field.meta.dims + (3, 3))
    for i in range(3):
        for j in range(3):
            jac[..., i, j] = _gradient(u[..., i], j)
        jac[..., i, i] += 1.0
    a, b, c = jac[..., 0, 0], jac[..., 0, 1], jac[..., 0, 2]
    d, e, f = jac[..., 1, 0], jac[..., 1, 1], jac[..., 1, 2]
    g, h, k = jac[..., 2, 0], jac[..., 2, 1], jac[..., 2, 2]
    det = a * (e * k - f * h) - b * (d * k - f * g) + c * (d * h - e * g)
    return ScalarVolume(field.meta, det)


def folding_count(jd: ScalarVolume) -> int:
    return int((jd.values <= 0).sum())
