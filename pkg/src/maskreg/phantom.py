"""Synthetic layered body phantoms with known smooth deformations.

A reference phantom is a nested-ellipsoid body: a subcutaneous fat shell,
a muscle layer, visceral filler and a few ellipsoidal organs. A subject
is the reference pushed through an analytic map ``p -> p + t(p)``; the
displacement ``t`` is returned as the ground-truth field, so warping the
subject with it recovers the reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .pyramid import Channel, ChannelStack
from .volgrid import (DisplacementField, GridMeta, LabelVolume, ScalarVolume, nearest_array,
                      trilinear_array, voxel_grid)

BACKGROUND = 0
SAT = 1
MUSCLE = 2
VISCERAL = 3
FIRST_ORGAN = 4

LABEL_NAMES = {SAT: "subcutaneous_fat", MUSCLE: "skeletal_muscle", VISCERAL: "visceral"}

# normalized ellipsoid radii of the layer boundaries
MUSCLE_RADIUS = 0.80
VISCERAL_RADIUS = 0.60
BODY_EXTENT = 0.40   # body semi-axis as a fraction of the grid size

FF_SAT = 0.90
FF_MUSCLE = 0.08
FF_VISCERAL = 0.45
TEXTURE_SIGMA = 1.5


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class Sinusoid:
    """``amplitude * sin(2 pi p[along] / period + phase)`` added to component ``axis``."""

    axis: int
    along: int
    amplitude: float
    period: float
    phase: float = 0.0


@dataclass(frozen=True)
class DeformationSpec:
    """Ground-truth displacement ``t(p) = translation + A (p - c) + sum of sinusoids``.

    ``c`` is the grid center. The identity spec is the default.
    """

    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    affine: tuple = ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    sinusoids: tuple[Sinusoid, ...] = ()

    def displacement(self, coords: np.ndarray, center: np.ndarray) -> np.ndarray:
        a = np.asarray(self.affine, dtype=np.float64)
        out = np.asarray(self.translation, dtype=np.float64) + (coords - center) @ a.T
        for s in self.sinusoids:
            out[..., s.axis] += s.amplitude * np.sin(
                2 * np.pi * coords[..., s.along] / s.period + s.phase)
        return out

    def jacobian(self, coords: np.ndarray) -> np.ndarray:
        """Analytic ``I + grad t`` at every coordinate, shape ``(..., 3, 3)``."""
        jac = np.broadcast_to(np.eye(3) + np.asarray(self.affine, dtype=np.float64),
                              coords.shape[:-1] + (3, 3)).copy()
        for s in self.sinusoids:
            w = 2 * np.pi / s.period
            jac[..., s.axis, s.along] += s.amplitude * w * np.cos(
                w * coords[..., s.along] + s.phase)
        return jac

    def is_identity(self) -> bool:
        return (not any(self.translation) and not np.any(np.asarray(self.affine))
                and all(s.amplitude == 0 for s in self.sinusoids))


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 48, 48)
    seed: int = 0
    organ_count: int = 3
    deformation: DeformationSpec = field(default_factory=DeformationSpec)
    ambiguous: bool = False
    texture: float = 0.3


@dataclass(frozen=True)
class Phantom:
    stack: ChannelStack
    labels: LabelVolume


def _center(dims) -> np.ndarray:
    return (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0


def make_stack(ff: ScalarVolume, wf: ScalarVolume, sat=None, muscle=None,
               image_weight: float = 1.0, mask_weight: float = 0.6) -> ChannelStack:
    """Channel stack in the canonical order ff, wf, sat, muscle."""
    chans = [Channel("ff", ff, image_weight), Channel("wf", wf, image_weight)]
    if sat is not None:
        chans.append(Channel("sat", sat, mask_weight, is_mask=True))
    if muscle is not None:
        chans.append(Channel("muscle", muscle, mask_weight, is_mask=True))
    return ChannelStack(ff.meta, tuple(chans))


def stack_from_labels(ff: np.ndarray, labels: LabelVolume) -> ChannelStack:
    meta = labels.meta
    body = labels.labels != BACKGROUND
    wf = np.where(body, 1.0 - ff, 0.0)
    return make_stack(
        ScalarVolume(meta, np.where(body, ff, 0.0)), ScalarVolume(meta, wf),
        ScalarVolume(meta, (labels.labels == SAT).astype(np.float64)),
        ScalarVolume(meta, (labels.labels == MUSCLE).astype(np.float64)))


def make_reference(spec: PhantomSpec) -> Phantom:
    """Layered ellipsoid body; deterministic in ``spec.seed``."""
    dims = tuple(int(d) for d in spec.dims)
    if len(dims) != 3 or min(dims) < 8:
        raise PhantomError(f"phantom dims must be >= 8 per axis, got {dims}")
    if spec.organ_count < 0:
        raise PhantomError("organ_count must be >= 0")
    rng = np.random.default_rng(spec.seed)
    meta = GridMeta(dims)
    c = _center(dims)
    semi = BODY_EXTENT * np.asarray(dims, dtype=np.float64) * rng.uniform(0.95, 1.05, 3)
    p = voxel_grid(dims)
    r = np.sqrt((((p - c) / semi) ** 2).sum(axis=-1))

    labels = np.zeros(dims, np.uint8)
    ff = np.zeros(dims)
    labels[r < 1.0] = SAT
    labels[r < MUSCLE_RADIUS] = MUSCLE
    labels[r < VISCERAL_RADIUS] = VISCERAL
    ff[labels == SAT] = FF_SAT
    ff[labels == MUSCLE] = FF_SAT if spec.ambiguous else FF_MUSCLE
    ff[labels == VISCERAL] = FF_VISCERAL

    names = dict(LABEL_NAMES)
    organ_ff = np.linspace(0.15, 0.75, max(spec.organ_count, 1))
    rng.shuffle(organ_ff)
    inner = VISCERAL_RADIUS * semi
    for k in range(spec.organ_count):
        lab = FIRST_ORGAN + k
        # organs spread around the body axis so they do not stack on top of each other
        angle = 2 * np.pi * k / max(spec.organ_count, 1) + rng.uniform(-0.3, 0.3)
        offset = np.array([np.cos(angle), np.sin(angle), rng.uniform(-0.3, 0.3)])
        centre = c + 0.4 * inner * offset
        radii = inner * rng.uniform(0.4, 0.5, 3)
        ro = np.sqrt((((p - centre) / radii) ** 2).sum(axis=-1))
        inside = (ro < 1.0) & (labels == VISCERAL)
        labels[inside] = lab
        ff[inside] = organ_ff[k]
        names[lab] = f"organ_{k + 1}"
    if spec.texture > 0:
        noise = ndimage.gaussian_filter(rng.standard_normal(dims), TEXTURE_SIGMA, mode="wrap")
        noise *= spec.texture / noise.std()
        if spec.ambiguous:
            # keep the fat/muscle band flat so only the masks show its inner boundary
            noise[(labels == SAT) | (labels == MUSCLE)] = 0.0
        ff = np.clip(ff + noise, 0.0, 1.0)
    lv = LabelVolume(meta, labels, names)
    return Phantom(stack_from_labels(ff, lv), lv)


def truth_field(spec: DeformationSpec, meta: GridMeta) -> DisplacementField:
    return DisplacementField(meta, spec.displacement(voxel_grid(meta.dims), _center(meta.dims)))


def truth_jacobian(spec: DeformationSpec, meta: GridMeta) -> ScalarVolume:
    """Closed-form Jacobian determinant of ``p -> p + t(p)``."""
    return ScalarVolume(meta, np.linalg.det(spec.jacobian(voxel_grid(meta.dims))))


def invert_map(spec: DeformationSpec, targets: np.ndarray, center: np.ndarray,
               iterations: int = 30) -> np.ndarray:
    """Solve ``p + t(p) = q`` for every target ``q`` by Newton iteration."""
    p = targets - spec.displacement(targets, center)
    for _ in range(iterations):
        resid = p + spec.displacement(p, center) - targets
        if np.abs(resid).max() < 1e-10:
            break
        p = p - np.linalg.solve(spec.jacobian(p), resid[..., None])[..., 0]
    return p


def make_subject(reference: Phantom, spec: PhantomSpec):
    """Deform the reference; returns ``(stack, labels, truth)``.

    Intensities are resampled trilinearly and labels by nearest neighbor;
    mask channels are the indicators of the resampled labels.
    """
    meta = reference.labels.meta
    deform = spec.deformation
    if deform.is_identity():
        return reference.stack, reference.labels, DisplacementField.zeros(meta)
    q = voxel_grid(meta.dims)
    jd = np.linalg.det(deform.jacobian(q))
    if jd.min() <= 0:
        raise PhantomError("deformation is not invertible on the grid "
                           f"(min Jacobian determinant {jd.min():.3g})")
    src = invert_map(deform, q, _center(meta.dims))
    labels = LabelVolume(meta, nearest_array(reference.labels.labels, src).astype(np.uint8),
                         reference.labels.names)
    ref = {c.name: c.volume.values for c in reference.stack.channels}
    stack = make_stack(
        ScalarVolume(meta, trilinear_array(ref["ff"], src)),
        ScalarVolume(meta, trilinear_array(ref["wf"], src)),
        ScalarVolume(meta, (labels.labels == SAT).astype(np.float64)),
        ScalarVolume(meta, (labels.labels == MUSCLE).astype(np.float64)))
    return stack, labels, truth_field(deform, meta)


def random_deformation(seed: int, dims, amplitude: float = 2.0, period: float = 24.0,
                       translation: float = 1.0, n_waves: int = 3) -> DeformationSpec:
    """Smooth random warp: small translation plus axis-aligned waves.

    Each wave displaces along one axis and varies along the same axis, so
    it compresses and stretches tissue layers across that axis.
    """
    rng = np.random.default_rng(seed)
    waves = []
    for i in range(n_waves):
        axis = i % 3
        waves.append(Sinusoid(axis, axis, amplitude * rng.uniform(0.7, 1.0),
                              period * rng.uniform(0.9, 1.1), rng.uniform(0, 2 * np.pi)))
    shift = tuple(float(v) for v in rng.uniform(-translation, translation, 3))
    return DeformationSpec(translation=shift, sinusoids=tuple(waves))
