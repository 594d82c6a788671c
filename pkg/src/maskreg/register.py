"""Block-wise graph-cut registration over a Gaussian pyramid.

Each level is optimized by sweeps of binary block moves: for a block of
voxels every displacement either stays or gets one axis step added, and
the best combination is found exactly by min-cut. Blocks of one
checkerboard color share no pairwise terms, so they are solved
concurrently and the result does not depend on the worker count.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .energy import EnergyParams, normalize_channels, total_energy
from .mincut import NonSubmodularError, _solve_binary_core
from .pyramid import ChannelStack, build_pyramid, upsample_field
from .volgrid import DisplacementField, GridMismatchError

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RegistrationConfig:
    """Optimizer settings; defaults are the mask-supported parameter set."""

    pyramid_levels: int = 6
    pyramid_stop_level: int = 0
    block_size: tuple[int, int, int] = (12, 12, 12)
    block_energy_epsilon: float = 1e-7
    max_iteration_count: int = 100
    step_size: float = 0.5
    regularization_scale: float = 1.0
    regularization_exponent: float = 2.0
    regularization_weight: float = 0.1
    image_resampler: str = "gaussian"
    cost_function: str = "ssd"
    update_rule: str = "additive"
    image_normalization: bool = True
    image_weight: float = 1.0
    mask_weight: float = 0.6

    def __post_init__(self):
        bs = tuple(int(b) for b in self.block_size)
        object.__setattr__(self, "block_size", bs)
        if len(bs) != 3 or min(bs) < 2:
            raise ConfigError("block_size needs three entries >= 2")
        if self.pyramid_levels < 1:
            raise ConfigError("pyramid_levels must be >= 1")
        if not 0 <= self.pyramid_stop_level < self.pyramid_levels:
            raise ConfigError("pyramid_stop_level must lie in [0, pyramid_levels)")
        if not (self.step_size > 0 and math.isfinite(self.step_size)):
            raise ConfigError("step_size must be > 0")
        if not self.block_energy_epsilon > 0:
            raise ConfigError("block_energy_epsilon must be > 0")
        if self.max_iteration_count < 1:
            raise ConfigError("max_iteration_count must be >= 1")
        if self.image_resampler != "gaussian":
            raise ConfigError(f"unsupported image_resampler {self.image_resampler!r}")
        if self.cost_function != "ssd":
            raise ConfigError(f"unsupported cost_function {self.cost_function!r}")
        if self.update_rule != "additive":
            raise ConfigError(f"unsupported update_rule {self.update_rule!r}")
        if self.image_weight < 0 or self.mask_weight < 0:
            raise ConfigError("channel weights must be >= 0")
        try:
            self.energy_params
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def energy_params(self) -> EnergyParams:
        return EnergyParams(self.regularization_weight, self.regularization_scale,
                            self.regularization_exponent)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["block_size"] = list(self.block_size)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RegistrationConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "RegistrationConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)


def move_steps(step_size: float) -> np.ndarray:
    """The six axis-aligned steps, in sweep order +x, -x, +y, -y, +z, -z."""
    steps = np.zeros((6, 3))
    for axis in range(3):
        steps[2 * axis, axis] = step_size
        steps[2 * axis + 1, axis] = -step_size
    return steps


# ---------------------------------------------------------------------------
# numba kernels

@njit(cache=True, nogil=True, inline="always")
def _trilinear(vol, x, y, z):
    nx, ny, nz = vol.shape
    x = min(max(x, 0.0), nx - 1.0)
    y = min(max(y, 0.0), ny - 1.0)
    z = min(max(z, 0.0), nz - 1.0)
    i = min(int(math.floor(x)), max(nx - 2, 0))
    j = min(int(math.floor(y)), max(ny - 2, 0))
    k = min(int(math.floor(z)), max(nz - 2, 0))
    fx = x - i
    fy = y - j
    fz = z - k
    i1 = min(i + 1, nx - 1)
    j1 = min(j + 1, ny - 1)
    k1 = min(k + 1, nz - 1)
    c00 = vol[i, j, k] * (1.0 - fx) + vol[i1, j, k] * fx
    c10 = vol[i, j1, k] * (1.0 - fx) + vol[i1, j1, k] * fx
    c01 = vol[i, j, k1] * (1.0 - fx) + vol[i1, j, k1] * fx
    c11 = vol[i, j1, k1] * (1.0 - fx) + vol[i1, j1, k1] * fx
    c0 = c00 * (1.0 - fy) + c10 * fy
    c1 = c01 * (1.0 - fy) + c11 * fy
    return c0 * (1.0 - fz) + c1 * fz


@njit(cache=True, nogil=True)
def _data_cost(fixed, moving, weights, x, y, z, ux, uy, uz):
    total = 0.0
    for c in range(fixed.shape[0]):
        d = _trilinear(moving[c], x + ux, y + uy, z + uz) - fixed[c, x, y, z]
        total += weights[c] * d * d
    return total


@njit(cache=True, nogil=True, inline="always")
def _pw(ax, ay, az, bx, by, bz, reg_w, inv_s2, half_e):
    dx = ax - bx
    dy = ay - by
    dz = az - bz
    n2 = (dx * dx + dy * dy + dz * dz) * inv_s2
    if half_e == 1.0:
        return reg_w * n2
    return reg_w * n2 ** half_e


@njit(cache=True, nogil=True)
def _block_move(u, fixed, moving, weights, delta, reg_w, inv_s2, half_e, eps,
                x0, x1, y0, y1, z0, z1, stamp, pass_id):
    """One exact binary move on the block ``[x0,x1) x [y0,y1) x [z0,z1)``.

    Returns ``(accepted, energy_change, first_bad_edge)``; ``u`` and
    ``stamp`` are updated in place when the move is accepted.
    """
    nx, ny, nz = u.shape[0], u.shape[1], u.shape[2]
    bx = x1 - x0
    by = y1 - y0
    bz = z1 - z0
    n = bx * by * bz
    dx, dy, dz = delta[0], delta[1], delta[2]
    cost0 = np.empty(n)
    cost1 = np.empty(n)
    m_max = (bx - 1) * by * bz + bx * (by - 1) * bz + bx * by * (bz - 1)
    tails = np.empty(m_max, np.int64)
    heads = np.empty(m_max, np.int64)
    v00 = np.empty(m_max)
    v01 = np.empty(m_max)
    v10 = np.empty(m_max)
    v11 = np.empty(m_max)
    m = 0
    for kz in range(bz):
        z = z0 + kz
        for ky in range(by):
            y = y0 + ky
            for kx in range(bx):
                x = x0 + kx
                node = kx + bx * (ky + by * kz)
                ux = u[x, y, z, 0]
                uy = u[x, y, z, 1]
                uz = u[x, y, z, 2]
                c0 = _data_cost(fixed, moving, weights, x, y, z, ux, uy, uz)
                c1 = _data_cost(fixed, moving, weights, x, y, z, ux + dx, uy + dy, uz + dz)
                for nb in range(6):
                    qx = x
                    qy = y
                    qz = z
                    if nb == 0:
                        qx = x - 1
                    elif nb == 1:
                        qx = x + 1
                    elif nb == 2:
                        qy = y - 1
                    elif nb == 3:
                        qy = y + 1
                    elif nb == 4:
                        qz = z - 1
                    else:
                        qz = z + 1
                    if qx < 0 or qx >= nx or qy < 0 or qy >= ny or qz < 0 or qz >= nz:
                        continue
                    vx = u[qx, qy, qz, 0]
                    vy = u[qx, qy, qz, 1]
                    vz = u[qx, qy, qz, 2]
                    inside = x0 <= qx < x1 and y0 <= qy < y1 and z0 <= qz < z1
                    if not inside:
                        # neighbor outside the block is held fixed
                        c0 += _pw(ux, uy, uz, vx, vy, vz, reg_w, inv_s2, half_e)
                        c1 += _pw(ux + dx, uy + dy, uz + dz, vx, vy, vz,
                                  reg_w, inv_s2, half_e)
                    elif nb % 2 == 1:
                        tails[m] = node
                        heads[m] = (qx - x0) + bx * ((qy - y0) + by * (qz - z0))
                        v00[m] = _pw(ux, uy, uz, vx, vy, vz, reg_w, inv_s2, half_e)
                        v01[m] = _pw(ux, uy, uz, vx + dx, vy + dy, vz + dz,
                                     reg_w, inv_s2, half_e)
                        v10[m] = _pw(ux + dx, uy + dy, uz + dz, vx, vy, vz,
                                     reg_w, inv_s2, half_e)
                        v11[m] = _pw(ux + dx, uy + dy, uz + dz, vx + dx, vy + dy, vz + dz,
                                     reg_w, inv_s2, half_e)
                        m += 1
                cost0[node] = c0
                cost1[node] = c1
    labels, bad = _solve_binary_core(cost0, cost1, tails[:m], heads[:m],
                                     v00[:m], v01[:m], v10[:m], v11[:m])
    change = 0.0
    for i in range(n):
        if labels[i] == 1:
            change += cost1[i] - cost0[i]
    for e in range(m):
        lp = labels[tails[e]]
        lq = labels[heads[e]]
        if lp == 0 and lq == 1:
            change += v01[e] - v00[e]
        elif lp == 1 and lq == 0:
            change += v10[e] - v00[e]
        elif lp == 1 and lq == 1:
            change += v11[e] - v00[e]
    if change < -eps:
        for kz in range(bz):
            for ky in range(by):
                for kx in range(bx):
                    if labels[kx + bx * (ky + by * kz)] == 1:
                        x = x0 + kx
                        y = y0 + ky
                        z = z0 + kz
                        u[x, y, z, 0] += dx
                        u[x, y, z, 1] += dy
                        u[x, y, z, 2] += dz
                        stamp[x, y, z] = pass_id
        return True, change, bad
    return False, 0.0, bad


@njit(cache=True, nogil=True)
def _run_blocks(blocks, u, fixed, moving, weights, delta, reg_w, inv_s2, half_e, eps,
                stamp, last_reject, pass_id, accepted, changes, bad_edges):
    """Attempt a move on each block (rows ``x0 x1 y0 y1 z0 z1``).

    Blocks whose voxels and one-voxel halo are unchanged since their last
    rejected attempt are skipped: the same problem would be rejected again.
    """
    nx, ny, nz = stamp.shape
    for b in range(blocks.shape[0]):
        x0, x1, y0, y1, z0, z1 = blocks[b, 0], blocks[b, 1], blocks[b, 2], \
            blocks[b, 3], blocks[b, 4], blocks[b, 5]
        if last_reject[b] >= 0:
            newest = -1
            for z in range(max(z0 - 1, 0), min(z1 + 1, nz)):
                for y in range(max(y0 - 1, 0), min(y1 + 1, ny)):
                    for x in range(max(x0 - 1, 0), min(x1 + 1, nx)):
                        if stamp[x, y, z] > newest:
                            newest = stamp[x, y, z]
            if newest <= last_reject[b]:
                accepted[b] = False
                changes[b] = 0.0
                bad_edges[b] = -1
                continue
        ok, change, bad = _block_move(u, fixed, moving, weights, delta, reg_w, inv_s2,
                                      half_e, eps, x0, x1, y0, y1, z0, z1, stamp, pass_id)
        accepted[b] = ok
        changes[b] = change
        bad_edges[b] = bad
        if not ok:
            last_reject[b] = pass_id


# ---------------------------------------------------------------------------
# block layout

def block_layout(dims, block_size, phase: int):
    """Blocks of one phase split by checkerboard color.

    Phase 0 tiles from the origin, phase 1 is shifted by half a block.
    Border blocks are truncated. Returns two ``(K, 6)`` int64 arrays.
    """
    ranges = []
    for n, b in zip(dims, block_size):
        off = -(b // 2) if phase else 0
        starts = range(off, n, b)
        ranges.append([(max(s, 0), min(s + b, n)) for s in starts if min(s + b, n) > max(s, 0)])
    colors: list[list] = [[], []]
    for k, (z0, z1) in enumerate(ranges[2]):
        for j, (y0, y1) in enumerate(ranges[1]):
            for i, (x0, x1) in enumerate(ranges[0]):
                colors[(i + j + k) % 2].append((x0, x1, y0, y1, z0, z1))
    return [np.array(c, dtype=np.int64).reshape(-1, 6) for c in colors]


# ---------------------------------------------------------------------------
# drivers

@dataclass
class BlockMoveResult:
    accepted: bool
    energy_delta: float
    field: DisplacementField


def _stack_arrays(fixed: ChannelStack, moving: ChannelStack):
    if len(fixed.channels) != len(moving.channels):
        raise ValueError("channel count mismatch")
    if fixed.meta.dims != moving.meta.dims:
        raise GridMismatchError(f"grid mismatch: {fixed.meta.dims} vs {moving.meta.dims}")
    return (np.ascontiguousarray(fixed.data()), np.ascontiguousarray(moving.data()),
            np.ascontiguousarray(fixed.weights))


def block_move(field: DisplacementField, fixed: ChannelStack, moving: ChannelStack,
               params: EnergyParams, block, delta, epsilon: float = 1e-7) -> BlockMoveResult:
    """Solve one binary move on ``block = ((x0, x1), (y0, y1), (z0, z1))``."""
    fdata, mdata, weights = _stack_arrays(fixed, moving)
    if field.meta.dims != fixed.meta.dims:
        raise GridMismatchError("field is not on the fixed grid")
    (x0, x1), (y0, y1), (z0, z1) = block
    dims = field.meta.dims
    if not (0 <= x0 < x1 <= dims[0] and 0 <= y0 < y1 <= dims[1] and 0 <= z0 < z1 <= dims[2]):
        raise ValueError(f"block {block} lies outside the grid {dims}")
    u = field.vectors.copy()
    stamp = np.zeros(dims, np.int64)
    ok, change, bad = _block_move(
        u, fdata, mdata, weights, np.asarray(delta, dtype=np.float64),
        params.regularization_weight, 1.0 / params.regularization_scale ** 2,
        params.regularization_exponent / 2.0, epsilon, x0, x1, y0, y1, z0, z1, stamp, 1)
    if bad >= 0:
        raise NonSubmodularError("block move produced a non-submodular pairwise term")
    return BlockMoveResult(bool(ok), float(change), DisplacementField(field.meta, u))


@dataclass
class LevelReport:
    level: int
    dims: tuple[int, int, int]
    sweeps: int = 0
    accepted_moves: int = 0
    energy_trace: list[float] = field(default_factory=list)
    seconds: float = 0.0

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def register_level(field: DisplacementField, fixed: ChannelStack, moving: ChannelStack,
                   config: RegistrationConfig = RegistrationConfig(), level: int = 0,
                   workers: int = 1, report: LevelReport | None = None,
                   executor: ThreadPoolExecutor | None = None) -> DisplacementField:
    """Optimize the field on one pyramid level until a sweep accepts nothing.

    ``report.energy_trace`` receives the total energy before the first
    sweep and after every sweep.
    """
    fdata, mdata, weights = _stack_arrays(fixed, moving)
    if field.meta.dims != fixed.meta.dims:
        raise GridMismatchError("field is not on this level's grid")
    params = config.energy_params
    reg_w = params.regularization_weight
    inv_s2 = 1.0 / params.regularization_scale ** 2
    half_e = params.regularization_exponent / 2.0
    eps = config.block_energy_epsilon
    dims = field.meta.dims
    if report is None:
        report = LevelReport(level, dims)
    t0 = time.perf_counter()

    u = np.ascontiguousarray(field.vectors.copy())
    stamp = np.zeros(dims, np.int64)
    steps = move_steps(config.step_size)
    layout = [block_layout(dims, config.block_size, ph) for ph in (0, 1)]
    # last rejected pass per (move, phase, color, block)
    rejects = {(m, ph, col): np.full(len(layout[ph][col]), -1, np.int64)
               for m in range(6) for ph in (0, 1) for col in (0, 1)}
    report.energy_trace.append(total_energy(field, fixed, moving, params).total)

    own_pool = executor is None and workers > 1
    pool = ThreadPoolExecutor(workers) if own_pool else executor
    pass_id = 0
    try:
        for sweep in range(config.max_iteration_count):
            accepted_sweep = 0
            for m in range(6):
                for ph in (0, 1):
                    for col in (0, 1):
                        blocks = layout[ph][col]
                        if not len(blocks):
                            continue
                        pass_id += 1
                        last = rejects[(m, ph, col)]
                        acc = np.zeros(len(blocks), np.bool_)
                        chg = np.zeros(len(blocks))
                        bad = np.full(len(blocks), -1, np.int64)
                        args = (u, fdata, mdata, weights, steps[m], reg_w, inv_s2, half_e,
                                eps, stamp)
                        if pool is None or len(blocks) < 2:
                            _run_blocks(blocks, *args, last, pass_id, acc, chg, bad)
                        else:
                            chunks = np.array_split(np.arange(len(blocks)),
                                                    min(workers, len(blocks)))
                            futures = []
                            for idx in chunks:
                                sl = slice(int(idx[0]), int(idx[-1]) + 1)
                                futures.append(pool.submit(
                                    _run_blocks, blocks[sl], *args, last[sl], pass_id,
                                    acc[sl], chg[sl], bad[sl]))
                            for f in futures:
                                f.result()
                        if (bad >= 0).any():
                            raise NonSubmodularError(
                                "regularizer is not submodular for this move; "
                                "use regularization_exponent >= 1")
                        accepted_sweep += int(acc.sum())
            report.sweeps = sweep + 1
            report.accepted_moves += accepted_sweep
            current = DisplacementField(field.meta, u)
            report.energy_trace.append(total_energy(current, fixed, moving, params).total)
            log.debug("level %d sweep %d: %d moves, energy %.6g", level, sweep,
                      accepted_sweep, report.energy_trace[-1])
            if accepted_sweep == 0:
                break
    finally:
        if own_pool:
            pool.shutdown()
    report.seconds += time.perf_counter() - t0
    return DisplacementField(field.meta, u)


@dataclass
class RegistrationResult:
    field: DisplacementField
    levels: list[LevelReport]
    initial_energy: float
    final_energy: float
    seconds: float

    def summary(self) -> dict:
        return {
            "initial_energy": self.initial_energy,
            "final_energy": self.final_energy,
            "seconds": self.seconds,
            "levels": [lv.as_dict() for lv in self.levels],
        }


def prepare_stacks(fixed: ChannelStack, moving: ChannelStack, config: RegistrationConfig):
    """Check alignment, apply config channel weights and normalization."""
    if fixed.names != moving.names:
        raise ValueError(f"channel lists differ: {fixed.names} vs {moving.names}")
    if fixed.meta.dims != moving.meta.dims:
        raise GridMismatchError(f"grid mismatch: {fixed.meta.dims} vs {moving.meta.dims}")
    fixed = fixed.with_weights(config.image_weight, config.mask_weight)
    moving = moving.with_weights(config.image_weight, config.mask_weight)
    if config.image_normalization:
        fixed = normalize_channels(fixed)
        moving = normalize_channels(moving)
    return fixed, moving


def run_registration(fixed: ChannelStack, moving: ChannelStack,
                     config: RegistrationConfig = RegistrationConfig(),
                     workers: int = 1) -> RegistrationResult:
    """Full coarse-to-fine registration of ``moving`` onto ``fixed``.

    The returned field lives on the fixed grid; energies in the result
    are on the full-resolution normalized stacks.
    """
    t0 = time.perf_counter()
    fixed, moving = prepare_stacks(fixed, moving, config)
    fpyr = build_pyramid(fixed, config.pyramid_levels)
    mpyr = build_pyramid(moving, config.pyramid_levels)
    params = config.energy_params
    top = config.pyramid_levels - 1
    u = DisplacementField.zeros(fpyr[top].meta)
    reports = []
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for level in range(top, -1, -1):
            if level >= config.pyramid_stop_level:
                rep = LevelReport(level, fpyr[level].meta.dims)
                u = register_level(u, fpyr[level], mpyr[level], config, level,
                                   workers=workers, report=rep, executor=pool)
                reports.append(rep)
            if level > 0:
                u = upsample_field(u, fpyr[level - 1].meta)
    finally:
        if pool is not None:
            pool.shutdown()
    initial = total_energy(DisplacementField.zeros(fixed.meta), fixed, moving, params).total
    final = total_energy(u, fixed, moving, params).total
    return RegistrationResult(u, reports, initial, final, time.perf_counter() - t0)


def register(fixed: ChannelStack, moving: ChannelStack,
             config: RegistrationConfig = RegistrationConfig(),
             workers: int = 1) -> DisplacementField:
    return run_registration(fixed, moving, config, workers).field
