"""Evaluation statistics: overlap, surface distance, cohort maps, tests."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage, stats

from .volgrid import GridMismatchError, LabelVolume, ScalarVolume, check_same_grid

# sizes up to this use the exact signed-rank null distribution
WILCOXON_EXACT_MAX_N = 25
MIN_CORRELATION_N = 3


class EmptyLabelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# overlap

def dice(a: LabelVolume, b: LabelVolume, label: int) -> float | None:
    """Dice overlap of ``label`` in two label maps; None if both lack it."""
    check_same_grid(a.meta, b.meta)
    ma = a.labels == label
    mb = b.labels == label
    denom = int(ma.sum()) + int(mb.sum())
    if denom == 0:
        return None
    return 2.0 * int((ma & mb).sum()) / denom


def hausdorff(a: LabelVolume, b: LabelVolume, label: int) -> float:
    """Symmetric Hausdorff distance in mm between the voxel sets of ``label``.

    Exact Euclidean distance transforms give the distance from every voxel
    of one set to the nearest voxel of the other.
    """
    check_same_grid(a.meta, b.meta)
    ma = a.labels == label
    mb = b.labels == label
    if not ma.any() or not mb.any():
        raise EmptyLabelError(f"label {label} is empty in at least one volume")
    spacing = a.meta.spacing
    to_b = ndimage.distance_transform_edt(~mb, sampling=spacing)
    to_a = ndimage.distance_transform_edt(~ma, sampling=spacing)
    return float(max(to_b[ma].max(), to_a[mb].max()))


@dataclass
class DiceRow:
    subject: str
    label_id: int
    label_name: str
    dice: float


def dice_table(subject: str, reference: LabelVolume, warped: LabelVolume,
               labels: Iterable[int] | None = None) -> list[DiceRow]:
    ids = reference.foreground_ids() if labels is None else list(labels)
    rows = []
    for lab in ids:
        d = dice(reference, warped, lab)
        if d is not None:
            rows.append(DiceRow(subject, lab, reference.names.get(lab, f"label_{lab}"), d))
    return rows


def write_dice_table(rows: Sequence[DiceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "label_id", "label_name", "dice"])
        for r in rows:
            w.writerow([r.subject, r.label_id, r.label_name, repr(float(r.dice))])


def read_dice_table(path) -> list[DiceRow]:
    with open(path, newline="") as fh:
        return [DiceRow(r["subject"], int(r["label_id"]), r["label_name"], float(r["dice"]))
                for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# cohort maps

def lefm(reference: LabelVolume, warped: Iterable[LabelVolume]) -> tuple[ScalarVolume, int]:
    """Label error frequency map in percent, and the cohort size.

    Background counts as a label, so a subject labelled 0 where the
    reference has an organ (or vice versa) is an error.
    """
    errors = np.zeros(reference.meta.dims, np.int64)
    n = 0
    for lab in warped:
        check_same_grid(reference.meta, lab.meta)
        errors += lab.labels != reference.labels
        n += 1
    if n == 0:
        raise ValueError("LEFM needs at least one subject")
    return ScalarVolume(reference.meta, 100.0 * errors / n), n


class RunningMeanStd:
    """Welford accumulator for per-voxel mean and population std."""

    def __init__(self):
        self.n = 0
        self.meta = None
        self._mean = None
        self._m2 = None

    def add(self, vol: ScalarVolume) -> None:
        if self.meta is None:
            self.meta = vol.meta
            self._mean = np.zeros(vol.meta.dims)
            self._m2 = np.zeros(vol.meta.dims)
        else:
            check_same_grid(self.meta, vol.meta)
        self.n += 1
        x = vol.values
        delta = x - self._mean
        self._mean += delta / self.n
        self._m2 += delta * (x - self._mean)

    def result(self) -> tuple[ScalarVolume, ScalarVolume]:
        if self.n == 0:
            raise ValueError("no volumes were aggregated")
        std = np.sqrt(np.maximum(self._m2 / self.n, 0.0))
        return ScalarVolume(self.meta, self._mean.copy()), ScalarVolume(self.meta, std)


def aggregate_mean_std(volumes: Iterable[ScalarVolume]):
    """One-pass per-voxel mean and population standard deviation."""
    acc = RunningMeanStd()
    for v in volumes:
        acc.add(v)
    return acc.result()


# ---------------------------------------------------------------------------
# correlation

def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx = x - x.mean()
    dy = y - y.mean()
    return float((dx * dy).sum() / math.sqrt((dx * dx).sum() * (dy * dy).sum()))


def pearson_pvalue(r: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Two-sided p of the t test on r with n - 2 degrees of freedom; |r| = 1 gives 0."""
    r = np.asarray(r, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    out = np.zeros(np.broadcast(r, n).shape)
    ok = np.abs(r) < 1.0
    df = n[ok] - 2.0 if n.ndim else n - 2.0
    rr = r[ok]
    t = rr * np.sqrt(df) / np.sqrt(1.0 - rr * rr)
    out[ok] = 2.0 * stats.t.sf(np.abs(t), df)
    return out


@dataclass
class CorrelationMaps:
    r: ScalarVolume
    p: ScalarVolume
    n: ScalarVolume

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.r.values)


def correlate(covariate: Sequence[float], values: Iterable[ScalarVolume],
              include: Iterable[ScalarVolume]) -> CorrelationMaps:
    """Voxel-wise Pearson correlation of a subject covariate with a map.

    At each voxel only subjects whose inclusion volume (the warped FF) is
    non-zero contribute. Voxels with fewer than three such subjects, or
    no variance in either variable, are NaN in ``r`` and ``p``.
    Streams subjects in one pass with centered accumulators.
    """
    cov = np.asarray(covariate, dtype=np.float64)
    if not np.isfinite(cov).all():
        raise ValueError("covariate values must be finite")
    # center the covariate for numerical stability; r is shift invariant
    cov = cov - cov.mean() if len(cov) else cov
    meta = None
    n = sx = sy = sxx = syy = sxy = None
    count = 0
    for k, (vol, inc) in enumerate(itertools.zip_longest(values, include)):
        if vol is None or inc is None:
            raise ValueError("value and inclusion streams have different lengths")
        if k >= len(cov):
            raise ValueError("more subjects than covariate values")
        if meta is None:
            meta = vol.meta
            n = np.zeros(meta.dims)
            sx, sy, sxx, syy, sxy = (np.zeros(meta.dims) for _ in range(5))
        check_same_grid(meta, vol.meta)
        check_same_grid(meta, inc.meta)
        m = inc.values != 0
        x = cov[k]
        y = np.where(m, vol.values, 0.0)
        n += m
        sx += m * x
        sy += y
        sxx += m * x * x
        syy += y * y
        sxy += x * y
        count += 1
    if count != len(cov):
        raise ValueError(f"{len(cov)} covariate values but {count} subjects")
    if meta is None:
        raise ValueError("no subjects")
    with np.errstate(invalid="ignore", divide="ignore"):
        vx = sxx - sx * sx / n
        vy = syy - sy * sy / n
        cxy = sxy - sx * sy / n
        r = cxy / np.sqrt(vx * vy)
    scale_x = np.maximum(sxx, 1e-300)
    scale_y = np.maximum(syy, 1e-300)
    invalid = ((n < MIN_CORRELATION_N) | (vx <= 1e-12 * scale_x) | (vy <= 1e-12 * scale_y)
               | ~np.isfinite(r))
    r = np.clip(np.where(invalid, np.nan, r), -1.0, 1.0)
    p = np.full(meta.dims, np.nan)
    ok = ~invalid
    p[ok] = pearson_pvalue(r[ok], n[ok])
    return CorrelationMaps(ScalarVolume(meta, r, allow_nan=True),
                           ScalarVolume(meta, p, allow_nan=True),
                           ScalarVolume(meta, n))


def read_covariates(path) -> dict[str, float]:
    out: dict[str, float] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            sid = row["subject"]
            if sid in out:
                raise ValueError(f"duplicate subject {sid!r} in {path}")
            val = float(row["covariate"])
            if not math.isfinite(val):
                raise ValueError(f"non-finite covariate for {sid!r} in {path}")
            out[sid] = val
    return out


# ---------------------------------------------------------------------------
# paired testing

def _exact_signed_rank_counts(ranks2: np.ndarray) -> np.ndarray:
    """Number of sign patterns giving each value of 2 * W+ (ranks doubled to integers)."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in ranks2:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(differences: Sequence[float]) -> float:
    """Two-sided p of the Wilcoxon signed-rank test on paired differences.

    Zero differences are dropped and tied magnitudes get midranks. Up to
    25 non-zero differences the p is exact, from the null distribution
    over all sign assignments; beyond that a normal approximation with
    tie-corrected variance and continuity correction is used.
    """
    d = np.asarray(differences, dtype=np.float64)
    if d.size == 0:
        raise ValueError("no differences")
    d = d[d != 0]
    n = d.size
    if n == 0:
        return 1.0
    ranks = stats.rankdata(np.abs(d))
    w_plus = ranks[d > 0].sum()
    if n <= WILCOXON_EXACT_MAX_N:
        return _wilcoxon_exact(ranks, w_plus)
    return _wilcoxon_normal(ranks, w_plus)


def _wilcoxon_exact(ranks: np.ndarray, w_plus: float) -> float:
    ranks2 = np.rint(2 * ranks).astype(np.int64)
    counts = _exact_signed_rank_counts(ranks2)
    total = 2 ** len(ranks)
    mean2 = ranks2.sum() / 2.0
    obs2 = int(round(2 * w_plus))
    dev = abs(obs2 - mean2)
    values = np.arange(len(counts))
    extreme = np.abs(values - mean2) >= dev - 1e-9
    hits = int(sum(counts[extreme]))
    return min(1.0, hits / total)


def _wilcoxon_normal(ranks: np.ndarray, w_plus: float) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts ** 3 - tie_counts).sum() / 48.0
    if var <= 0:
        return 1.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2.0 * stats.norm.sf(z)))


def bonferroni(pvals: Sequence[float], m: int | None = None) -> list[float]:
    """Bonferroni-adjusted p-values ``min(1, m * p)``."""
    pvals = list(pvals)
    m = len(pvals) if m is None else int(m)
    if m < len(pvals):
        raise ValueError("m must be at least the number of tests")
    return [min(1.0, m * float(p)) for p in pvals]


@dataclass
class ComparisonRow:
    label_id: int
    label_name: str
    n: int
    mean_a: float
    mean_b: float
    p: float
    p_adjusted: float

    @property
    def significant(self) -> bool:
        return self.p_adjusted < 0.05


def compare_dice_tables(a: Sequence[DiceRow], b: Sequence[DiceRow]) -> list[ComparisonRow]:
    """Per-label paired signed-rank tests of table ``a`` against ``b``.

    Pairs are matched on subject id; adjustment is over the labels tested.
    """
    index_b = {(r.subject, r.label_id): r for r in b}
    labels: dict[int, str] = {}
    pairs: dict[int, list[tuple[float, float]]] = {}
    for r in a:
        other = index_b.get((r.subject, r.label_id))
        if other is None:
            continue
        labels[r.label_id] = r.label_name
        pairs.setdefault(r.label_id, []).append((r.dice, other.dice))
    ids = sorted(pairs)
    raw = [wilcoxon_signed_rank([x - y for x, y in pairs[i]]) for i in ids]
    adj = bonferroni(raw, len(ids)) if ids else []
    rows = []
    for i, p, pa in zip(ids, raw, adj):
        arr = np.array(pairs[i])
        rows.append(ComparisonRow(i, labels[i], len(arr), float(arr[:, 0].mean()),
                                  float(arr[:, 1].mean()), p, pa))
    return rows


def write_comparison(rows: Sequence[ComparisonRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label_id", "label_name", "n", "mean_a", "mean_b", "p", "p_bonferroni",
                    "significant"])
        for r in rows:
            w.writerow([r.label_id, r.label_name, r.n, repr(r.mean_a), repr(r.mean_b),
                        repr(r.p), repr(r.p_adjusted), int(r.significant)])
