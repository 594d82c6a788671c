"""Command-line front end: ``maskreg <subcommand> ...``.

Every subcommand writes ``<command>_summary.json`` into ``--out``. Failures
exit with status 2 after printing one JSON error record to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import cohortstats as cs
from . import phantom as ph
from .energy import total_energy
from .pyramid import ChannelStack
from .register import ConfigError, RegistrationConfig, prepare_stacks, run_registration
from .volgrid import (DisplacementField, GridMismatchError, LabelVolume, MetaImageError,
                      ScalarVolume, read_field, read_labels, read_scalar, read_volume,
                      write_volume)
from .warp import folding_count, jacobian_determinant, warp_labels, warp_scalar

log = logging.getLogger("maskreg")

CHANNELS = ("ff", "wf", "sat", "muscle")
REGULARIZATION_SWEEP = tuple(float(v) for v in np.linspace(0.05, 0.5, 10))
MASK_WEIGHT_SWEEP = tuple(float(v) for v in np.linspace(0.2, 8.0, 8))
SUFFIXES = ("_labels_warped", "_ff_warped", "_labels", "_field", "_jd")


class CliError(Exception):
    """Invalid invocation or inputs; reported as a one-line error record."""


# ---------------------------------------------------------------------------
# manifest

@dataclass(frozen=True)
class SubjectEntry:
    subject: str
    channels: tuple[Path, ...]
    labels: Path | None


@dataclass(frozen=True)
class RunManifest:
    """Reference and subject inputs of a cohort run.

    CSV columns: ``role,subject,ff,wf,sat,muscle,labels`` with exactly one
    ``reference`` row; relative paths resolve against the manifest folder.
    """

    reference: SubjectEntry
    subjects: tuple[SubjectEntry, ...]

    @classmethod
    def read(cls, path) -> "RunManifest":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"no such manifest: {path}")
        base = path.parent
        ref = None
        subjects = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"role", "subject", "ff", "wf", "labels"} - set(reader.fieldnames or ())
            if missing:
                raise CliError(f"{path}: missing columns {sorted(missing)}")
            for row in reader:
                chans = tuple(base / row[c] for c in CHANNELS if row.get(c))
                labels = base / row["labels"] if row.get("labels") else None
                entry = SubjectEntry(row["subject"], chans, labels)
                if row["role"] == "reference":
                    if ref is not None:
                        raise CliError(f"{path}: more than one reference row")
                    ref = entry
                elif row["role"] == "subject":
                    subjects.append(entry)
                else:
                    raise CliError(f"{path}: unknown role {row['role']!r}")
        if ref is None:
            raise CliError(f"{path}: no reference row")
        ids = [s.subject for s in subjects]
        if len(set(ids)) != len(ids):
            raise CliError(f"{path}: subject ids are not unique")
        out = cls(ref, tuple(subjects))
        out.check_files()
        return out

    def check_files(self) -> None:
        for entry in (self.reference,) + self.subjects:
            for p in entry.channels + ((entry.labels,) if entry.labels else ()):
                if not p.is_file():
                    raise FileNotFoundError(f"manifest entry {entry.subject!r}: no such file {p}")

    def write(self, path) -> None:
        base = Path(path).parent
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("role", "subject") + CHANNELS + ("labels",))
            for role, entry in [("reference", self.reference)] + [("subject", s) for s in
                                                                  self.subjects]:
                chans = [_rel(p, base) for p in entry.channels]
                chans += [""] * (len(CHANNELS) - len(chans))
                w.writerow([role, entry.subject] + chans
                           + [_rel(entry.labels, base) if entry.labels else ""])


def _rel(p: Path, base: Path) -> str:
    try:
        return str(Path(p).relative_to(base))
    except ValueError:
        return str(p)


# ---------------------------------------------------------------------------
# helpers

def load_stack(paths: Sequence, no_masks: bool = False,
               config: RegistrationConfig = RegistrationConfig()) -> ChannelStack:
    """Stack from ``ff,wf[,sat,muscle]`` files; masks are dropped with ``no_masks``."""
    paths = [Path(p) for p in paths]
    if len(paths) not in (2, 4):
        raise CliError(f"expected 2 or 4 channel files (ff,wf[,sat,muscle]), got {len(paths)}")
    vols = [read_scalar(p) for p in paths]
    if no_masks:
        vols = vols[:2]
    return ph.make_stack(*vols, image_weight=config.image_weight, mask_weight=config.mask_weight)


def _split(arg: str | None) -> list[str]:
    return [s for s in arg.split(",") if s] if arg else []


def _load_config(path) -> RegistrationConfig:
    if path is None:
        return RegistrationConfig()
    if not Path(path).is_file():
        raise FileNotFoundError(f"no such config file: {path}")
    return RegistrationConfig.from_json(path)


def subject_of(path) -> str:
    """Subject id from an output file name such as ``s01_labels_warped.mha``."""
    stem = Path(path).name.removesuffix(".mha")
    for suf in SUFFIXES:
        if stem.endswith(suf):
            return stem[: -len(suf)]
    return stem


def quantize(field: DisplacementField) -> DisplacementField:
    """Round a field to the float32 values it will have on disk."""
    return DisplacementField(field.meta, field.vectors.astype(np.float32).astype(np.float64))


def _write_summary(out: Path, command: str, payload: dict, started: float) -> Path:
    payload = {"command": command, **payload,
               "seconds": time.perf_counter() - started,
               "finished": time.strftime("%Y-%m-%dT%H:%M:%S")}
    path = out / f"{command}_summary.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (Path,)):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def register_subject(subject: str, reference: ChannelStack, moving: ChannelStack,
                     moving_labels: LabelVolume | None, config: RegistrationConfig, out: Path,
                     workers: int = 1, reference_labels: LabelVolume | None = None) -> dict:
    """Register one subject and write its field, warped FF, warped labels and JD."""
    res = run_registration(reference, moving, config, workers)
    field = quantize(res.field)
    fixed_n, moving_n = prepare_stacks(reference, moving, config)
    final = total_energy(field, fixed_n, moving_n, config.energy_params)
    write_volume(field, out / f"{subject}_field.mha")
    ff = next(c.volume for c in moving.channels if c.name == "ff")
    write_volume(warp_scalar(ff, field), out / f"{subject}_ff_warped.mha")
    jd = jacobian_determinant(field)
    write_volume(jd, out / f"{subject}_jd.mha")
    record = {
        "subject": subject,
        "initial_energy": res.initial_energy,
        "final_energy": final.total,
        "data_term": final.data_term,
        "regularization_term": final.regularization_term,
        "registration_seconds": res.seconds,
        "levels": [lv.as_dict() for lv in res.levels],
        "folding_voxels": folding_count(jd),
    }
    if moving_labels is not None:
        warped = warp_labels(moving_labels, field)
        write_volume(warped, out / f"{subject}_labels_warped.mha")
        if reference_labels is not None:
            rows = cs.dice_table(subject, reference_labels, warped)
            record["dice"] = {r.label_id: r.dice for r in rows}
            record["hausdorff"] = _hausdorffs(reference_labels, warped)
    return record


def _hausdorffs(reference: LabelVolume, warped: LabelVolume) -> dict[int, float]:
    out = {}
    for lab in reference.foreground_ids():
        try:
            out[lab] = cs.hausdorff(reference, warped, lab)
        except cs.EmptyLabelError:
            out[lab] = float("inf")
    return out


def _cohort_register(manifest: RunManifest, config: RegistrationConfig, out: Path,
                     workers: int, no_masks: bool) -> tuple[list[dict], list[cs.DiceRow]]:
    ref = manifest.reference
    ref_stack = load_stack(ref.channels, no_masks, config)
    ref_labels = read_labels(ref.labels) if ref.labels else None
    records, rows = [], []
    for s in manifest.subjects:
        moving = load_stack(s.channels, no_masks, config)
        mlabels = read_labels(s.labels) if s.labels else None
        log.info("registering %s", s.subject)
        rec = register_subject(s.subject, ref_stack, moving, mlabels, config, out, workers,
                               ref_labels)
        records.append(rec)
        if ref_labels is not None and mlabels is not None:
            warped = read_labels(out / f"{s.subject}_labels_warped.mha")
            rows.extend(cs.dice_table(s.subject, ref_labels, warped))
    if rows:
        cs.write_dice_table(rows, out / "dice.csv")
    return records, rows


# ---------------------------------------------------------------------------
# subcommands

def cmd_register(args) -> dict:
    config = _load_config(args.config)
    out = args.out
    if args.manifest:
        manifest = RunManifest.read(args.manifest)
        records, _ = _cohort_register(manifest, config, out, args.workers, args.no_masks)
    else:
        ref_paths, mov_paths = _split(args.reference_channels), _split(args.moving_channels)
        if not ref_paths or not mov_paths:
            raise CliError("register needs --manifest or both --reference-channels "
                           "and --moving-channels")
        fixed = load_stack(ref_paths, args.no_masks, config)
        moving = load_stack(mov_paths, args.no_masks, config)
        mlabels = read_labels(args.labels) if args.labels else None
        rlabels = read_labels(args.reference_labels) if args.reference_labels else None
        records = [register_subject(args.subject, fixed, moving, mlabels, config, out,
                                    args.workers, rlabels)]
    return {"config": config.to_dict(), "no_masks": args.no_masks, "subjects": records}


def cmd_warp(args) -> dict:
    field = read_field(args.field)
    written = []
    for p in args.volumes:
        vol = read_volume(p)
        if isinstance(vol, LabelVolume):
            warped = warp_labels(vol, field)
        elif isinstance(vol, ScalarVolume):
            warped = warp_scalar(vol, field)
        else:
            raise CliError(f"{p}: cannot warp a displacement field")
        dest = args.out / f"{Path(p).name.removesuffix('.mha')}_warped.mha"
        write_volume(warped, dest)
        written.append(str(dest))
    return {"field": str(args.field), "outputs": written}


def cmd_jacobian(args) -> dict:
    results = []
    for p in args.fields:
        jd = jacobian_determinant(read_field(p))
        dest = args.out / f"{subject_of(p)}_jd.mha"
        write_volume(jd, dest)
        results.append({"field": str(p), "output": str(dest),
                        "min": float(jd.values.min()), "max": float(jd.values.max()),
                        "folding_voxels": folding_count(jd)})
    return {"fields": results}


def cmd_dice(args) -> dict:
    if not args.labels:
        raise CliError("dice needs --labels <reference label map>")
    ref = read_labels(args.labels)
    rows = []
    hd = {}
    for p in args.warped:
        sid = subject_of(p)
        warped = read_labels(p)
        rows.extend(cs.dice_table(sid, ref, warped))
        hd[sid] = _hausdorffs(ref, warped)
    dest = args.out / "dice.csv"
    cs.write_dice_table(rows, dest)
    return {"reference": str(args.labels), "output": str(dest), "hausdorff_mm": hd,
            "mean_dice": float(np.mean([r.dice for r in rows])) if rows else None}


def cmd_lefm(args) -> dict:
    if not args.labels:
        raise CliError("lefm needs --labels <reference label map>")
    ref = read_labels(args.labels)
    vol, n = cs.lefm(ref, (read_labels(p) for p in args.warped))
    dest = args.out / "lefm.mha"
    write_volume(vol, dest)
    return {"reference": str(args.labels), "subjects": n, "output": str(dest),
            "mean_lefm": float(vol.values.mean())}


def cmd_aggregate(args) -> dict:
    mean, std = cs.aggregate_mean_std(read_scalar(p) for p in args.volumes)
    write_volume(mean, args.out / f"{args.name}_mean.mha")
    write_volume(std, args.out / f"{args.name}_std.mha")
    return {"inputs": [str(p) for p in args.volumes],
            "outputs": [str(args.out / f"{args.name}_{k}.mha") for k in ("mean", "std")]}


def cmd_correlate(args) -> dict:
    if not args.covariates:
        raise CliError("correlate needs --covariates <csv>")
    covariates = cs.read_covariates(args.covariates)
    values = [Path(p) for p in args.volumes]
    include = [Path(p) for p in _split(args.include)] if args.include else None
    if include is not None and len(include) != len(values):
        raise CliError("--include needs one inclusion volume per input volume")
    sids = [subject_of(p) for p in values]
    missing = [s for s in sids if s not in covariates]
    if missing:
        raise CliError(f"no covariate for subjects {missing}")
    if include is None:
        include = values
    maps = cs.correlate([covariates[s] for s in sids], (read_scalar(p) for p in values),
                        (read_scalar(p) for p in include))
    write_volume(maps.r, args.out / f"{args.name}_r.mha")
    write_volume(maps.p, args.out / f"{args.name}_p.mha")
    write_volume(maps.n, args.out / f"{args.name}_n.mha")
    return {"subjects": sids, "valid_voxels": int(maps.valid.sum())}


def cmd_compare(args) -> dict:
    a = cs.read_dice_table(args.table_a)
    b = cs.read_dice_table(args.table_b)
    rows = cs.compare_dice_tables(a, b)
    dest = args.out / "comparison.csv"
    cs.write_comparison(rows, dest)
    return {"table_a": str(args.table_a), "table_b": str(args.table_b), "output": str(dest),
            "significant_labels": [r.label_id for r in rows if r.significant]}


def cmd_sweep(args) -> dict:
    if not args.manifest:
        raise CliError("sweep needs --manifest")
    base = _load_config(args.config)
    manifest = RunManifest.read(args.manifest)
    values = ([float(v) for v in _split(args.values)] if args.values else
              list(REGULARIZATION_SWEEP if args.parameter == "regularization_weight"
                   else MASK_WEIGHT_SWEEP))
    settings = []
    table = []
    for i, v in enumerate(values):
        try:
            config = replace(base, **{args.parameter: v})
        except ConfigError as exc:
            raise CliError(f"invalid {args.parameter}={v}: {exc}") from None
        run_dir = args.out / f"{args.parameter}_{i:02d}"
        run_dir.mkdir(parents=True, exist_ok=True)
        records, rows = _cohort_register(manifest, config, run_dir, args.workers, args.no_masks)
        hd = [h for rec in records for h in rec.get("hausdorff", {}).values()]
        mean_dice = float(np.mean([r.dice for r in rows])) if rows else float("nan")
        mean_hd = float(np.mean(hd)) if hd else float("nan")
        table.append((args.parameter, v, mean_dice, mean_hd, run_dir.name))
        settings.append({"value": v, "run": run_dir.name, "mean_dice": mean_dice,
                         "mean_hausdorff_mm": mean_hd, "subjects": records})
    dest = args.out / "sweep.csv"
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "value", "mean_dice", "mean_hausdorff_mm", "run"])
        for row in table:
            w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), row[4]])
    best = max(settings, key=lambda s: s["mean_dice"]) if settings else None
    return {"config": base.to_dict(), "parameter": args.parameter, "settings": settings,
            "best": None if best is None else {"value": best["value"], "run": best["run"],
                                               "mean_dice": best["mean_dice"]}}


def cmd_phantom(args) -> dict:
    dims = tuple(int(v) for v in _split(args.dims))
    if len(dims) != 3:
        raise CliError("--dims needs three comma-separated sizes")
    out = args.out
    rspec = ph.PhantomSpec(dims=dims, seed=args.seed, organ_count=args.organs,
                           ambiguous=args.ambiguous)
    ref = ph.make_reference(rspec)
    rng = np.random.default_rng(args.seed)

    def dump(prefix: str, stack: ChannelStack, labels: LabelVolume) -> SubjectEntry:
        paths = []
        for c in stack.channels:
            p = out / f"{prefix}_{c.name}.mha"
            write_volume(c.volume, p)
            paths.append(p)
        lp = out / f"{prefix}_labels.mha"
        write_volume(labels, lp)
        return SubjectEntry(prefix, tuple(paths), lp)

    reference = dump("reference", ref.stack, ref.labels)
    subjects = []
    covariates = []
    for k in range(args.subjects):
        sid = f"s{k + 1:02d}"
        deform = ph.random_deformation(args.seed * 1000 + k, dims, amplitude=args.amplitude,
                                       period=args.period)
        stack, labels, truth = ph.make_subject(ref, replace(rspec, deformation=deform))
        subjects.append(dump(sid, stack, labels))
        write_volume(truth, out / f"{sid}_truth.mha")
        covariates.append((sid, float(rng.uniform(40, 70))))
    manifest = RunManifest(reference, tuple(subjects))
    manifest.write(out / "manifest.csv")
    with open(out / "covariates.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "covariate"])
        for sid, v in covariates:
            w.writerow([sid, repr(v)])
    return {"dims": dims, "seed": args.seed, "subjects": [s.subject for s in subjects],
            "ambiguous": args.ambiguous, "manifest": str(out / "manifest.csv")}


COMMANDS = {
    "register": cmd_register, "warp": cmd_warp, "jacobian": cmd_jacobian, "dice": cmd_dice,
    "lefm": cmd_lefm, "aggregate": cmd_aggregate, "correlate": cmd_correlate,
    "compare": cmd_compare, "sweep": cmd_sweep, "phantom": cmd_phantom,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskreg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_, *, config=False, workers=False, masks=False):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out", type=Path, required=True, help="output directory")
        if config:
            p.add_argument("--config", help="JSON registration config")
        if workers:
            p.add_argument("--workers", type=int, default=1)
        if masks:
            p.add_argument("--no-masks", action="store_true",
                           help="drop the sat/muscle channels (intensity-only baseline)")
        return p

    p = add("register", "register subjects to the reference", config=True, workers=True,
            masks=True)
    p.add_argument("--manifest")
    p.add_argument("--reference-channels", help="ff,wf[,sat,muscle] files of the reference")
    p.add_argument("--moving-channels", help="ff,wf[,sat,muscle] files of the subject")
    p.add_argument("--labels", help="subject label map, warped into reference space")
    p.add_argument("--reference-labels", help="reference label map for Dice/Hausdorff")
    p.add_argument("--subject", default="subject")

    p = add("warp", "warp volumes or label maps with a field")
    p.add_argument("--field", required=True)
    p.add_argument("volumes", nargs="+")

    p = add("jacobian", "Jacobian determinant maps of displacement fields")
    p.add_argument("fields", nargs="+")

    for name, help_ in (("dice", "Dice table of warped label maps"),
                        ("lefm", "label error frequency map")):
        p = add(name, help_)
        p.add_argument("--labels", help="reference label map")
        p.add_argument("warped", nargs="+", help="<subject>_labels_warped.mha files")

    p = add("aggregate", "voxel-wise mean and std of scalar maps")
    p.add_argument("--name", default="aggregate")
    p.add_argument("volumes", nargs="+")

    p = add("correlate", "voxel-wise Pearson correlation with a covariate")
    p.add_argument("--covariates")
    p.add_argument("--include", help="comma-separated inclusion volumes (warped FF)")
    p.add_argument("--name", default="correlation")
    p.add_argument("volumes", nargs="+")

    p = add("compare", "paired Wilcoxon tests between two Dice tables")
    p.add_argument("table_a")
    p.add_argument("table_b")

    p = add("sweep", "re-run registration across a parameter grid", config=True,
            workers=True, masks=True)
    p.add_argument("--manifest")
    p.add_argument("--parameter", choices=("regularization_weight", "mask_weight"),
                   default="regularization_weight")
    p.add_argument("--values", help="comma-separated values instead of the default grid")

    p = add("phantom", "write a synthetic reference, subjects and manifest")
    p.add_argument("--dims", default="64,48,48")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects", type=int, default=4)
    p.add_argument("--organs", type=int, default=3)
    p.add_argument("--amplitude", type=float, default=2.0)
    p.add_argument("--period", type=float, default=24.0)
    p.add_argument("--ambiguous", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    started = time.perf_counter()
    try:
        if getattr(args, "workers", 1) < 1:
            raise CliError("--workers must be >= 1")
        args.out.mkdir(parents=True, exist_ok=True)
        payload = COMMANDS[args.command](args)
        _write_summary(args.out, args.command, payload, started)
    except (CliError, ConfigError, FileNotFoundError, MetaImageError, GridMismatchError,
            ph.PhantomError, ValueError) as exc:
        record = {"error": type(exc).__name__, "command": args.command, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
