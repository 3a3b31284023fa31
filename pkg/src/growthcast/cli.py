"""Command-line entry point: ``growthcast {gen,train-net,loocv,predict,report}``.

Exit status: 0 success, 1 usage error, 2 data or validation error,
3 numerical failure.  Log verbosity comes from ``GROWTHCAST_LOG``
(DEBUG, INFO, WARNING, ...; default INFO).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import RunConfig
from .convnet import TrainingDiverged, save_weights
from .growthsim import StabilityError, generate_cohort, load_cohort
from .learner import ConvergenceError
from .pipeline import (METRIC_NAMES, Summary, compute_metrics, group_pairs, group_patch_sets,
                       growth_zone, load_pipeline, predict_mask, run_loocv, train_group_net)
from .preprocess import normalize_suv
from .render import overlay_slice, tumor_slices, write_ppm
from .volume import load_mask, read_case, save_mask

log = logging.getLogger("growthcast")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration (flags override it)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--epochs", type=_positive_int, help="ConvNet epochs")
    p.add_argument("--max-train-patches", type=_positive_int, help="ConvNet patches per fold")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="growthcast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a phantom cohort")
    p.add_argument("--n", type=_positive_int, required=True, help="number of cases")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--dims", type=_positive_int, nargs=3, metavar=("NX", "NY", "NZ"))

    p = sub.add_parser("train-net", help="train the ConvNet on every pair of a cohort")
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="weight file")
    _add_run_options(p)

    p = sub.add_parser("loocv", help="leave-one-out cross-validation with reports")
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_run_options(p)
    p.add_argument("--skip-baseline", action="store_true")
    p.add_argument("--dump-patches", action="store_true")
    p.add_argument("--dump-features", action="store_true")
    p.add_argument("--postprocess", action="store_true", help="largest component + hole filling")
    p.add_argument("--jobs", type=_positive_int, help="folds run in parallel")

    p = sub.add_parser("predict", help="predict t3 from t2 with a saved pipeline")
    p.add_argument("--pipeline", type=Path, required=True, help="pipeline.json or its directory")
    p.add_argument("--case", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--interval", type=float, help="days ahead (default: the case's t2-t3 interval)")
    p.add_argument("--slices", type=int, nargs="*", help="z indices for overlays (default: 3 through the tumor)")

    p = sub.add_parser("report", help="summary table and overlays from a loocv output directory")
    p.add_argument("--results", type=Path, required=True)
    p.add_argument("--cohort", type=Path, help="cohort directory (default: the one recorded by loocv)")
    p.add_argument("--slices", type=int, nargs="*")
    p.add_argument("--out", type=Path, help="overlay directory (default: RESULTS/overlays)")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "epochs", None):
        cfg = cfg.with_overrides(train=replace(cfg.train, epochs=args.epochs))
    overrides = {
        "seed": getattr(args, "seed", None),
        "max_train_patches": getattr(args, "max_train_patches", None),
        "jobs": getattr(args, "jobs", None),
    }
    for flag in ("skip_baseline", "dump_patches", "dump_features", "postprocess"):
        if getattr(args, flag, False):
            overrides[flag] = True
    return cfg.with_overrides(**overrides)


# --------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = resolve_config(args)
    phantom = cfg.phantom
    if args.dims:
        phantom = type(phantom).from_dict({**phantom.to_dict(), "dims": tuple(args.dims)})
    cfg = cfg.with_overrides(phantom=phantom)
    manifest = generate_cohort(phantom, args.n, cfg.seed, args.out)
    cfg.save(args.out / "config.json")
    log.info("wrote %d cases to %s", len(manifest["cases"]), args.out)
    return EXIT_OK


def cmd_train_net(args) -> int:
    cfg = resolve_config(args)
    cohort = load_cohort(args.cohort)
    sets = group_patch_sets(group_pairs(cohort, cfg.align), cfg)
    net, history, n = train_group_net(sets, cfg)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    digest = save_weights(net, args.out)
    cfg.save(args.out.with_suffix(".config.json"))
    args.out.with_suffix(".history.json").write_text(json.dumps({
        "best_epoch": history.best_epoch,
        "n_patches": n,
        "val_losses": history.val_losses,
    }, indent=2) + "\n")
    log.info("trained on %d patches, best epoch %d, sha256 %s", n, history.best_epoch, digest)
    return EXIT_OK


def cmd_loocv(args) -> int:
    cfg = resolve_config(args)
    cohort = load_cohort(args.cohort)
    args.out.mkdir(parents=True, exist_ok=True)
    cfg.save(args.out / "config.json")
    (args.out / "run.json").write_text(json.dumps({"cohort": str(args.cohort.resolve())}, indent=2) + "\n")
    report = run_loocv(cohort, cfg, args.out)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _write_overlays(out_dir: Path, gt, pred, background, slices, prefix: str) -> list:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for z in slices:
        path = out_dir / f"{prefix}_z{z:03d}.ppm"
        write_ppm(path, overlay_slice(gt, pred, z, background))
        written.append(path)
    return written


def cmd_predict(args) -> int:
    pipeline = load_pipeline(args.pipeline)
    case = read_case(args.case)
    t2, t3 = case.studies[1], case.studies[2]
    interval = args.interval if args.interval is not None else case.intervals[1]
    pred = predict_mask(pipeline, t2, case.clinical, interval)
    args.out.mkdir(parents=True, exist_ok=True)
    save_mask(pred, args.out / "pred_t3_mask")
    _, metrics = compute_metrics(pred, t3.mask, growth_zone(t2.mask, pipeline.zone))
    (args.out / "metrics.json").write_text(json.dumps(dict(zip(METRIC_NAMES, metrics.as_tuple())), indent=2) + "\n")
    slices = args.slices if args.slices is not None else tumor_slices(t3.mask.data)
    _write_overlays(args.out, t3.mask.data, pred.data, normalize_suv(t2.suv.data), slices, case.patient_id)
    log.info("%s: dice %.2f rvd %.2f", case.patient_id, metrics.dice, metrics.rvd)
    return EXIT_OK


def summary_table(csv_path: Path) -> str:
    """Table-1-style summary rebuilt from the per-fold rows of ``report.csv``."""
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    folds = [r for r in rows if r["fold"].isdigit()]
    if not folds:
        raise ValueError(f"{csv_path}: no fold rows")
    labels = (("baseline", "RD baseline"), ("learned", "Group learning"), ("identity", "Identity (t2)"))
    lines = [f"{len(folds)} folds; mean±std [min, max]",
             "Method".ljust(16) + "".join(m.capitalize().ljust(30) for m in METRIC_NAMES)]
    for key, label in labels:
        if f"{key}_dice" not in folds[0]:
            continue
        cells = [Summary.of([float(r[f"{key}_{m}"]) for r in folds]).format() for m in METRIC_NAMES]
        lines.append(label.ljust(16) + "".join(c.ljust(30) for c in cells).rstrip())
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    results = args.results
    csv_path = results / "report.csv"
    if not csv_path.exists():
        raise FileNotFoundError(f"{csv_path} not found; run 'growthcast loocv' first")
    table = summary_table(csv_path)
    (results / "summary.txt").write_text(table)
    sys.stdout.write(table)
    cohort_dir = args.cohort
    if cohort_dir is None and (results / "run.json").exists():
        cohort_dir = Path(json.loads((results / "run.json").read_text())["cohort"])
    if cohort_dir is None:
        log.warning("no cohort directory: overlays skipped")
        return EXIT_OK
    out = args.out or results / "overlays"
    with open(csv_path, newline="") as fh:
        folds = [r for r in csv.DictReader(fh) if r["fold"].isdigit()]
    for row in folds:
        case = read_case(cohort_dir / row["patient_id"])
        pred = load_mask(results / f"fold{int(row['fold']):02d}" / "pred_t3_mask")
        gt = case.studies[2].mask
        slices = args.slices if args.slices is not None else tumor_slices(gt.data)
        _write_overlays(out, gt.data, pred.data, normalize_suv(case.studies[1].suv.data), slices,
                        row["patient_id"])
    log.info("overlays written to %s", out)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train-net": cmd_train_net, "loocv": cmd_loocv, "predict": cmd_predict,
            "report": cmd_report}


def _exit_code(exc: BaseException) -> int:
    """3 for numerical failures (also when wrapped by a fold error), 2 otherwise."""
    while exc is not None:
        if isinstance(exc, (TrainingDiverged, ConvergenceError, StabilityError, FloatingPointError,
                            np.linalg.LinAlgError)):
            return EXIT_NUMERIC
        exc = exc.__cause__
    return EXIT_DATA


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("GROWTHCAST_LOG", "INFO").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        code = _exit_code(exc)
        print(f"growthcast {args.command}: error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return code


if __name__ == "__main__":
    sys.exit(main())
