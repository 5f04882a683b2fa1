"""Command-line frontend: measure, evaluate, agree, loss, batch.

Exit codes: 0 success, 1 usage, 2 I/O, 3 file format, 4 validation,
5 partial batch failure.  Defaults for any long option can be supplied in a
JSON file named by the ``TUMORBURDEN_CONFIG`` environment variable; explicit
command-line values override it.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .agreement import (
    AGGREGATES,
    AgreementReport,
    RatingsFormatError,
    RatingsMatrix,
    aggregate_ratings,
    bland_altman,
    icc_2_1,
    read_ratings_csv,
    spearman,
)
from .loss import CLASSES, confidence_weighted_loss, parse_confidences
from .metrics import MaskMismatchError, evaluate
from .nifti import NiftiError, VolumeMismatchError, read_label_volume, read_probability_volume, write_float_volume
from .postprocess import MODES, prune_unsupported_et
from .rano import ALGORITHMS, measure as rano_measure
from .report import (
    MeasurementReport,
    ReportMeta,
    render_csv,
    render_json,
    stamp_write,
    summary_stats,
    write_report,
    write_summary,
    csv_rows,
    to_document,
)
from .segments import RanoParams
from .volume import DEFAULT_LABELS, class_mask, parse_label_map, volume_mm3

log = logging.getLogger("tumorburden")

CONFIG_ENV = "TUMORBURDEN_CONFIG"
EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_VALIDATION, EXIT_PARTIAL = range(6)
METRIC_NAMES = ("dice", "iou", "h95_mm", "sensitivity", "specificity")
STATS = ("icc", "spearman", "bland-altman")


class UsageError(Exception):
    pass


class ManifestError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (NiftiError, RatingsFormatError, ManifestError, json.JSONDecodeError)):
        return EXIT_FORMAT
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (VolumeMismatchError, MaskMismatchError, ValueError, KeyError)):
        return EXIT_VALIDATION
    raise exc


def _error_kind(code: int) -> str:
    return {EXIT_USAGE: "usage", EXIT_IO: "io", EXIT_FORMAT: "format", EXIT_VALIDATION: "validation"}[code]


# ---------------------------------------------------------------- parsing


def _common(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("common options")
    g.add_argument("--labels", default=None, help="label mapping, e.g. et=1,ed=2,cavity=3")
    g.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    g.add_argument("--format", choices=("json", "csv"), default="json", help="report format")
    g.add_argument("-o", "--out", default=None, help="output path (directory for batch); stdout if omitted")
    g.add_argument("--figures", default=None, metavar="DIR", help="render PNG figures into DIR")
    g.add_argument("-v", "--verbose", action="store_true")


def _rano_options(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("RANO options")
    g.add_argument("--algorithm", choices=ALGORITHMS + ("both",), default="diameters")
    g.add_argument("--min-diameter", type=float, default=10.0, help="minimum diameter in mm (default 10)")
    g.add_argument("--angle-tolerance", type=float, default=5.0, help="perpendicularity tolerance in degrees")
    g.add_argument("--max-lesions", type=int, default=5, help="number of largest products summed")
    g.add_argument("--connectivity", type=int, choices=(6, 18, 26), default=26, help="3D lesion connectivity")
    g.add_argument("--inscription-step", type=float, default=None, help="sampling step in mm")
    g.add_argument("--postprocess", nargs="?", const="component", default=None, choices=MODES,
                   help="drop ET not adjacent to ED (component or voxel mode)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tumorburden", description="Tumor-burden measurements and evaluation statistics.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("measure", help="volumes and RANO of a label volume")
    p.add_argument("seg")
    p.add_argument("--patient-id", default=None)
    _rano_options(p)
    _common(p)

    p = sub.add_parser("evaluate", help="overlap and distance metrics against a reference")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--classes", default=",".join(CLASSES))
    p.add_argument("--patient-id", default=None)
    _common(p)

    p = sub.add_parser("agree", help="agreement statistics over a subjects x raters CSV")
    p.add_argument("ratings")
    p.add_argument("--stat", default="icc", help="comma list of icc, spearman, bland-altman")
    p.add_argument("--columns", default=None, help="comma list of rater columns to use")
    p.add_argument("--reference", default=None, help="column compared against the aggregate of the others")
    p.add_argument("--aggregate", choices=AGGREGATES, default=None)
    p.add_argument("--weights", default=None, help="comma list of weights for weighted_average")
    _common(p)

    p = sub.add_parser("loss", help="confidence-weighted loss of probability maps")
    p.add_argument("inputs", nargs="+", metavar="FILE", help="prob_et prob_ed prob_cavity gt")
    p.add_argument("--confidence", default=None, help="e.g. et=4,ed=3,cavity=4")
    p.add_argument("--gradient-out", default=None, metavar="PREFIX",
                   help="write the gradient channels as PREFIX_<class>.nii.gz")
    _common(p)

    p = sub.add_parser("batch", help="process a manifest CSV of cases")
    p.add_argument("manifest")
    _rano_options(p)
    _common(p)
    return parser


def load_config(parser: argparse.ArgumentParser, argv) -> str | None:
    """Apply JSON defaults from the config file to the selected subcommand."""
    path = os.environ.get(CONFIG_ENV)
    if not path:
        return None
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    cmd = next((a for a in argv if a in subparsers.choices), None)
    if cmd is None:
        return path
    sub = subparsers.choices[cmd]
    known = {a.dest for a in sub._actions}
    anywhere = {a.dest for p in subparsers.choices.values() for a in p._actions}
    defaults = {}
    for key, value in cfg.items():
        dest = key.lstrip("-").replace("-", "_")
        if isinstance(value, dict):
            if key not in subparsers.choices:
                raise UsageError(f"config {path}: unknown section {key!r}")
            continue  # per-command section handled below
        if dest not in anywhere:
            raise UsageError(f"config {path}: unknown option {key!r}")
        if dest in known:
            defaults[dest] = value
    section = cfg.get(cmd, {})
    for key, value in section.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in known:
            raise UsageError(f"config {path}: unknown option {key!r} for {cmd}")
        defaults[dest] = value
    sub.set_defaults(**defaults)
    return path


def _labels(args) -> dict[str, int]:
    return parse_label_map(args.labels) if args.labels else dict(DEFAULT_LABELS)


def _params(args) -> RanoParams:
    return RanoParams(
        min_diameter_mm=args.min_diameter,
        angle_tolerance_deg=args.angle_tolerance,
        max_lesions=args.max_lesions,
        inscription_step_mm=args.inscription_step,
        connectivity=args.connectivity,
    )


def _algorithms(args) -> tuple[str, ...]:
    return ALGORITHMS if args.algorithm == "both" else (args.algorithm,)


def run_config(args, config_path) -> dict:
    cfg = {
        "command": args.command,
        "labels": _labels(args),
        "threads": args.threads,
        "format": args.format,
        "out": args.out,
        "figures": args.figures,
        "config_file": config_path,
    }
    if hasattr(args, "algorithm"):
        cfg["rano"] = {**asdict(_params(args)), "algorithms": list(_algorithms(args))}
        cfg["postprocess"] = args.postprocess
    for key in ("classes", "stat", "columns", "reference", "aggregate", "weights", "confidence"):
        if hasattr(args, key):
            cfg[key] = getattr(args, key)
    return cfg


def _emit(doc_or_report, args, meta: ReportMeta, out=None, **extra) -> None:
    out = args.out if out is None else out
    if out:
        write_report(doc_or_report, out, args.format, meta, **extra)
        return
    t0 = time.perf_counter()
    doc = doc_or_report if isinstance(doc_or_report, dict) else to_document(doc_or_report, **extra)
    if args.format == "json":
        sys.stdout.write(render_json({**doc, "run_config": meta.run_config,
                                      "timings_s": stamp_write(meta.timings_s, t0), "tool": meta.tool}))
    else:
        sys.stdout.write(render_csv(*csv_rows(doc)))


class _Timer:
    def __init__(self):
        self.stages = {}

    def __call__(self, name):
        timer = self

        class _Stage:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.stages[name] = timer.stages.get(name, 0.0) + time.perf_counter() - self.t0

        return _Stage()


def _tool() -> dict:
    return {"name": "tumorburden", "version": __version__}


# ---------------------------------------------------------------- measure


def measure_case(seg_path, args, patient_id: str, threads: int):
    """Read, optionally prune, and measure one label volume.  Returns (report, et mask, timings)."""
    timer = _Timer()
    with timer("read"):
        volume = read_label_volume(seg_path, _labels(args))
    with timer("postprocess"):
        if args.postprocess:
            volume = prune_unsupported_et(volume, args.connectivity, args.postprocess)
    with timer("measure"):
        volumes = {c: volume_mm3(class_mask(volume, c)) for c in CLASSES if c in volume.label_semantics}
        et = class_mask(volume, "et")
        results = rano_measure(et, _params(args), _algorithms(args), threads=threads)
    flags = []
    if args.postprocess:
        flags.append(f"postprocess_{args.postprocess}")
    report = MeasurementReport(patient_id, volume.spacing, volumes, results, flags)
    return report, et, timer, volume


def _measure_figures(report: MeasurementReport, et, directory, stem: str) -> None:
    from .plotting import rano_overlay

    for name, m in report.rano.items():
        rano_overlay(et, m, Path(directory) / f"{stem}.rano_{name}.png")


def cmd_measure(args, config_path) -> int:
    pid = args.patient_id or _stem(args.seg)
    report, et, timer, _ = measure_case(args.seg, args, pid, args.threads)
    if args.figures:
        with timer("write"):
            _measure_figures(report, et, args.figures, pid)
    _emit(report, args, ReportMeta(run_config(args, config_path), timer.stages, _tool()))
    return EXIT_OK


def _stem(path) -> str:
    name = Path(path).name
    for suffix in (".nii.gz", ".nii", ".gz"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return Path(path).stem


# ---------------------------------------------------------------- evaluate


def _classes(text: str) -> tuple[str, ...]:
    classes = tuple(c.strip().lower() for c in text.split(",") if c.strip())
    if not classes:
        raise UsageError("--classes is empty")
    return classes


def evaluate_case(pred_path, gt_path, args, classes, pred=None):
    """``pred`` may be an already loaded (e.g. post-processed) volume."""
    timer = _Timer()
    with timer("read"):
        labels = _labels(args)
        if pred is None:
            pred = read_label_volume(pred_path, labels)
        gt = read_label_volume(gt_path, labels)
    for c in classes:
        if c not in pred.label_semantics:
            raise ValueError(f"class {c!r} has no label (labels: {pred.label_semantics})")
    with timer("measure"):
        report = evaluate(pred, gt, classes)
    return report, timer


def cmd_evaluate(args, config_path) -> int:
    classes = _classes(args.classes)
    report, timer = evaluate_case(args.pred, args.gt, args, classes)
    meta = ReportMeta(run_config(args, config_path), timer.stages, _tool())
    _emit(report, args, meta, patient_id=args.patient_id or _stem(args.pred))
    return EXIT_OK


# ---------------------------------------------------------------- agree


def _split(text: str | None) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def cmd_agree(args, config_path) -> int:
    timer = _Timer()
    stats = _split(args.stat)
    bad = [s for s in stats if s not in STATS]
    if not stats or bad:
        raise UsageError(f"--stat must be a comma list drawn from {STATS}")
    with timer("read"):
        m = read_ratings_csv(args.ratings)
    if args.columns:
        missing = [c for c in _split(args.columns) if c not in m.raters]
        if missing:
            raise ValueError(f"unknown rater columns {missing}; available {m.raters}")
        m = m.select(_split(args.columns))
    weights = [float(w) for w in _split(args.weights)] or None
    if args.weights and args.aggregate != "weighted_average":
        raise UsageError("--weights only applies to --aggregate weighted_average")
    with timer("measure"):
        compared = tuple(m.raters)
        if args.reference is not None:
            if args.reference not in m.raters:
                raise ValueError(f"unknown reference column {args.reference!r}")
            others = [r for r in m.raters if r != args.reference]
            if not others:
                raise ValueError("need at least one rater besides the reference")
            mode = args.aggregate or "average"
            agg = aggregate_ratings(m.select(others), mode, weights)
            label = f"{mode}({','.join(others)})"
            m = RatingsMatrix(np.column_stack([m.column(args.reference), agg]), m.subjects,
                              [args.reference, label])
            compared = (args.reference, label)
        elif args.aggregate is not None:
            raise UsageError("--aggregate needs --reference")
        report = AgreementReport(compared=compared, aggregate=args.aggregate if args.reference else None)
        if "icc" in stats:
            report.icc = icc_2_1(m)
            if report.icc.degenerate:
                report.flags.append("icc_degenerate")
            if report.icc.undefined:
                report.flags.append("icc_undefined")
        pairwise = [s for s in stats if s != "icc"]
        if pairwise and m.values.shape[1] != 2:
            raise UsageError("spearman and bland-altman need exactly two series; use --columns or --reference")
        if "spearman" in stats:
            report.spearman_rho = spearman(m.values[:, 0], m.values[:, 1])
        if "bland-altman" in stats:
            report.bland_altman = bland_altman(m.values[:, 0], m.values[:, 1])
    if args.figures and report.bland_altman is not None:
        from .plotting import bland_altman_plot

        with timer("write"):
            bland_altman_plot(report.bland_altman, Path(args.figures) / f"{_stem(args.ratings)}.bland_altman.png",
                              labels=tuple(m.raters))
    _emit(report, args, ReportMeta(run_config(args, config_path), timer.stages, _tool()), subjects=m.subjects)
    return EXIT_OK


# ---------------------------------------------------------------- loss


def loss_case(prob_paths, gt_path, confidences, args):
    timer = _Timer()
    with timer("read"):
        pv = read_probability_volume(prob_paths, CLASSES)
        gt = read_label_volume(gt_path, _labels(args))
    with timer("measure"):
        value = confidence_weighted_loss(pv, gt, confidences)
    return value, pv, timer


def cmd_loss(args, config_path) -> int:
    if len(args.inputs) != len(CLASSES) + 1:
        raise UsageError("loss expects three probability files (et, ed, cavity) followed by the label file")
    confidences = parse_confidences(args.confidence)
    value, pv, timer = loss_case(args.inputs[:-1], args.inputs[-1], confidences, args)
    if args.gradient_out:
        with timer("write"):
            for idx, name in enumerate(CLASSES):
                write_float_volume(value.gradient[idx], pv.spacing, f"{args.gradient_out}_{name}.nii.gz")
    _emit(value, args, ReportMeta(run_config(args, config_path), timer.stages, _tool()), confidences=confidences)
    return EXIT_OK


# ---------------------------------------------------------------- batch

MANIFEST_FIELDS = ("patient_id", "seg_path", "gt_path", "prob_paths", "confidences")


def read_manifest(path) -> list[dict]:
    base = Path(path).parent
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        fields = [f.strip() for f in reader.fieldnames]
        if "patient_id" not in fields or "seg_path" not in fields:
            raise ManifestError(f"{path}: manifest needs patient_id and seg_path columns")
        unknown = set(fields) - set(MANIFEST_FIELDS)
        if unknown:
            raise ManifestError(f"{path}: unknown manifest columns {sorted(unknown)}")
        rows, seen = [], set()
        for num, raw in enumerate(reader, start=2):
            if None in raw:
                raise ManifestError(f"{path}:{num}: too many fields")
            row = {k.strip(): (v or "").strip() for k, v in raw.items()}
            if not any(row.values()):
                continue
            pid = row.get("patient_id", "")
            if not pid or not row.get("seg_path"):
                raise ManifestError(f"{path}:{num}: patient_id and seg_path are required")
            if pid in seen:
                raise ManifestError(f"{path}:{num}: duplicate patient_id {pid!r}")
            if any(ch in pid for ch in "/\\") or pid in (".", ".."):
                raise ManifestError(f"{path}:{num}: patient_id {pid!r} is not a valid file stem")
            seen.add(pid)

            def resolve(p):
                return str(base / p) if p and not os.path.isabs(p) else p

            probs = [resolve(p.strip()) for p in row.get("prob_paths", "").split(";") if p.strip()]
            if probs and len(probs) != len(CLASSES):
                raise ManifestError(f"{path}:{num}: prob_paths needs {len(CLASSES)} ';'-separated files")
            try:
                conf = parse_confidences(row.get("confidences", ""))
            except ValueError as exc:
                raise ManifestError(f"{path}:{num}: {exc}") from exc
            rows.append({
                "patient_id": pid,
                "seg_path": resolve(row["seg_path"]),
                "gt_path": resolve(row.get("gt_path", "")) or None,
                "prob_paths": probs,
                "confidences": conf,
            })
    return rows


def _process_row(row, args, config, out_dir: Path, rano_threads: int) -> dict:
    pid = row["patient_id"]
    result = {"patient_id": pid, "measurement": None, "metrics": None, "loss": None, "error": None}
    ext = "json" if args.format == "json" else "csv"
    try:
        report, et, timer, volume = measure_case(row["seg_path"], args, pid, rano_threads)
        result["measurement"] = report
        if row["gt_path"]:
            metrics, mtimer = evaluate_case(row["seg_path"], row["gt_path"], args, CLASSES, pred=volume)
            result["metrics"] = metrics
        if row["prob_paths"]:
            if not row["gt_path"]:
                raise ValueError("prob_paths given without gt_path")
            value, _, ltimer = loss_case(row["prob_paths"], row["gt_path"], row["confidences"], args)
            result["loss"] = value
        if args.figures:
            with timer("write"):
                _measure_figures(report, et, args.figures, pid)
        cfg = {**config, "patient_id": pid, "row": dict(row)}
        write_report(report, out_dir / f"{pid}.measure.{ext}", args.format,
                     ReportMeta(cfg, timer.stages, _tool()))
        if result["metrics"] is not None:
            write_report(result["metrics"], out_dir / f"{pid}.metrics.{ext}", args.format,
                         ReportMeta(cfg, mtimer.stages, _tool()), patient_id=pid)
        if result["loss"] is not None:
            write_report(result["loss"], out_dir / f"{pid}.loss.{ext}", args.format,
                         ReportMeta(cfg, ltimer.stages, _tool()), confidences=row["confidences"])
    except Exception as exc:  # noqa: BLE001 - isolate per-row failures
        code = exit_code_for(exc)
        result["error"] = (_error_kind(code), f"{type(exc).__name__}: {exc}")
        log.warning("row %s failed: %s", pid, exc)
    return result


def _metric_value(metrics, cls: str, name: str):
    """Metric value, or None when an empty-mask convention produced it."""
    m = metrics.per_class[cls]
    flags = set(m.flags)
    if name in ("dice", "iou") and "both_empty" in flags:
        return None
    if name == "sensitivity" and "sensitivity_undefined" in flags:
        return None
    if name == "specificity" and "specificity_undefined" in flags:
        return None
    return getattr(m, name)


def cohort_rows(results) -> list[dict]:
    rows = []

    def add(kind, name, cls, values, detail=""):
        stats = summary_stats(values)
        rows.append({"kind": kind, "name": name, "class": cls, **{k: v for k, v in stats.items()},
                     "detail": detail})

    ok = [r for r in results if r["error"] is None]
    measured = [r["measurement"] for r in ok]
    if measured:
        for c in CLASSES:
            add("measurement", "volume_mm3", c, [m.volumes_mm3.get(c, 0.0) for m in measured])
        for algo in measured[0].rano:
            add("measurement", f"rano_{algo}_sum_mm2", "et", [m.rano[algo].sum_product_mm2 for m in measured])
    evaluated = [r["metrics"] for r in ok if r["metrics"] is not None]
    for c in CLASSES:
        for name in METRIC_NAMES:
            if not evaluated:
                break
            values = [_metric_value(m, c, name) for m in evaluated]
            excluded = sum(1 for v in values if v is None or not np.isfinite(v))
            add("metric", name, c, values, f"excluded={excluded}" if excluded else "")
    losses = [r["loss"] for r in ok if r["loss"] is not None]
    if losses:
        add("loss", "total", "all", [v.total for v in losses])
        for c in CLASSES:
            add("loss", "weighted", c, [v.per_class[c] for v in losses])
    for r in results:
        if r["error"] is not None:
            kind, message = r["error"]
            rows.append({"kind": "failure", "name": r["patient_id"], "class": kind, "n": None, "mean": None,
                         "median": None, "p25": None, "p75": None, "detail": message})
    return rows


def cmd_batch(args, config_path) -> int:
    if not args.out:
        raise UsageError("batch needs --out DIR")
    if args.threads < 1:
        raise UsageError("--threads must be at least 1")
    rows = read_manifest(args.manifest)
    _params(args)  # validate once up front
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = run_config(args, config_path)
    rano_threads = 1 if args.threads > 1 and len(rows) > 1 else args.threads
    if args.threads > 1 and len(rows) > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(lambda r: _process_row(r, args, config, out_dir, rano_threads), rows))
    else:
        results = [_process_row(r, args, config, out_dir, rano_threads) for r in rows]
    summary = cohort_rows(results)
    write_summary(summary, out_dir / "cohort_summary.csv")
    if args.figures:
        from .plotting import cohort_summary_plot

        cohort_summary_plot(summary, Path(args.figures) / "cohort_summary.png")
    failures = sum(1 for r in results if r["error"] is not None)
    if failures:
        log.error("%d of %d rows failed; see cohort_summary.csv", failures, len(results))
        return EXIT_PARTIAL
    return EXIT_OK


COMMANDS = {
    "measure": cmd_measure,
    "evaluate": cmd_evaluate,
    "agree": cmd_agree,
    "loss": cmd_loss,
    "batch": cmd_batch,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        config_path = load_config(parser, argv)
        args = parser.parse_args(argv)
        if args.verbose:
            log.setLevel(logging.INFO)
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        return COMMANDS[args.command](args, config_path)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - translate to an exit code
        code = exit_code_for(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
