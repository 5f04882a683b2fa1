"""JSON and CSV serialization of measurement, metric, agreement and loss reports.

Numbers are rounded to 6 significant digits; non-finite values become
``null`` (JSON) or an empty cell (CSV).  Keys keep a fixed order so two runs
on the same input produce byte-identical documents apart from timings.

CSV cannot carry nested provenance, so a CSV report is accompanied by a
``<name>.provenance.json`` sidecar holding the run configuration and timings.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agreement import AgreementReport
from .loss import CLASSES, LossValue
from .metrics import MetricReport
from .segments import LesionMeasurement, RanoMeasurement, Segment2D
from .volume import Spacing

FORMATS = ("json", "csv")
SUMMARY_FIELDS = ("kind", "name", "class", "n", "mean", "median", "p25", "p75", "detail")


@dataclass
class MeasurementReport:
    patient_id: str
    spacing: Spacing
    volumes_mm3: dict[str, float]
    rano: dict[str, RanoMeasurement]
    flags: list[str] = field(default_factory=list)


@dataclass
class ReportMeta:
    """Provenance attached to every report written by the command line."""

    run_config: dict = field(default_factory=dict)
    timings_s: dict = field(default_factory=dict)
    tool: dict = field(default_factory=dict)


def num(x):
    """Round to 6 significant digits; ints and bools pass through, non-finite -> None."""
    if x is None or isinstance(x, (bool, np.bool_)):
        return None if x is None else bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    x = float(x)
    if not math.isfinite(x):
        return None
    return float(f"{x:.6g}")


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def _segment(seg: Segment2D | None):
    if seg is None:
        return None
    return {
        "p0_mm": [num(v) for v in seg.p0_mm],
        "p1_mm": [num(v) for v in seg.p1_mm],
        "length_mm": num(seg.length_mm),
        "p0_vox": list(seg.p0_vox),
        "p1_vox": list(seg.p1_vox),
    }


def _lesion(lesion: LesionMeasurement) -> dict:
    return {
        "component_id": lesion.component_id,
        "slice_index": lesion.slice_index,
        "major": _segment(lesion.major),
        "perpendicular": _segment(lesion.perpendicular),
        "product_mm2": num(lesion.product_mm2),
        "measurable": lesion.measurable,
    }


def _rano(m: RanoMeasurement) -> dict:
    return {
        "algorithm": m.algorithm,
        "sum_product_mm2": num(m.sum_product_mm2),
        "measurable_count": m.measurable_count,
        "lesions": [_lesion(lesion) for lesion in m.lesions],
    }


def measurement_document(r: MeasurementReport) -> dict:
    ranos = [_rano(m) for m in r.rano.values()]
    return {
        "report": "measurement",
        "patient_id": r.patient_id,
        "spacing_mm": [num(v) for v in r.spacing.as_tuple()],
        "volumes_mm3": {name: num(r.volumes_mm3.get(name, 0.0)) for name in CLASSES},
        "rano": ranos[0] if len(ranos) == 1 else ranos,
        "flags": list(r.flags),
    }


def metric_document(r: MetricReport, patient_id: str | None = None) -> dict:
    classes = {}
    for name, m in r.per_class.items():
        classes[name] = {
            "dice": num(m.dice),
            "iou": num(m.iou),
            "h95_mm": num(m.h95_mm),
            "sensitivity": num(m.sensitivity),
            "specificity": num(m.specificity),
            "tp": m.counts.tp,
            "fp": m.counts.fp,
            "fn": m.counts.fn,
            "tn": m.counts.tn,
            "flags": list(m.flags),
        }
    return {"report": "metrics", "patient_id": patient_id, "classes": classes}


def agreement_document(r: AgreementReport, subjects=None) -> dict:
    icc = None
    if r.icc is not None:
        icc = {
            "icc": num(r.icc.icc),
            "f_statistic": num(r.icc.f_statistic),
            "df1": r.icc.df1,
            "df2": r.icc.df2,
            "p_value": num(r.icc.p_value),
            "degenerate": r.icc.degenerate,
            "undefined": r.icc.undefined,
        }
    ba = None
    if r.bland_altman is not None:
        b = r.bland_altman
        names = list(subjects) if subjects is not None else [str(i + 1) for i in range(len(b.means))]
        ba = {
            "bias": num(b.bias),
            "loa_low": num(b.loa_low),
            "loa_high": num(b.loa_high),
            "sd": num(b.sd),
            "points": [
                {"subject": s, "mean": num(m), "diff": num(d)} for s, m, d in zip(names, b.means, b.differences)
            ],
        }
    return {
        "report": "agreement",
        "compared": list(r.compared),
        "aggregate": r.aggregate,
        "icc": icc,
        "spearman_rho": num(r.spearman_rho),
        "bland_altman": ba,
        "flags": list(r.flags),
    }


def loss_document(r: LossValue, confidences: dict | None = None) -> dict:
    g = r.gradient
    return {
        "report": "loss",
        "total": num(r.total),
        "per_class": {c: num(r.per_class[c]) for c in CLASSES},
        "unweighted": {c: num(r.unweighted[c]) for c in CLASSES},
        "alpha": {c: num(r.alphas[c]) for c in CLASSES},
        "confidences": {c: (confidences or {}).get(c) for c in CLASSES},
        "gradient": {
            "shape": list(g.shape),
            "l2_norm": num(float(np.sqrt(np.sum(g * g)))),
            "max_abs": num(float(np.max(np.abs(g))) if g.size else 0.0),
        },
    }


def to_document(r, **extra) -> dict:
    if isinstance(r, MeasurementReport):
        return measurement_document(r)
    if isinstance(r, MetricReport):
        return metric_document(r, extra.get("patient_id"))
    if isinstance(r, AgreementReport):
        return agreement_document(r, extra.get("subjects"))
    if isinstance(r, LossValue):
        return loss_document(r, extra.get("confidences"))
    raise TypeError(f"unsupported report type {type(r).__name__}")


def _flatten(prefix: str, value, out: dict) -> None:
    if isinstance(value, dict):
        for key, sub in value.items():
            _flatten(f"{prefix}_{key}" if prefix else key, sub, out)
    elif isinstance(value, list) and value and all(not isinstance(v, (dict, list)) for v in value):
        if all(isinstance(v, str) for v in value):
            out[prefix] = ";".join(value)
        else:
            for idx, sub in enumerate(value):
                out[f"{prefix}_{'xyz'[idx] if len(value) <= 3 else idx}"] = sub
    elif isinstance(value, list) and value:
        for idx, sub in enumerate(value):
            _flatten(f"{prefix}_{idx}", sub, out)
    elif isinstance(value, list):
        out[prefix] = ""
    else:
        out[prefix] = value


def _segment_columns(prefix: str) -> list[str]:
    cols = []
    for end in ("p0_mm", "p1_mm"):
        cols += [f"{prefix}_{end}_x", f"{prefix}_{end}_y"]
    cols.append(f"{prefix}_length_mm")
    for end in ("p0_vox", "p1_vox"):
        cols += [f"{prefix}_{end}_x", f"{prefix}_{end}_y"]
    return cols


MEASUREMENT_COLUMNS = (
    ["patient_id", "spacing_mm_x", "spacing_mm_y", "spacing_mm_z"]
    + [f"volumes_mm3_{c}" for c in CLASSES]
    + ["algorithm", "sum_product_mm2", "measurable_count", "component_id", "slice_index"]
    + _segment_columns("major")
    + _segment_columns("perpendicular")
    + ["product_mm2", "measurable"]
)
METRIC_COLUMNS = [
    "patient_id", "class", "dice", "iou", "h95_mm", "sensitivity", "specificity", "tp", "fp", "fn", "tn", "flags",
]
LOSS_COLUMNS = ["class", "alpha", "confidence", "unweighted", "weighted", "total"]
FIELD_COLUMNS = ["field", "value"]


def csv_rows(doc: dict) -> tuple[list[str], list[dict]]:
    """Flatten a report document into (columns, rows)."""
    kind = doc["report"]
    if kind == "measurement":
        head = {}
        _flatten("", {k: doc[k] for k in ("patient_id", "spacing_mm", "volumes_mm3")}, head)
        rows = []
        ranos = doc["rano"] if isinstance(doc["rano"], list) else [doc["rano"]]
        for rano in ranos:
            for lesion in rano["lesions"]:
                row = dict(head)
                row.update(algorithm=rano["algorithm"], sum_product_mm2=rano["sum_product_mm2"],
                           measurable_count=rano["measurable_count"])
                _flatten("", lesion, row)
                rows.append(row)
        return MEASUREMENT_COLUMNS, rows
    if kind == "metrics":
        rows = []
        for name, m in doc["classes"].items():
            row = {"patient_id": doc["patient_id"], "class": name}
            row.update({k: v for k, v in m.items() if k != "flags"})
            row["flags"] = ";".join(m["flags"])
            rows.append(row)
        return METRIC_COLUMNS, rows
    if kind == "loss":
        rows = [
            {"class": c, "alpha": doc["alpha"][c], "confidence": doc["confidences"][c],
             "unweighted": doc["unweighted"][c], "weighted": doc["per_class"][c], "total": doc["total"]}
            for c in CLASSES
        ]
        return LOSS_COLUMNS, rows
    flat = {}
    _flatten("", {k: v for k, v in doc.items() if k != "report"}, flat)
    return FIELD_COLUMNS, [{"field": k, "value": v} for k, v in flat.items()]


def render_json(doc: dict) -> str:
    return json.dumps(doc, indent=2, allow_nan=False) + "\n"


def render_csv(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(col)) for col in columns])
    return buf.getvalue()


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".part")
    try:
        with open(tmp, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def provenance_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".provenance.json")


def write_report(r, path, format: str = "json", meta: ReportMeta | None = None, **extra) -> dict:
    """Serialize a report to ``path``; returns the document that was written."""
    if format not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    t0 = time.perf_counter()
    doc = r if isinstance(r, dict) else to_document(r, **extra)
    body = render_json(doc) if format == "json" else render_csv(*csv_rows(doc))
    if meta is None:
        atomic_write_text(path, body)
        return doc
    provenance = {"run_config": meta.run_config, "timings_s": stamp_write(meta.timings_s, t0), "tool": meta.tool}
    if format == "json":
        atomic_write_text(path, render_json({**doc, **provenance}))
    else:
        atomic_write_text(path, body)
        atomic_write_text(provenance_path(path), render_json({"report": doc["report"], **provenance}))
    return doc


def stamp_write(timings: dict, t0: float) -> dict:
    """Timings with serialization since ``t0`` added to the write stage; the final flush is not included."""
    out = dict(timings)
    out["write"] = out.get("write", 0.0) + time.perf_counter() - t0
    return out


def summary_stats(values) -> dict:
    v = np.asarray([x for x in values if x is not None and math.isfinite(x)], dtype=float)
    if not v.size:
        return {"n": 0, "mean": None, "median": None, "p25": None, "p75": None}
    return {
        "n": int(v.size),
        "mean": float(v.mean()),
        "median": float(np.median(v)),
        "p25": float(np.percentile(v, 25)),
        "p75": float(np.percentile(v, 75)),
    }


def write_summary(rows, path) -> None:
    atomic_write_text(path, render_csv(SUMMARY_FIELDS, rows))
