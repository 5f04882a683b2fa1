from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tumorburden.agreement import AgreementReport, RatingsMatrix, bland_altman, icc_2_1
from tumorburden.loss import confidence_weighted_loss_arrays
from tumorburden.metrics import evaluate
from tumorburden.report import (
    MEASUREMENT_COLUMNS,
    MeasurementReport,
    ReportMeta,
    csv_rows,
    num,
    provenance_path,
    summary_stats,
    to_document,
    write_report,
)
from tumorburden.segments import LesionMeasurement, RanoMeasurement, Segment2D
from tumorburden.volume import LabelVolume, Spacing

SPACING = Spacing(1.0, 1.0, 2.5)


def single_lesion_report() -> MeasurementReport:
    major = Segment2D.from_voxels((2, 3), (14, 8), 1.0, 1.0)
    perp = Segment2D.from_voxels((6, 11), (11, -1), 1.0, 1.0)
    lesion = LesionMeasurement(1, 4, major, perp, 13.0 * 13.0, True)
    rano = RanoMeasurement("diameters", (lesion,), 169.0)
    return MeasurementReport("P001", SPACING, {"et": 812.5, "ed": 2000.0, "cavity": 0.0}, {"diameters": rano})


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_num():
    assert num(1 / 3) == 0.333333
    assert num(123456789.0) == 123457000.0
    assert num(float("inf")) is None and num(float("nan")) is None and num(None) is None
    assert num(7) == 7 and num(np.int64(7)) == 7 and num(True) is True


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_num_is_six_significant_digits(x):
    y = num(x)
    assert y == float(f"{x:.6g}")
    assert num(y) == y


def test_single_lesion_schema(tmp_path):
    doc = write_report(single_lesion_report(), tmp_path / "m.json")
    on_disk = json.loads((tmp_path / "m.json").read_text())
    assert on_disk == doc
    assert doc == {
        "report": "measurement",
        "patient_id": "P001",
        "spacing_mm": [1.0, 1.0, 2.5],
        "volumes_mm3": {"et": 812.5, "ed": 2000.0, "cavity": 0.0},
        "rano": {
            "algorithm": "diameters",
            "sum_product_mm2": 169.0,
            "measurable_count": 1,
            "lesions": [{
                "component_id": 1,
                "slice_index": 4,
                "major": {"p0_mm": [2.0, 3.0], "p1_mm": [14.0, 8.0], "length_mm": 13.0,
                          "p0_vox": [2, 3], "p1_vox": [14, 8]},
                "perpendicular": {"p0_mm": [6.0, 11.0], "p1_mm": [11.0, -1.0], "length_mm": 13.0,
                                  "p0_vox": [6, 11], "p1_vox": [11, -1]},
                "product_mm2": 169.0,
                "measurable": True,
            }],
        },
        "flags": [],
    }
    assert list(on_disk) == ["report", "patient_id", "spacing_mm", "volumes_mm3", "rano", "flags"]


def test_empty_report(tmp_path):
    empty = MeasurementReport("E", SPACING, {}, {"diameters": RanoMeasurement("diameters", (), 0.0)})
    doc = write_report(empty, tmp_path / "e.json")
    assert doc["rano"]["lesions"] == [] and doc["rano"]["sum_product_mm2"] == 0.0
    assert doc["volumes_mm3"] == {"et": 0.0, "ed": 0.0, "cavity": 0.0}
    write_report(empty, tmp_path / "e.csv", format="csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines == [",".join(MEASUREMENT_COLUMNS)]


def test_csv_matches_json(tmp_path):
    report = single_lesion_report()
    doc = write_report(report, tmp_path / "m.json")
    write_report(report, tmp_path / "m.csv", format="csv")
    (row,) = read_csv(tmp_path / "m.csv")
    lesion = doc["rano"]["lesions"][0]
    assert row["patient_id"] == "P001"
    assert float(row["spacing_mm_z"]) == doc["spacing_mm"][2]
    assert float(row["volumes_mm3_et"]) == doc["volumes_mm3"]["et"]
    assert float(row["sum_product_mm2"]) == doc["rano"]["sum_product_mm2"]
    assert int(row["slice_index"]) == lesion["slice_index"]
    for seg in ("major", "perpendicular"):
        for end in ("p0", "p1"):
            for axis, idx in (("x", 0), ("y", 1)):
                assert float(row[f"{seg}_{end}_mm_{axis}"]) == lesion[seg][f"{end}_mm"][idx]
                assert int(row[f"{seg}_{end}_vox_{axis}"]) == lesion[seg][f"{end}_vox"][idx]
        assert float(row[f"{seg}_length_mm"]) == lesion[seg]["length_mm"]
    assert row["measurable"] == "true"


def test_both_algorithms_give_a_list():
    report = single_lesion_report()
    second = RanoMeasurement("product", report.rano["diameters"].lesions, 169.0)
    report.rano["product"] = second
    doc = to_document(report)
    assert [r["algorithm"] for r in doc["rano"]] == ["diameters", "product"]
    columns, rows = csv_rows(doc)
    assert [r["algorithm"] for r in rows] == ["diameters", "product"]


def test_unmeasurable_lesion_row(tmp_path):
    lesion = LesionMeasurement.unmeasurable(2)
    report = MeasurementReport("U", SPACING, {}, {"diameters": RanoMeasurement("diameters", (lesion,), 0.0)})
    doc = write_report(report, tmp_path / "u.csv", format="csv")
    assert doc["rano"]["lesions"][0]["major"] is None
    (row,) = read_csv(tmp_path / "u.csv")
    assert row["major_length_mm"] == "" and row["slice_index"] == "" and row["measurable"] == "false"


def test_metric_nulls(tmp_path):
    gt = np.zeros((4, 4, 4), dtype=np.uint8)
    gt[1, 1, 1] = 1
    pred = LabelVolume(np.zeros_like(gt), SPACING)
    report = evaluate(pred, LabelVolume(gt, SPACING))
    doc = write_report(report, tmp_path / "x.json", patient_id="P")
    et = json.loads((tmp_path / "x.json").read_text())["classes"]["et"]
    assert et["h95_mm"] is None and "h95_undefined" in et["flags"]
    assert doc["classes"]["ed"]["dice"] == 1.0
    write_report(report, tmp_path / "x.csv", format="csv", patient_id="P")
    rows = {r["class"]: r for r in read_csv(tmp_path / "x.csv")}
    assert rows["et"]["h95_mm"] == "" and "one_empty" in rows["et"]["flags"].split(";")
    assert float(rows["ed"]["dice"]) == 1.0 and int(rows["et"]["fn"]) == 1


def test_agreement_document(tmp_path):
    x = np.array([[10.0, 11.0], [20.0, 19.5], [30.0, 31.0], [15.0, 14.0]])
    ba = bland_altman(x[:, 0], x[:, 1])
    r = AgreementReport(icc=icc_2_1(RatingsMatrix.from_array(x)), spearman_rho=0.8, bland_altman=ba,
                        compared=("r1", "r2"))
    doc = write_report(r, tmp_path / "a.json", subjects=["a", "b", "c", "d"])
    assert doc["bland_altman"]["points"][1] == {"subject": "b", "mean": 19.75, "diff": 0.5}
    assert doc["icc"]["df1"] == 3 and doc["icc"]["df2"] == 3
    write_report(r, tmp_path / "a.csv", format="csv", subjects=["a", "b", "c", "d"])
    fields = {row["field"]: row["value"] for row in read_csv(tmp_path / "a.csv")}
    assert float(fields["icc_icc"]) == doc["icc"]["icc"]
    assert fields["bland_altman_points_1_subject"] == "b"
    assert fields["compared"] == "r1;r2"


def test_loss_document(tmp_path, rng):
    p = rng.uniform(0.1, 0.9, (3, 2, 2, 2))
    t = (rng.random((3, 2, 2, 2)) < 0.5).astype(float)
    value = confidence_weighted_loss_arrays(p, t, {"et": 4})
    doc = write_report(value, tmp_path / "l.csv", format="csv", confidences={"et": 4})
    rows = read_csv(tmp_path / "l.csv")
    assert [r["class"] for r in rows] == ["et", "ed", "cavity"]
    assert float(rows[0]["alpha"]) == 1.5 and rows[1]["confidence"] == ""
    assert float(rows[0]["weighted"]) == doc["per_class"]["et"]
    assert doc["gradient"]["shape"] == [3, 2, 2, 2]


def test_provenance(tmp_path):
    meta = ReportMeta({"algorithm": "diameters"}, {"read": 0.1}, {"name": "tumorburden"})
    write_report(single_lesion_report(), tmp_path / "m.json", meta=meta)
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["run_config"] == {"algorithm": "diameters"}
    assert doc["timings_s"]["read"] == 0.1 and doc["timings_s"]["write"] >= 0.0
    assert meta.timings_s == {"read": 0.1}
    write_report(single_lesion_report(), tmp_path / "m.csv", format="csv", meta=meta)
    side = json.loads(provenance_path(tmp_path / "m.csv").read_text())
    assert side["report"] == "measurement" and side["run_config"] == {"algorithm": "diameters"}
    assert not list(tmp_path.glob("*.part"))


def test_bad_format(tmp_path):
    with pytest.raises(ValueError):
        write_report(single_lesion_report(), tmp_path / "m.xml", format="xml")
    with pytest.raises(TypeError):
        to_document(object())


def test_summary_stats():
    values = [3.0, None, 1.0, float("nan"), 10.0, 4.0, float("inf")]
    s = summary_stats(values)
    finite = np.array([3.0, 1.0, 10.0, 4.0])
    assert s["n"] == 4
    assert s["mean"] == finite.mean() and s["median"] == 3.5
    assert s["p25"] == pytest.approx(2.5) and s["p75"] == pytest.approx(5.5)
    assert summary_stats([None, math.nan])["n"] == 0
