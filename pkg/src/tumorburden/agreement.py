"""Inter-rater and algorithm-rater agreement: ICC(2,1), Spearman rho, Bland-Altman."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

AGGREGATES = ("average", "weighted_average", "median", "min", "max")
_ID_COLUMNS = {"subject", "subject_id", "patient", "patient_id", "id"}


class SpearmanUndefinedError(ValueError):
    pass


class RatingsFormatError(ValueError):
    """Malformed ratings table (unparseable cells, ragged rows, no data)."""


@dataclass
class RatingsMatrix:
    values: np.ndarray  # (n subjects, k raters)
    subjects: list[str]
    raters: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("ratings must be a 2D subjects x raters table")
        n, k = self.values.shape
        if not np.all(np.isfinite(self.values)):
            raise ValueError("ratings contain missing or non-finite entries")
        if len(self.subjects) != n or len(self.raters) != k:
            raise ValueError("row/column identifiers do not match the table shape")

    @classmethod
    def from_array(cls, values) -> "RatingsMatrix":
        values = np.asarray(values, dtype=float)
        n, k = values.shape
        return cls(values, [str(i + 1) for i in range(n)], [f"r{j + 1}" for j in range(k)])

    def column(self, rater: str) -> np.ndarray:
        return self.values[:, self.raters.index(rater)]

    def select(self, raters) -> "RatingsMatrix":
        idx = [self.raters.index(r) for r in raters]
        return RatingsMatrix(self.values[:, idx], list(self.subjects), list(raters))


@dataclass
class IccResult:
    icc: float
    f_statistic: float
    df1: int
    df2: int
    p_value: float
    msr: float
    msc: float
    mse: float
    degenerate: bool = False
    undefined: bool = False


@dataclass
class BlandAltman:
    bias: float
    loa_low: float
    loa_high: float
    sd: float
    means: np.ndarray
    differences: np.ndarray


@dataclass
class AgreementReport:
    icc: IccResult | None = None
    spearman_rho: float | None = None
    bland_altman: BlandAltman | None = None
    compared: tuple[str, ...] = ()
    aggregate: str | None = None
    flags: list[str] = field(default_factory=list)


def read_ratings_csv(path) -> RatingsMatrix:
    """Header row of rater ids, one row per subject; an optional leading id column."""
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if any(cell.strip() for cell in row)]
    if not rows:
        raise RatingsFormatError(f"{path}: empty ratings file")
    header = [h.strip() for h in rows[0]]
    has_id = header[0].lower() in _ID_COLUMNS
    raters = header[1:] if has_id else header
    subjects, values = [], []
    for num, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise RatingsFormatError(f"{path}:{num}: expected {len(header)} fields, got {len(row)}")
        cells = row[1:] if has_id else row
        subjects.append(row[0].strip() if has_id else str(num - 1))
        try:
            values.append([float(c) for c in cells])
        except ValueError as exc:
            raise RatingsFormatError(f"{path}:{num}: non-numeric rating ({exc})") from exc
    if not values:
        raise RatingsFormatError(f"{path}: no subject rows")
    return RatingsMatrix(np.array(values), subjects, raters)


def anova_two_way(values: np.ndarray) -> tuple[float, float, float]:
    """Mean squares for rows, columns and residual of a two-way layout without replication."""
    x = np.asarray(values, dtype=float)
    n, k = x.shape
    grand = x.mean()
    ss_rows = k * np.sum((x.mean(axis=1) - grand) ** 2)
    ss_cols = n * np.sum((x.mean(axis=0) - grand) ** 2)
    ss_total = np.sum((x - grand) ** 2)
    ss_err = ss_total - ss_rows - ss_cols
    return ss_rows / (n - 1), ss_cols / (k - 1), ss_err / ((n - 1) * (k - 1))


def f_survival(f: float, df1: float, df2: float) -> float:
    """Upper tail of the F distribution via the regularised incomplete beta function."""
    if np.isinf(f):
        return 0.0
    if f <= 0:
        return 1.0
    return float(special.betainc(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f)))


def icc_2_1(m: RatingsMatrix) -> IccResult:
    """Single-measure, absolute-agreement, two-way random-effects ICC.

    The F test compares subject and residual mean squares with
    ``(n - 1, (n - 1)(k - 1))`` degrees of freedom.
    """
    x = m.values
    n, k = x.shape
    if n < 2 or k < 2:
        raise ValueError("ICC needs at least 2 subjects and 2 raters")
    df1, df2 = n - 1, (n - 1) * (k - 1)
    if np.ptp(x) == 0:
        return IccResult(1.0, float("nan"), df1, df2, float("nan"), 0.0, 0.0, 0.0, degenerate=True)
    msr, msc, mse = anova_two_way(x)
    mse = max(mse, 0.0)
    denom = msr + (k - 1) * mse + (k / n) * (msc - mse)
    # can vanish when n == k == 2 and the subject and rater means are all equal
    undefined = denom == 0
    icc = float("nan") if undefined else (msr - mse) / denom
    f = msr / mse if mse > 0 else float("inf")
    return IccResult(float(icc), float(f), df1, df2, f_survival(f, df1, df2), float(msr), float(msc), float(mse),
                     undefined=bool(undefined))


def spearman(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two series of equal length")
    if x.size < 3:
        raise ValueError("spearman needs at least 3 observations")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise SpearmanUndefinedError("spearman correlation is undefined for a constant series")
    rx = stats.rankdata(x, method="average")
    ry = stats.rankdata(y, method="average")
    rx -= rx.mean()
    ry -= ry.mean()
    return float(np.dot(rx, ry) / np.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))


def bland_altman(x, y) -> BlandAltman:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("bland_altman needs two series of equal length")
    if x.size < 2:
        raise ValueError("bland_altman needs at least 2 observations")
    d = x - y
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    return BlandAltman(bias, bias - 1.96 * sd, bias + 1.96 * sd, sd, (x + y) / 2, d)


def aggregate_ratings(m: RatingsMatrix, mode: str = "average", weights=None) -> np.ndarray:
    x = m.values
    if mode == "average":
        return x.mean(axis=1)
    if mode == "weighted_average":
        if weights is None:
            raise ValueError("weighted_average needs weights")
        w = np.asarray(weights, dtype=float)
        if w.shape != (x.shape[1],):
            raise ValueError(f"expected {x.shape[1]} weights, got {w.size}")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        return x @ (w / w.sum())
    if mode == "median":
        return np.median(x, axis=1)
    if mode == "min":
        return x.min(axis=1)
    if mode == "max":
        return x.max(axis=1)
    raise ValueError(f"unknown aggregate {mode!r}; expected one of {AGGREGATES}")
