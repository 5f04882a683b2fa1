"""Segment geometry shared by the RANO search and its brute-force oracle.

A segment joins the centres of two set pixels of one axial slice.  Endpoints
are kept in voxel indices ``(i, j)`` and converted to millimetres with the
in-plane spacing.  Every floating-point quantity that takes part in a
comparison (length, sample count, perpendicularity) is computed here, so two
independent searches evaluating the same pair see bit-identical numbers.

Inscription is decided by sampling the segment at a fixed step and mapping
each sample to its nearest pixel centre.  Sample positions are rational
(``p0 + k/n * (p1 - p0)``), so the nearest-centre decision is made with
integer arithmetic.  A sample exactly halfway between centres is inside if
any of the equidistant centres is set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ANGLE_SLACK_DEG = 1e-9
_COUNT_SLACK = 1e-12


@dataclass(frozen=True)
class RanoParams:
    min_diameter_mm: float = 10.0
    angle_tolerance_deg: float = 5.0
    max_lesions: int = 5
    inscription_step_mm: float | None = None
    connectivity: int = 26

    def __post_init__(self):
        if not self.min_diameter_mm > 0:
            raise ValueError("min_diameter_mm must be positive")
        if not 0 < self.angle_tolerance_deg < 45:
            raise ValueError("angle_tolerance_deg must lie in (0, 45)")
        if self.max_lesions < 1:
            raise ValueError("max_lesions must be at least 1")
        if self.inscription_step_mm is not None and not self.inscription_step_mm > 0:
            raise ValueError("inscription_step_mm must be positive")
        if self.connectivity not in (6, 18, 26):
            raise ValueError("connectivity must be 6, 18 or 26")

    def step_for(self, dx: float, dy: float) -> float:
        if self.inscription_step_mm is not None:
            return float(self.inscription_step_mm)
        return 0.25 * min(dx, dy)


@dataclass(frozen=True)
class Segment2D:
    p0_vox: tuple[int, int]
    p1_vox: tuple[int, int]
    p0_mm: tuple[float, float]
    p1_mm: tuple[float, float]
    length_mm: float

    @classmethod
    def from_voxels(cls, p0, p1, dx: float, dy: float) -> "Segment2D":
        a = (int(p0[0]), int(p0[1]))
        b = (int(p1[0]), int(p1[1]))
        if b < a:
            a, b = b, a
        length = float(segment_lengths(np.array([b[0] - a[0]]), np.array([b[1] - a[1]]), dx, dy)[0])
        return cls(a, b, (a[0] * dx, a[1] * dy), (b[0] * dx, b[1] * dy), length)

    @property
    def delta(self) -> tuple[int, int]:
        return (self.p1_vox[0] - self.p0_vox[0], self.p1_vox[1] - self.p0_vox[1])


@dataclass(frozen=True)
class LesionMeasurement:
    component_id: int
    slice_index: int | None
    major: Segment2D | None
    perpendicular: Segment2D | None
    product_mm2: float
    measurable: bool

    @classmethod
    def unmeasurable(cls, component_id: int) -> "LesionMeasurement":
        return cls(component_id, None, None, None, 0.0, False)


@dataclass(frozen=True)
class RanoMeasurement:
    algorithm: str
    lesions: tuple[LesionMeasurement, ...]
    sum_product_mm2: float

    @property
    def measurable_count(self) -> int:
        return sum(1 for lesion in self.lesions if lesion.measurable)


def segment_lengths(di, dj, dx: float, dy: float) -> np.ndarray:
    """Euclidean lengths in mm of integer voxel offsets."""
    x = np.asarray(di, dtype=np.int64) * dx
    y = np.asarray(dj, dtype=np.int64) * dy
    return np.sqrt(x * x + y * y)


def sample_counts(lengths, step: float) -> np.ndarray:
    """Number of sampling intervals so consecutive samples are at most ``step`` apart."""
    n = np.ceil(np.asarray(lengths, dtype=float) / step * (1.0 - _COUNT_SLACK))
    return np.maximum(n, 1).astype(np.int64)


def perpendicular(a_di, a_dj, b_di, b_dj, dx: float, dy: float, tolerance_deg: float,
                  a_len=None, b_len=None) -> np.ndarray:
    """True where the lines are at 90 +/- tolerance degrees (inclusive) in mm space.

    ``a_len``/``b_len`` may pass lengths already obtained from :func:`segment_lengths`.
    """
    ax = np.asarray(a_di, dtype=np.int64) * dx
    ay = np.asarray(a_dj, dtype=np.int64) * dy
    bx = np.asarray(b_di, dtype=np.int64) * dx
    by = np.asarray(b_dj, dtype=np.int64) * dy
    dot = np.abs(ax * bx + ay * by)
    na = segment_lengths(a_di, a_dj, dx, dy) if a_len is None else a_len
    nb = segment_lengths(b_di, b_dj, dx, dy) if b_len is None else b_len
    return dot <= na * nb * math.sin(math.radians(tolerance_deg + ANGLE_SLACK_DEG))


def line_angle_deg(di, dj, dx: float, dy: float) -> np.ndarray:
    """Undirected line orientation in degrees, in [0, 180)."""
    ang = np.degrees(np.arctan2(np.asarray(dj, dtype=np.int64) * dy, np.asarray(di, dtype=np.int64) * dx))
    ang = np.mod(ang, 180.0)
    return np.where(ang >= 180.0, 0.0, ang)


def _nearest(num, n):
    """Nearest integer(s) to num/n: returns (low, high), equal unless num/n is a half-integer."""
    q, r = np.divmod(num, n)
    twice = 2 * r
    low = q + (twice > n)
    high = low + (twice == n)
    return low, high


def _inside(grid, plane, rid, i0, j0, i1, j1, n, k):
    """Whether sample ``k`` (of ``n`` intervals) of each segment lies in its region."""
    x_lo, x_hi = _nearest(i0 * n + k * (i1 - i0), n)
    y_lo, y_hi = _nearest(j0 * n + k * (j1 - j0), n)
    return (
        (grid[plane, x_lo, y_lo] == rid)
        | (grid[plane, x_hi, y_lo] == rid)
        | (grid[plane, x_lo, y_hi] == rid)
        | (grid[plane, x_hi, y_hi] == rid)
    )


_PROBES = 8


def inscribed_batch(grid, region_ids, i0, j0, i1, j1, n, max_samples: int = 2_000_000) -> np.ndarray:
    """Vectorised inscription test against a stack of region-id maps.

    Args:
        grid: integer array ``grid[plane, i, j]`` holding a region id per pixel
            (0 outside every region).
        region_ids: ``(m, 2)`` array of ``(plane, region_id)`` per candidate.
        i0, j0, i1, j1: endpoint voxel indices into ``grid[plane]``.
        n: sampling intervals per candidate.
    """
    i0 = np.asarray(i0, dtype=np.int64)
    m = i0.size
    out = np.zeros(m, dtype=bool)
    if m == 0:
        return out
    j0 = np.asarray(j0, dtype=np.int64)
    i1 = np.asarray(i1, dtype=np.int64)
    j1 = np.asarray(j1, dtype=np.int64)
    n = np.asarray(n, dtype=np.int64)
    plane = np.asarray(region_ids[:, 0], dtype=np.int64)
    rid = np.asarray(region_ids[:, 1])

    # a few evenly spread samples reject most failing segments cheaply
    alive = np.ones(m, dtype=bool)
    for t in range(1, _PROBES):
        idx = np.nonzero(alive)[0]
        if not idx.size:
            return out
        nn = n[idx]
        alive[idx] = _inside(grid, plane[idx], rid[idx], i0[idx], j0[idx], i1[idx], j1[idx], nn, nn * t // _PROBES)
    todo = np.nonzero(alive)[0]

    per = n[todo] + 1
    start = 0
    while start < todo.size:
        # chunk so that the flattened sample arrays stay bounded
        csum = np.cumsum(per[start:])
        stop = start + max(1, int(np.searchsorted(csum, max_samples, side="right")))
        sel = todo[start:stop]
        counts = per[start:stop]
        offsets = np.concatenate(([0], np.cumsum(counts)[:-1]))
        owner = np.repeat(sel, counts)
        k = np.arange(int(counts.sum()), dtype=np.int64) - np.repeat(offsets, counts)
        inside = _inside(grid, plane[owner], rid[owner], i0[owner], j0[owner], i1[owner], j1[owner], n[owner], k)
        out[sel] = np.logical_and.reduceat(inside, offsets)
        start = stop
    return out


def is_inscribed(segment: Segment2D, region: np.ndarray, dx: float, dy: float, step: float | None = None) -> bool:
    """Whether every sample along ``segment`` falls on a set pixel of ``region``.

    ``region`` is a 2D boolean array indexed by the same voxel indices as the
    segment endpoints.  The default step is a quarter of the finer in-plane
    spacing.
    """
    if step is None:
        step = 0.25 * min(dx, dy)
    (a, b), (c, d) = segment.p0_vox, segment.p1_vox
    n = int(sample_counts([segment.length_mm], step)[0])
    nx, ny = region.shape

    def hit(x, y):
        return 0 <= x < nx and 0 <= y < ny and bool(region[x, y])

    for k in range(n + 1):
        x_lo, x_hi = (int(v) for v in _nearest(a * n + k * (c - a), n))
        y_lo, y_hi = (int(v) for v in _nearest(b * n + k * (d - b), n))
        if not (hit(x_lo, y_lo) or hit(x_hi, y_lo) or hit(x_lo, y_hi) or hit(x_hi, y_hi)):
            return False
    return True


def top_sum(products, limit: int) -> float:
    ranked = sorted((p for p in products if p > 0), reverse=True)[:limit]
    return math.fsum(ranked)
