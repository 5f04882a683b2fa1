"""Automated bidimensional (RANO) measurements of enhancing-tumour components.

Two algorithms are provided:

``diameters``
    Longest inscribed segment of the component over all axial slices, then the
    longest inscribed segment in the same slice region within the angular
    tolerance of perpendicular.
``product``
    The inscribed, near-perpendicular pair in one slice region with the largest
    product of lengths.

Both are exact: the search returns what exhaustive enumeration of every pair
of set-pixel endpoints would return (see :mod:`tumorburden.rano_oracle`).
Speed comes from ordering and bounding, never from dropping candidates:

* boundary-pixel pairs give a cheap lower bound on the longest inscribed
  segment, after which only pairs at least that long are inscription-tested,
  longest first;
* for the product search, a lower bound on the best product and the largest
  pixel-set diameter of each region bound the segment lengths worth testing,
  and a range-maximum over angle-sorted segments bounds the best partner of
  each segment.

Ties are broken deterministically (see :func:`_segment_key`), so results do
not depend on thread count or iteration order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .segments import (
    LesionMeasurement,
    RanoMeasurement,
    RanoParams,
    Segment2D,
    inscribed_batch,
    line_angle_deg,
    perpendicular,
    sample_counts,
    segment_lengths,
    top_sum,
)
from .volume import BinaryMask, boundary_array, label_components

ALGORITHMS = ("diameters", "product")
_REL = 1e-9
_WINDOW_SLACK_DEG = 1e-6
_PAIR_BLOCK = 2_000_000


@dataclass
class _Region:
    plane: int  # index into the component's grid stack
    z: int
    rid: int
    coords: np.ndarray  # (A, 2) global (i, j), lexicographic
    boundary: np.ndarray  # (A,) bool


@dataclass
class _Component:
    cid: int
    origin: tuple[int, int]
    grid: np.ndarray  # (planes, bx, by) int32, region id per pixel, 0 outside
    regions: list[_Region] = field(default_factory=list)


@dataclass
class _Cands:
    """Candidate segments, canonical (p0 < p1 lexicographically)."""

    reg: np.ndarray
    i0: np.ndarray
    j0: np.ndarray
    i1: np.ndarray
    j1: np.ndarray
    length: np.ndarray

    @classmethod
    def empty(cls) -> "_Cands":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, z, np.zeros(0))

    @classmethod
    def concat(cls, parts) -> "_Cands":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("reg", "i0", "j0", "i1", "j1", "length")))

    def __len__(self):
        return int(self.reg.size)

    def take(self, idx) -> "_Cands":
        return _Cands(self.reg[idx], self.i0[idx], self.j0[idx], self.i1[idx], self.j1[idx], self.length[idx])

    @property
    def di(self):
        return self.i1 - self.i0

    @property
    def dj(self):
        return self.j1 - self.j0


def _pairs(coords: np.ndarray, dx: float, dy: float, min_length: float):
    """Index pairs ``u < v`` of ``coords`` whose segment length is >= min_length."""
    a_count = len(coords)
    us, vs, ls = [], [], []
    if a_count < 2:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    block = max(1, _PAIR_BLOCK // a_count)
    cols = np.arange(a_count)
    for a in range(0, a_count, block):
        b = min(a_count, a + block)
        di = coords[None, :, 0] - coords[a:b, None, 0]
        dj = coords[None, :, 1] - coords[a:b, None, 1]
        length = segment_lengths(di, dj, dx, dy)
        keep = (length >= min_length) & (cols[None, :] > np.arange(a, b)[:, None])
        r, c = np.nonzero(keep)
        us.append(r + a)
        vs.append(c)
        ls.append(length[r, c])
    return np.concatenate(us), np.concatenate(vs), np.concatenate(ls)


def _region_cands(region_index: int, coords: np.ndarray, dx, dy, min_length) -> _Cands:
    u, v, length = _pairs(coords, dx, dy, min_length)
    return _Cands(
        np.full(u.size, region_index, dtype=np.int64),
        coords[u, 0], coords[u, 1], coords[v, 0], coords[v, 1], length,
    )


def _sort_by_key(comp: _Component, c: _Cands) -> _Cands:
    """Order by descending length, then slice, then endpoints."""
    if not len(c):
        return c
    z = np.array([r.z for r in comp.regions], dtype=np.int64)[c.reg]
    order = np.lexsort((c.j1, c.i1, c.j0, c.i0, z, -c.length))
    return c.take(order)


def _inscribed(comp: _Component, c: _Cands, step: float) -> np.ndarray:
    if not len(c):
        return np.zeros(0, dtype=bool)
    planes = np.array([r.plane for r in comp.regions], dtype=np.int64)[c.reg]
    rids = np.array([r.rid for r in comp.regions], dtype=np.int64)[c.reg]
    oi, oj = comp.origin
    return inscribed_batch(
        comp.grid,
        np.stack([planes, rids], axis=1),
        c.i0 - oi, c.j0 - oj, c.i1 - oi, c.j1 - oj,
        sample_counts(c.length, step),
    )


def _first_inscribed(comp: _Component, c: _Cands, step: float) -> int | None:
    """Position of the first inscribed candidate of an already sorted list."""
    pos, size = 0, 16
    while pos < len(c):
        stop = min(len(c), pos + size)
        ok = _inscribed(comp, c.take(slice(pos, stop)), step)
        if ok.any():
            return pos + int(np.argmax(ok))
        pos = stop
        size = min(size * 4, 1 << 16)
    return None


def _longest(comp: _Component, region_indices, min_length, dx, dy, step) -> _Cands:
    """All inscribed segments of maximal length (>= min_length), in key order."""
    bound_parts = []
    for idx in region_indices:
        region = comp.regions[idx]
        bound_parts.append(_region_cands(idx, region.coords[region.boundary], dx, dy, min_length))
    bound = _sort_by_key(comp, _Cands.concat(bound_parts))
    hit = _first_inscribed(comp, bound, step)
    floor = bound.length[hit] if hit is not None else min_length

    full = _sort_by_key(
        comp,
        _Cands.concat(_region_cands(idx, comp.regions[idx].coords, dx, dy, floor) for idx in region_indices),
    )
    hit = _first_inscribed(comp, full, step)
    if hit is None:
        return _Cands.empty()
    best = full.length[hit]
    tied = full.take(slice(hit, int(np.searchsorted(-full.length, -best, side="right"))))
    return tied.take(_inscribed(comp, tied, step))


def _longest_perpendicular(comp: _Component, region_index, major_di, major_dj, params, dx, dy, step):
    region = comp.regions[region_index]
    c = _region_cands(region_index, region.coords, dx, dy, params.min_diameter_mm)
    ok = perpendicular(c.di, c.dj, major_di, major_dj, dx, dy, params.angle_tolerance_deg)
    c = _sort_by_key(comp, c.take(ok))
    hit = _first_inscribed(comp, c, step)
    return None if hit is None else c.take(slice(hit, hit + 1))


def _segment(c: _Cands, k: int, dx, dy) -> Segment2D:
    i0, j0, i1, j1 = (int(a[k]) for a in (c.i0, c.j0, c.i1, c.j1))
    return Segment2D((i0, j0), (i1, j1), (i0 * dx, j0 * dy), (i1 * dx, j1 * dy), float(c.length[k]))


def _segment_key(c: _Cands, k: int):
    return (int(c.i0[k]), int(c.j0[k]), int(c.i1[k]), int(c.j1[k]))


def _build_components(mask: np.ndarray, connectivity: int) -> list[_Component]:
    labels, count = label_components(mask, connectivity)
    comps = []
    for cid, box in enumerate(ndimage.find_objects(labels), start=1):
        sub = labels[box] == cid
        planes = [k for k in range(sub.shape[2]) if sub[:, :, k].any()]
        grid = np.zeros((len(planes), sub.shape[0], sub.shape[1]), dtype=np.int32)
        comp = _Component(cid, (box[0].start, box[1].start), grid)
        next_id = 1
        for p, k in enumerate(planes):
            lab2d, n2d = label_components(sub[:, :, k], 8)
            for r in range(1, n2d + 1):
                member = lab2d == r
                grid[p][member] = next_id
                local = np.argwhere(member)
                comp.regions.append(
                    _Region(
                        plane=p,
                        z=box[2].start + k,
                        rid=next_id,
                        coords=local + np.array(comp.origin),
                        boundary=boundary_array(member)[member],
                    )
                )
                next_id += 1
        comps.append(comp)
    return comps


def _diameters(comp: _Component, params: RanoParams, dx, dy) -> LesionMeasurement:
    step = params.step_for(dx, dy)
    majors = _longest(comp, range(len(comp.regions)), params.min_diameter_mm, dx, dy, step)
    best = None
    for k in range(len(majors)):
        perp = _longest_perpendicular(comp, int(majors.reg[k]), majors.di[k], majors.dj[k], params, dx, dy, step)
        if perp is None:
            continue
        # equal-length majors: prefer the longer perpendicular, then key order
        if best is None or perp.length[0] > best[1].length[0]:
            best = (k, perp)
    if best is None:
        return LesionMeasurement.unmeasurable(comp.cid)
    k, perp = best
    major_seg = _segment(majors, k, dx, dy)
    perp_seg = _segment(perp, 0, dx, dy)
    return LesionMeasurement(
        comp.cid,
        comp.regions[int(majors.reg[k])].z,
        major_seg,
        perp_seg,
        major_seg.length_mm * perp_seg.length_mm,
        True,
    )


class _RangeMax:
    """Sparse table for static range-maximum queries."""

    def __init__(self, values: np.ndarray):
        self.levels = [np.asarray(values, dtype=float)]
        width = 1
        while 2 * width <= len(values):
            prev = self.levels[-1]
            self.levels.append(np.maximum(prev[:-width], prev[width:]))
            width *= 2

    def query(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Max over ``[lo, hi)``; -inf for empty ranges."""
        out = np.full(lo.shape, -np.inf)
        span = hi - lo
        ok = span > 0
        if not ok.any():
            return out
        lev = np.zeros(span.shape, dtype=np.int64)
        lev[ok] = np.floor(np.log2(span[ok])).astype(np.int64)
        for level in np.unique(lev[ok]):
            sel = ok & (lev == level)
            table = self.levels[level]
            w = 1 << int(level)
            out[sel] = np.maximum(table[lo[sel]], table[hi[sel] - w])
        return out


class _AngleIndex:
    """Segments sorted by orientation, doubled over [0, 360) for wrap-free windows."""

    def __init__(self, c: _Cands, dx, dy, tolerance):
        theta = line_angle_deg(c.di, c.dj, dx, dy)
        self.order = np.argsort(theta, kind="stable")
        sorted_theta = theta[self.order]
        self.theta2 = np.concatenate([sorted_theta, sorted_theta + 180.0])
        self.length2 = np.concatenate([c.length[self.order]] * 2)
        self.rmq = _RangeMax(self.length2)
        self.theta = theta
        self.size = len(c)
        self.tolerance = tolerance

    def windows(self, theta):
        centre = theta + 90.0
        lo = np.searchsorted(self.theta2, centre - self.tolerance - _WINDOW_SLACK_DEG, side="left")
        hi = np.searchsorted(self.theta2, centre + self.tolerance + _WINDOW_SLACK_DEG, side="right")
        return lo, hi

    def partner_bound(self, theta) -> np.ndarray:
        lo, hi = self.windows(theta)
        return self.rmq.query(lo, hi)

    def members(self, lo: int, hi: int) -> np.ndarray:
        return self.order[np.arange(lo, hi) % self.size]


def _region_diameter(region: _Region, dx, dy) -> float:
    """Largest distance between pixel centres of the region (attained on the boundary)."""
    pts = region.coords[region.boundary]
    if len(pts) < 2:
        return 0.0
    _, _, length = _pairs(pts, dx, dy, 0.0)
    return float(length.max())


def _product(comp: _Component, params: RanoParams, dx, dy, seed: LesionMeasurement | None) -> LesionMeasurement:
    step = params.step_for(dx, dy)
    tol = params.angle_tolerance_deg
    min_d = params.min_diameter_mm
    best = seed.product_mm2 if seed is not None and seed.measurable else 0.0
    found = []  # (product, region, seg a, seg b) with a, b as 1-element _Cands

    diam = [_region_diameter(r, dx, dy) for r in comp.regions]
    for idx in sorted(range(len(comp.regions)), key=lambda i: (-diam[i], i)):
        if diam[idx] < min_d or diam[idx] * diam[idx] < best * (1 - _REL):
            continue
        floor = max(min_d, best * (1 - _REL) / diam[idx]) if best > 0 else min_d
        cands = _region_cands(idx, comp.regions[idx].coords, dx, dy, floor)
        if len(cands) < 2:
            continue
        # untested candidates bound the partner of every inscribed segment
        index = _AngleIndex(cands, dx, dy, tol)
        bound = cands.length * index.partner_bound(index.theta)
        cands = cands.take(bound >= best * (1 - _REL))
        cands = cands.take(_inscribed(comp, cands, step))
        if len(cands) < 2:
            continue
        index = _AngleIndex(cands, dx, dy, tol)
        bound = cands.length * index.partner_bound(index.theta)
        lo, hi = index.windows(index.theta)
        for s in np.argsort(-bound, kind="stable"):
            if bound[s] < best * (1 - _REL) or not np.isfinite(bound[s]):
                break
            partners = index.members(lo[s], hi[s])
            ok = perpendicular(cands.di[partners], cands.dj[partners], cands.di[s], cands.dj[s], dx, dy, tol,
                               cands.length[partners], cands.length[s])
            partners = partners[ok]
            if not partners.size:
                continue
            prods = cands.length[s] * cands.length[partners]
            keep = prods >= best * (1 - _REL)
            for p, prod in zip(partners[keep], prods[keep]):
                found.append((float(prod), cands.take(slice(s, s + 1)), cands.take(slice(p, p + 1))))
            best = max(best, float(prods.max()))

    winners = [f for f in found if f[0] == best]
    if not winners:
        return LesionMeasurement.unmeasurable(comp.cid)

    def ordered(entry):
        _, a, b = entry
        ka, kb = _segment_key(a, 0), _segment_key(b, 0)
        if (b.length[0], ka) > (a.length[0], kb):
            a, b, ka, kb = b, a, kb, ka
        return a, b, ka, kb

    def rank(entry):
        a, b, ka, kb = ordered(entry)
        return (-a.length[0], comp.regions[int(a.reg[0])].z, ka, kb)

    a, b, _, _ = ordered(min(winners, key=rank))
    major = _segment(a, 0, dx, dy)
    perp = _segment(b, 0, dx, dy)
    return LesionMeasurement(comp.cid, comp.regions[int(a.reg[0])].z, major, perp, best, True)


def _ranked(lesions) -> tuple[LesionMeasurement, ...]:
    return tuple(sorted(lesions, key=lambda m: (-m.product_mm2, m.component_id)))


def _as_mask(mask) -> tuple[np.ndarray, float, float]:
    if isinstance(mask, BinaryMask):
        return mask.data, mask.spacing.dx, mask.spacing.dy
    raise TypeError("expected a BinaryMask")


def measure_lesion_diameters(region3d: BinaryMask, params: RanoParams | None = None, component_id: int = 1) -> LesionMeasurement:
    """Automated RANO (Diameters) for a mask holding one connected lesion."""
    params = params or RanoParams()
    data, dx, dy = _as_mask(region3d)
    comps = _build_components(data, params.connectivity)
    if not comps:
        return LesionMeasurement.unmeasurable(component_id)
    if len(comps) > 1:
        raise ValueError("region3d must hold a single connected component")
    comps[0].cid = component_id
    return _diameters(comps[0], params, dx, dy)


def measure_lesion_product(region3d: BinaryMask, params: RanoParams | None = None, component_id: int = 1) -> LesionMeasurement:
    """Automated RANO (Product) for a mask holding one connected lesion."""
    params = params or RanoParams()
    data, dx, dy = _as_mask(region3d)
    comps = _build_components(data, params.connectivity)
    if not comps:
        return LesionMeasurement.unmeasurable(component_id)
    if len(comps) > 1:
        raise ValueError("region3d must hold a single connected component")
    comps[0].cid = component_id
    seed = _diameters(comps[0], params, dx, dy)
    return _product(comps[0], params, dx, dy, seed)


def measure(et: BinaryMask, params: RanoParams | None = None, algorithms=ALGORITHMS, threads: int = 1) -> dict[str, RanoMeasurement]:
    """Run one or both algorithms, sharing the diameters pass as the product seed."""
    params = params or RanoParams()
    for name in algorithms:
        if name not in ALGORITHMS:
            raise ValueError(f"unknown RANO algorithm {name!r}")
    data, dx, dy = _as_mask(et)
    comps = _build_components(data, params.connectivity)

    def one(comp):
        diam = _diameters(comp, params, dx, dy)
        out = {"diameters": diam}
        if "product" in algorithms:
            out["product"] = _product(comp, params, dx, dy, diam)
        return out

    if threads > 1 and len(comps) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_comp = list(pool.map(one, comps))
    else:
        per_comp = [one(c) for c in comps]

    results = {}
    for name in algorithms:
        lesions = _ranked(m[name] for m in per_comp)
        total = top_sum((m.product_mm2 for m in lesions if m.measurable), params.max_lesions)
        results[name] = RanoMeasurement(name, lesions, total)
    return results


def rano(et: BinaryMask, params: RanoParams | None = None, algorithm: str = "diameters", threads: int = 1) -> RanoMeasurement:
    """Automated RANO over every 3D component of an enhancing-tumour mask."""
    return measure(et, params, (algorithm,), threads)[algorithm]
