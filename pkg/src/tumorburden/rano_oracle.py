"""Exhaustive reference implementation of both RANO algorithms.

Every pair of set pixels in a slice is a candidate segment and, for the
product algorithm, every pair of inscribed segments is a candidate pair.  No
bounds, no pruning.  Only the feasibility rules (length, perpendicularity,
sample count) are shared with the optimised search; in-plane regions and the
inscription test are computed independently here.  Meant for verification on
small inputs.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .segments import (
    LesionMeasurement,
    RanoMeasurement,
    RanoParams,
    Segment2D,
    perpendicular,
    sample_counts,
    segment_lengths,
    top_sum,
)
from .volume import BinaryMask, connected_components

GUARD_PIXELS = 4096


class OracleGuardError(ValueError):
    pass


def _flood_regions(plane: np.ndarray) -> np.ndarray:
    """8-connected region ids by breadth-first search, numbered in scan order."""
    ids = np.zeros(plane.shape, dtype=np.int64)
    nx, ny = plane.shape
    current = 0
    for i in range(nx):
        for j in range(ny):
            if not plane[i, j] or ids[i, j]:
                continue
            current += 1
            ids[i, j] = current
            queue = deque([(i, j)])
            while queue:
                a, b = queue.popleft()
                for da in (-1, 0, 1):
                    for db in (-1, 0, 1):
                        x, y = a + da, b + db
                        if 0 <= x < nx and 0 <= y < ny and plane[x, y] and not ids[x, y]:
                            ids[x, y] = current
                            queue.append((x, y))
    return ids


def _inscribed(ids: np.ndarray, region: np.ndarray, i0, j0, i1, j1, n) -> np.ndarray:
    """Dense sampling test: each sample's nearest centre(s) must carry ``region``."""
    nx, ny = ids.shape
    out = np.ones(len(i0), dtype=bool)
    nmax = int(n.max()) if len(n) else 0
    for k in range(nmax + 1):
        live = out & (k <= n)
        if not live.any():
            break
        idx = np.nonzero(live)[0]
        m = n[idx]
        cand = []
        for start, end in ((i0, i1), (j0, j1)):
            num = start[idx] * m + k * (end[idx] - start[idx])
            top = (2 * num + m) // (2 * m)
            tie = (2 * num + m) % (2 * m) == 0
            cand.append((top - tie, top))
        hit = np.zeros(idx.size, dtype=bool)
        for x in cand[0]:
            for y in cand[1]:
                valid = (x >= 0) & (x < nx) & (y >= 0) & (y < ny)
                val = np.zeros(idx.size, dtype=np.int64)
                val[valid] = ids[x[valid], y[valid]]
                hit |= val == region[idx]
        out[idx] = hit
    return out


def _slice_segments(plane: np.ndarray, z: int, dx, dy, params: RanoParams):
    """All inscribed segments >= min diameter in one slice, as a dict of arrays."""
    pix = np.argwhere(plane)
    if len(pix) > GUARD_PIXELS:
        raise OracleGuardError(f"slice {z} has {len(pix)} set pixels; oracle guard is {GUARD_PIXELS}")
    ids = _flood_regions(plane)
    a, b = np.meshgrid(np.arange(len(pix)), np.arange(len(pix)), indexing="ij")
    a, b = a.ravel(), b.ravel()
    # ordered pairs, one canonical orientation kept
    first = (pix[a, 0] < pix[b, 0]) | ((pix[a, 0] == pix[b, 0]) & (pix[a, 1] < pix[b, 1]))
    a, b = a[first], b[first]
    if not a.size:
        return None
    i0, j0, i1, j1 = pix[a, 0], pix[a, 1], pix[b, 0], pix[b, 1]
    length = segment_lengths(i1 - i0, j1 - j0, dx, dy)
    keep = length >= params.min_diameter_mm
    i0, j0, i1, j1, length = i0[keep], j0[keep], i1[keep], j1[keep], length[keep]
    region = ids[i0, j0]
    same = region == ids[i1, j1]
    i0, j0, i1, j1, length, region = i0[same], j0[same], i1[same], j1[same], length[same], region[same]
    n = sample_counts(length, params.step_for(dx, dy))
    ok = _inscribed(ids, region, i0, j0, i1, j1, n)
    return {
        "z": np.full(int(ok.sum()), z, dtype=np.int64),
        "i0": i0[ok], "j0": j0[ok], "i1": i1[ok], "j1": j1[ok],
        "length": length[ok], "region": region[ok],
    }


def _component_segments(comp: np.ndarray, dx, dy, params):
    parts = []
    for z in range(comp.shape[2]):
        if comp[:, :, z].any():
            seg = _slice_segments(comp[:, :, z], z, dx, dy, params)
            if seg is not None and seg["length"].size:
                parts.append(seg)
    if not parts:
        return None
    return {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}


def _key(s, k):
    return (int(s["i0"][k]), int(s["j0"][k]), int(s["i1"][k]), int(s["j1"][k]))


def _seg(s, k, dx, dy) -> Segment2D:
    return Segment2D.from_voxels((s["i0"][k], s["j0"][k]), (s["i1"][k], s["j1"][k]), dx, dy)


def _oracle_diameters(cid, s, dx, dy, params) -> LesionMeasurement:
    if s is None:
        return LesionMeasurement.unmeasurable(cid)
    longest = s["length"].max()
    majors = sorted(np.nonzero(s["length"] == longest)[0], key=lambda k: (int(s["z"][k]),) + _key(s, k))
    best = None
    for m in majors:
        di, dj = s["i1"][m] - s["i0"][m], s["j1"][m] - s["j0"][m]
        pool = np.nonzero((s["z"] == s["z"][m]) & (s["region"] == s["region"][m]))[0]
        ok = perpendicular(s["i1"][pool] - s["i0"][pool], s["j1"][pool] - s["j0"][pool], di, dj, dx, dy,
                           params.angle_tolerance_deg)
        pool = pool[ok]
        if not pool.size:
            continue
        top = s["length"][pool].max()
        p = min(pool[s["length"][pool] == top], key=lambda k: _key(s, k))
        if best is None or s["length"][p] > s["length"][best[1]]:
            best = (m, p)
    if best is None:
        return LesionMeasurement.unmeasurable(cid)
    m, p = best
    major, perp = _seg(s, m, dx, dy), _seg(s, p, dx, dy)
    return LesionMeasurement(cid, int(s["z"][m]), major, perp, major.length_mm * perp.length_mm, True)


def _oracle_product(cid, s, dx, dy, params) -> LesionMeasurement:
    if s is None:
        return LesionMeasurement.unmeasurable(cid)
    best = 0.0
    winners = []
    groups = {}
    for k in range(s["length"].size):
        groups.setdefault((int(s["z"][k]), int(s["region"][k])), []).append(k)
    for members in groups.values():
        members = np.array(members)
        di = s["i1"][members] - s["i0"][members]
        dj = s["j1"][members] - s["j0"][members]
        length = s["length"][members]
        tol = params.angle_tolerance_deg
        for start in range(0, members.size, 256):
            rows = np.arange(start, min(members.size, start + 256))
            cols = np.arange(start, members.size)
            ok = perpendicular(di[None, cols], dj[None, cols], di[rows, None], dj[rows, None], dx, dy, tol,
                               length[None, cols], length[rows, None])
            ok &= cols[None, :] > rows[:, None]
            if not ok.any():
                continue
            prods = np.where(ok, length[rows, None] * length[None, cols], -1.0)
            top = prods.max()
            if top > best:
                best, winners = top, []
            if top == best:
                ra, rb = np.nonzero(prods == top)
                winners.extend(zip(members[rows[ra]], members[cols[rb]]))
    if not winners:
        return LesionMeasurement.unmeasurable(cid)

    def arrange(pair):
        a, b = pair
        if (s["length"][b], _key(s, a)) > (s["length"][a], _key(s, b)):
            a, b = b, a
        return a, b

    def rank(pair):
        a, b = arrange(pair)
        return (-s["length"][a], int(s["z"][a]), _key(s, a), _key(s, b))

    a, b = arrange(min(winners, key=rank))
    return LesionMeasurement(cid, int(s["z"][a]), _seg(s, a, dx, dy), _seg(s, b, dx, dy), float(best), True)


def rano_oracle(et: BinaryMask, params: RanoParams | None = None, algorithm: str = "diameters") -> RanoMeasurement:
    """Brute-force RANO; raises :class:`OracleGuardError` on slices over the pixel guard."""
    params = params or RanoParams()
    if algorithm not in ("diameters", "product"):
        raise ValueError(f"unknown RANO algorithm {algorithm!r}")
    dx, dy = et.spacing.dx, et.spacing.dy
    labeling = connected_components(et, params.connectivity)
    lesions = []
    for cid in range(1, labeling.count + 1):
        segs = _component_segments(labeling.labels == cid, dx, dy, params)
        fn = _oracle_diameters if algorithm == "diameters" else _oracle_product
        lesions.append(fn(cid, segs, dx, dy, params))
    lesions.sort(key=lambda m: (-m.product_mm2, m.component_id))
    total = top_sum((m.product_mm2 for m in lesions if m.measurable), params.max_lesions)
    return RanoMeasurement(algorithm, tuple(lesions), total)
