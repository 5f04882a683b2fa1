"""Voxel-grid data model.

Label volumes are stored as ``(nx, ny, nz)`` numpy arrays indexed ``[i, j, k]``.
The third axis is the slice axis used by the bidimensional measurements; the
in-plane axes carry spacings ``dx`` and ``dy``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

DEFAULT_LABELS = {"et": 1, "ed": 2, "cavity": 3}
TUMOR_CLASSES = ("et", "ed", "cavity")


@dataclass(frozen=True)
class Spacing:
    """Millimetres per voxel along x, y (in-plane) and z (slice axis)."""

    dx: float
    dy: float
    dz: float

    def __post_init__(self):
        for name in ("dx", "dy", "dz"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"spacing {name} must be positive and finite, got {value!r}")
        object.__setattr__(self, "dx", float(self.dx))
        object.__setattr__(self, "dy", float(self.dy))
        object.__setattr__(self, "dz", float(self.dz))

    @property
    def voxel_volume(self) -> float:
        return self.dx * self.dy * self.dz

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.dz)

    def scaled(self, sx: float = 1.0, sy: float = 1.0, sz: float = 1.0) -> "Spacing":
        return Spacing(self.dx * sx, self.dy * sy, self.dz * sz)


def parse_label_map(text: str) -> dict[str, int]:
    """Parse ``"et=1,ed=2,cavity=3"`` into a class -> label mapping."""
    mapping = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        name, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"malformed label mapping entry {item!r}")
        name = name.strip().lower()
        label = int(value)
        if not 0 < label < 256:
            raise ValueError(f"label for {name!r} must be in 1..255, got {label}")
        mapping[name] = label
    if len(set(mapping.values())) != len(mapping):
        raise ValueError("label values must be distinct")
    return mapping


@dataclass
class LabelVolume:
    labels: np.ndarray
    spacing: Spacing
    label_semantics: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_LABELS))

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"label volume must be 3D, got shape {labels.shape}")
        if min(labels.shape) < 1:
            raise ValueError(f"label volume dims must be positive, got {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError(f"labels must be integers, got dtype {labels.dtype}")
        if labels.size and (labels.min() < 0 or labels.max() > 255):
            raise ValueError("labels must fit in 0..255")
        self.labels = labels.astype(np.uint8, copy=False)
        known = set(self.label_semantics.values()) | {0}
        present = set(np.unique(self.labels).tolist())
        unknown = present - known
        if unknown:
            raise ValueError(f"label values {sorted(unknown)} are not in the label semantics")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.labels.shape)

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.label_semantics == other.label_semantics
            and self.labels.shape == other.labels.shape
            and bool(np.array_equal(self.labels, other.labels))
        )

    def with_labels(self, labels: np.ndarray) -> "LabelVolume":
        return LabelVolume(labels, self.spacing, dict(self.label_semantics))


@dataclass
class BinaryMask:
    data: np.ndarray
    spacing: Spacing

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(int(n) for n in self.data.shape)

    def count(self) -> int:
        return int(np.count_nonzero(self.data))

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.spacing == other.spacing and bool(np.array_equal(self.data, other.data))


@dataclass
class ComponentLabeling:
    labels: np.ndarray
    count: int
    connectivity: int

    def component(self, component_id: int) -> np.ndarray:
        return self.labels == component_id


@dataclass
class Slice2D:
    """One axial plane of a mask, with in-plane spacing."""

    data: np.ndarray
    dx: float
    dy: float
    index: int


def class_mask(volume: LabelVolume, name: str) -> BinaryMask:
    key = name.lower()
    if key not in volume.label_semantics:
        raise KeyError(f"unknown class {name!r}; known: {sorted(volume.label_semantics)}")
    return BinaryMask(volume.labels == volume.label_semantics[key], volume.spacing)


_STRUCTURE_RANK = {6: 1, 18: 2, 26: 3, 4: 1, 8: 2}


def structure(connectivity: int, ndim: int = 3) -> np.ndarray:
    valid = (6, 18, 26) if ndim == 3 else (4, 8)
    if connectivity not in valid:
        raise ValueError(f"connectivity must be one of {valid} for {ndim}D, got {connectivity}")
    return ndimage.generate_binary_structure(ndim, _STRUCTURE_RANK[connectivity])


def label_components(data: np.ndarray, connectivity: int) -> tuple[np.ndarray, int]:
    """Label an nD boolean array; ids follow the lexicographically smallest voxel.

    Works for 3D (6/18/26) and 2D (4/8) connectivity.
    """
    data = np.asarray(data, dtype=bool)
    raw, count = ndimage.label(data, structure=structure(connectivity, data.ndim))
    if count == 0:
        return raw.astype(np.int32), 0
    flat = raw.ravel()
    nz = np.flatnonzero(flat)
    # first flat index (C order == lexicographic) of every raw label
    first = np.full(count + 1, flat.size, dtype=np.int64)
    np.minimum.at(first, flat[nz], nz)
    order = np.argsort(first[1:], kind="stable") + 1
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[order] = np.arange(1, count + 1, dtype=np.int32)
    return remap[raw], int(count)


def connected_components(mask: BinaryMask, connectivity: int = 26) -> ComponentLabeling:
    labels, count = label_components(mask.data, connectivity)
    return ComponentLabeling(labels, count, connectivity)


def volume_mm3(mask: BinaryMask) -> float:
    return mask.count() * mask.spacing.voxel_volume


def extract_slice(mask: BinaryMask, k: int) -> Slice2D:
    nz = mask.data.shape[2]
    if not 0 <= k < nz:
        raise IndexError(f"slice index {k} out of range 0..{nz - 1}")
    return Slice2D(mask.data[:, :, k].copy(), mask.spacing.dx, mask.spacing.dy, k)


def boundary_array(data: np.ndarray) -> np.ndarray:
    """Set voxels with an unset face-neighbour or lying on the array border."""
    data = np.asarray(data, dtype=bool)
    padded = np.pad(data, 1, constant_values=False)
    eroded = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(data.ndim, 1))
    return data & ~eroded[tuple(slice(1, -1) for _ in range(data.ndim))]


def boundary_voxels(mask: BinaryMask) -> np.ndarray:
    """Coordinates ``(n, 3)`` of boundary voxels in lexicographic order."""
    return np.argwhere(boundary_array(mask.data))
