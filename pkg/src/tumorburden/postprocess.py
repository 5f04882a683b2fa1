"""False-positive pruning of enhancing tumour (ET) that is not supported by edema (ED)."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, label_components, structure

MODES = ("component", "voxel")


def touches_ed(volume: LabelVolume, connectivity: int = 26) -> np.ndarray:
    """ET voxels with at least one ED voxel among their neighbours."""
    sem = volume.label_semantics
    et = volume.labels == sem["et"]
    ed = volume.labels == sem["ed"]
    near_ed = ndimage.binary_dilation(ed, structure=structure(connectivity, 3))
    return et & near_ed


def prune_unsupported_et(volume: LabelVolume, connectivity: int = 26, mode: str = "component") -> LabelVolume:
    """Relabel ET that is not adjacent to ED as background.

    In ``component`` mode (default) whole ET components without a single
    voxel adjacent to ED are removed; supported components are kept intact.
    ``voxel`` mode removes every individual ET voxel without an ED neighbour,
    which also strips the interior of supported components.
    """
    if mode not in MODES:
        raise ValueError(f"postprocess mode must be one of {MODES}, got {mode!r}")
    for name in ("et", "ed"):
        if name not in volume.label_semantics:
            raise KeyError(f"label semantics lack the {name!r} class")
    et_label = volume.label_semantics["et"]
    et = volume.labels == et_label
    supported = touches_ed(volume, connectivity)
    if mode == "voxel":
        remove = et & ~supported
    else:
        components, count = label_components(et, connectivity)
        keep = np.zeros(count + 1, dtype=bool)
        keep[np.unique(components[supported])] = True
        keep[0] = False
        remove = et & ~keep[components]
    labels = volume.labels.copy()
    labels[remove] = 0
    return volume.with_labels(labels)
