"""Tumor-burden measurements for brain-tumor label volumes.

Volumetrics, automated bidimensional (RANO) measurements, segmentation
metrics, agreement statistics and a confidence-weighted loss.
"""

__version__ = "0.1.0"

from .agreement import (
    AgreementReport,
    RatingsMatrix,
    aggregate_ratings,
    bland_altman,
    icc_2_1,
    read_ratings_csv,
    spearman,
)
from .loss import (
    LossValue,
    alpha,
    confidence_weighted_loss,
    cross_entropy_loss,
    soft_dice_loss,
)
from .metrics import ConfusionCounts, MetricReport, confusion, dice, evaluate, hausdorff95, iou, sensitivity, specificity
from .nifti import (
    NiftiError,
    ProbabilityVolume,
    read_label_volume,
    read_probability_volume,
    write_label_volume,
)
from .postprocess import prune_unsupported_et
from .rano import measure, measure_lesion_diameters, measure_lesion_product, rano
from .rano_oracle import rano_oracle
from .report import MeasurementReport, write_report
from .segments import LesionMeasurement, RanoMeasurement, RanoParams, Segment2D, is_inscribed
from .volume import (
    BinaryMask,
    LabelVolume,
    Spacing,
    boundary_voxels,
    class_mask,
    connected_components,
    extract_slice,
    volume_mm3,
)
