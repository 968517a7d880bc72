"""Volumetric segmentation evaluation toolkit.

Evaluates 3D multi-tissue label masks against reference segmentations:
overlap metrics (Dice, VOE, volume CV), surface distances (ASSD on an
exact anisotropic distance transform), cartilage thickness and its
longitudinal change, depth-wise slice profiles, vote/bound ensembles,
and the nonparametric comparison machinery (Kruskal-Wallis, Dunn,
Bland-Altman, Pearson).
"""

__version__ = "0.1.0"

from .volume import (
    BACKGROUND,
    CARTILAGE_TISSUES,
    LABEL_ALPHABET,
    TISSUE_LABELS,
    BinaryMask,
    LabelVolume,
    VolumeFormatError,
    VoxelSpacing,
    extract_mask,
    load_volume,
    save_volume,
)
from .manifest import DatasetManifest, ManifestError, ScanRecord, load_manifest
from .overlap import (
    DiceCorrelationMatrix,
    MetricRecord,
    dice,
    dice_correlation_matrix,
    rms_cv,
    voe,
    volume_mm3,
)
from .surface import (
    DistanceField,
    EmptyMaskError,
    SurfaceVoxelSet,
    assd_mm,
    distance_field,
    extract_surface,
)
from .thickness import (
    BlandAltman,
    ThicknessResult,
    bland_altman,
    longitudinal_change_mm,
    mean_thickness_mm,
    thickness_difference_mm,
    thickness_error_mm,
)
from .droid import DepthProfile, depth_profile
from .ensemble import (
    EnsembleSpec,
    VoteConflictReport,
    oracle_tn,
    oracle_tp,
    parse_ensemble_spec,
    vote,
    vote_labels,
)
from .stats import (
    DunnPair,
    DunnResult,
    KWResult,
    PearsonResult,
    dunn_posthoc,
    kruskal_wallis,
    pearson,
)
from .report import MetricTable, RunConfig, run_aggregate, run_compare, run_evaluate

__all__ = [
    "BACKGROUND",
    "CARTILAGE_TISSUES",
    "LABEL_ALPHABET",
    "TISSUE_LABELS",
    "BinaryMask",
    "BlandAltman",
    "DatasetManifest",
    "DepthProfile",
    "DiceCorrelationMatrix",
    "DistanceField",
    "DunnPair",
    "DunnResult",
    "EmptyMaskError",
    "EnsembleSpec",
    "KWResult",
    "LabelVolume",
    "ManifestError",
    "MetricRecord",
    "MetricTable",
    "PearsonResult",
    "RunConfig",
    "ScanRecord",
    "SurfaceVoxelSet",
    "ThicknessResult",
    "VolumeFormatError",
    "VoteConflictReport",
    "VoxelSpacing",
    "assd_mm",
    "bland_altman",
    "depth_profile",
    "dice",
    "dice_correlation_matrix",
    "distance_field",
    "dunn_posthoc",
    "extract_mask",
    "extract_surface",
    "kruskal_wallis",
    "load_manifest",
    "load_volume",
    "longitudinal_change_mm",
    "mean_thickness_mm",
    "oracle_tn",
    "oracle_tp",
    "parse_ensemble_spec",
    "pearson",
    "rms_cv",
    "run_aggregate",
    "run_compare",
    "run_evaluate",
    "save_volume",
    "thickness_difference_mm",
    "thickness_error_mm",
    "voe",
    "volume_mm3",
    "vote",
    "vote_labels",
]
