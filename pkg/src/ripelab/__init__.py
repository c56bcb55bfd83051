"""Cranberry ripening analysis from registered time-series bog imagery.

Pipeline: gray-card radiometric calibration, homography registration to
the first frame, IoU mask tracking, 5-class albedo clustering with the
ripeness-ratio table, and a seeded 2-D embedding with a per-berry
ripeness axis. A synthetic data generator provides ground truth for
every stage.
"""

from .albedo import (
    ClassHistogram,
    ColorClassModel,
    RipenessRatioTable,
    class_histogram,
    fit_color_classes,
    label_berry,
    ripeness_ratio,
    risk_date,
    risk_flag,
)
from .calib import CalibrationModel, apply_calibration, fit_calibration
from .embed import (
    EmbeddingModel,
    ExtractorScore,
    RipenessAxis,
    UmapParams,
    fit_ripeness_axis,
    ripeness_value,
    ripeness_values,
    select_extractor_report,
    umap_embed,
)
from .errors import (
    EstimationError,
    FitError,
    GenerationError,
    InsufficientCorrespondences,
    RipelabError,
    StageError,
    ValidationError,
)
from .model import (
    BerryTrack,
    FeatureRecord,
    GrayPatchSample,
    InstanceMask,
    InstanceMaskSet,
    SessionManifest,
    TrackEntry,
    load_features,
    load_manifest,
    load_masks,
    load_series,
    load_tracks,
    save_features,
    save_manifest,
    save_masks,
    save_tracks,
)
from .pipeline import PipelineConfig, run_pipeline
from .register import (
    Correspondence,
    Homography,
    MatchParams,
    detect_and_match,
    estimate_homography,
    warp_labels_to_reference,
    warp_to_reference,
)
from .synth import SynthConfig, SynthDataset, generate, synth_features
from .track import BerryChip, TrackSet, associate, extract_berry_chip, mask_iou

__version__ = "0.1.0"

__all__ = [
    "BerryChip",
    "BerryTrack",
    "CalibrationModel",
    "ClassHistogram",
    "ColorClassModel",
    "Correspondence",
    "EmbeddingModel",
    "EstimationError",
    "ExtractorScore",
    "FeatureRecord",
    "FitError",
    "GenerationError",
    "GrayPatchSample",
    "Homography",
    "InstanceMask",
    "InstanceMaskSet",
    "InsufficientCorrespondences",
    "MatchParams",
    "PipelineConfig",
    "RipelabError",
    "RipenessAxis",
    "RipenessRatioTable",
    "SessionManifest",
    "StageError",
    "SynthConfig",
    "SynthDataset",
    "TrackEntry",
    "TrackSet",
    "UmapParams",
    "ValidationError",
    "apply_calibration",
    "associate",
    "class_histogram",
    "detect_and_match",
    "estimate_homography",
    "extract_berry_chip",
    "fit_calibration",
    "fit_color_classes",
    "fit_ripeness_axis",
    "generate",
    "label_berry",
    "load_features",
    "load_manifest",
    "load_masks",
    "load_series",
    "load_tracks",
    "mask_iou",
    "ripeness_ratio",
    "ripeness_value",
    "ripeness_values",
    "risk_date",
    "risk_flag",
    "run_pipeline",
    "save_features",
    "save_manifest",
    "save_masks",
    "save_tracks",
    "select_extractor_report",
    "synth_features",
    "umap_embed",
    "warp_labels_to_reference",
    "warp_to_reference",
]
