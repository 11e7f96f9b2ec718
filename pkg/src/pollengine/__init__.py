"""Pollen grain detection, hypersphere embedding, and palynological reporting."""

from .annot import AnnotationFile, GrainDataset, read_annotations, write_annotations
from .detect import DetectParams, GrainDetection, detect_grains
from .embed import Embedding, ExternalEmbedder, MockEmbedder, VitEmbedder
from .errors import PollenError
from .metrics import (
    CentroidSet,
    EvalReport,
    classify,
    evaluate_embeddings,
    fit_centroids,
)
from .msloss import Batch, MsParams, make_cluster_batch, ms_grad, ms_loss, toy_optimize
from .pipeline import (
    CALIBRATION_PRESETS,
    CalibrationParams,
    PalynologyReport,
    run_pipeline,
    synthetic_scene,
)
from .prep import NormalizedCrop, prepare_grain
from .raster import BinaryMask, Raster, SaliencyMap, best_focus, load_image, save_png

__version__ = "0.1.0"

__all__ = [
    "AnnotationFile",
    "Batch",
    "BinaryMask",
    "CALIBRATION_PRESETS",
    "CalibrationParams",
    "CentroidSet",
    "DetectParams",
    "Embedding",
    "EvalReport",
    "ExternalEmbedder",
    "GrainDataset",
    "GrainDetection",
    "MockEmbedder",
    "MsParams",
    "NormalizedCrop",
    "PalynologyReport",
    "PollenError",
    "Raster",
    "SaliencyMap",
    "VitEmbedder",
    "best_focus",
    "classify",
    "detect_grains",
    "evaluate_embeddings",
    "fit_centroids",
    "load_image",
    "make_cluster_batch",
    "ms_grad",
    "ms_loss",
    "prepare_grain",
    "read_annotations",
    "run_pipeline",
    "save_png",
    "synthetic_scene",
    "toy_optimize",
    "write_annotations",
    "__version__",
]
