"""Tiled object detection toolkit for very large seafloor images.

Slices high-resolution images into overlapping patches, splits datasets
into stratified train/val/test sets, augments patches, replays or simulates
patch-level detections, merges them back into whole-image coordinates and
scores the result with COCO-style mAP.
"""

__version__ = "0.1.0"

from .dataset import Annotation, Category, CategoryTable, DatasetIndex, Detection, ImageRecord, load_coco, save_coco
from .errors import ConfigError, DataError, DataIOError, TiledetError
from .geometry import BBox, iou
from .slicer import SliceConfig, compute_patch_grid, slice_dataset
from .splitter import SplitSpec, stratified_split
from .augment import AugmentationSpec, Strategy, apply_strategy
from .detector import FileBackend, OracleBackend, OracleConfig, ScoreModel
from .postprocess import MergeMode, PostprocessConfig, nmm_merge, nms_suppress
from .evaluator import EvalConfig, coco_map, evaluate

__all__ = [
    "Annotation", "AugmentationSpec", "BBox", "Category", "CategoryTable", "ConfigError", "DataError",
    "DataIOError", "DatasetIndex", "Detection", "EvalConfig", "FileBackend", "ImageRecord", "MergeMode",
    "OracleBackend", "OracleConfig", "PostprocessConfig", "ScoreModel", "SliceConfig", "SplitSpec",
    "Strategy", "TiledetError", "apply_strategy", "coco_map", "compute_patch_grid", "evaluate", "iou",
    "load_coco", "nmm_merge", "nms_suppress", "save_coco", "slice_dataset", "stratified_split",
]
